"""Configuration dataclasses.

Defaults are the full-scale reference values; ``desk()``
returns a scaled-down configuration that trains on one CPU core in minutes.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


@dataclass
class GeneratorConfig:
    blocks: int = 23
    features: int = 64
    growth: int = 32
    beta: float = 0.2
    scale: int = 4
    channels: int = 3

    def validate(self) -> None:
        if self.blocks < 1:
            raise ValueError(f"generator.blocks must be >= 1, got {self.blocks}")
        if self.features < 1 or self.growth < 1:
            raise ValueError("generator.features and generator.growth must be >= 1")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError(f"generator.beta must be in (0, 1], got {self.beta}")
        if self.scale not in (2, 4, 8):
            raise ValueError(f"generator.scale must be 2, 4 or 8, got {self.scale}")
        if self.channels not in (1, 3):
            raise ValueError(f"generator.channels must be 1 or 3, got {self.channels}")


@dataclass
class DiscriminatorConfig:
    input_size: int = 192
    features: tuple = (64, 128, 256, 512, 512, 512)
    slope: float = 0.2
    fc_units: int = 100
    channels: int = 3

    def __post_init__(self):
        self.features = tuple(self.features)

    def validate(self) -> None:
        if len(self.features) != 6:
            raise ValueError(f"discriminator.features needs exactly 6 entries, got {len(self.features)}")
        if any(n < 1 for n in self.features):
            raise ValueError("discriminator.features must be positive")
        if self.input_size < 64 or self.input_size % 64:
            raise ValueError(f"discriminator.input_size must be a positive multiple of 64, got {self.input_size}")
        if self.slope <= 0:
            raise ValueError(f"discriminator.slope must be > 0, got {self.slope}")
        if self.fc_units < 1:
            raise ValueError("discriminator.fc_units must be >= 1")


@dataclass
class AdamConfig:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValueError(f"optimizer lr must be > 0, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"optimizer betas must be in [0, 1), got {self.beta1}, {self.beta2}")
        if self.eps <= 0:
            raise ValueError("optimizer eps must be > 0")


@dataclass
class LossWeights:
    adversarial: float = 5e-3
    pixel: float = 1e-2

    def validate(self) -> None:
        if self.adversarial < 0 or self.pixel < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class PixelStageConfig:
    crop: int = 96
    batch_size: int = 64
    iterations: int = 1_000_000
    optimizer: AdamConfig = field(default_factory=lambda: AdamConfig(lr=2e-4))
    log_every: int = 1
    checkpoint_every: int = 10_000
    seed: int = 0

    def validate(self) -> None:
        if self.crop < 4 or self.crop % 4:
            raise ValueError(f"pixel_stage.crop must be a positive multiple of 4, got {self.crop}")
        if self.batch_size < 1:
            raise ValueError("pixel_stage.batch_size must be >= 1")
        if self.iterations < 0:
            raise ValueError("pixel_stage.iterations must be >= 0")
        if self.log_every < 1 or self.checkpoint_every < 0:
            raise ValueError("pixel_stage.log_every must be >= 1 and checkpoint_every >= 0")
        self.optimizer.validate()


@dataclass
class GanStageConfig:
    crop: int = 192
    batch_size: int = 32
    epochs: int = 400
    weights: LossWeights = field(default_factory=LossWeights)
    g_optimizer: AdamConfig = field(default_factory=lambda: AdamConfig(lr=1e-4))
    d_optimizer: AdamConfig = field(default_factory=lambda: AdamConfig(lr=1e-4))
    feature_extractor: str = "random:0"
    feature_width: float = 1.0
    checkpoint_every: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.crop < 64 or self.crop % 64:
            raise ValueError(f"gan_stage.crop must be a positive multiple of 64, got {self.crop}")
        if self.batch_size < 1:
            raise ValueError("gan_stage.batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("gan_stage.epochs must be >= 0")
        if not 0 < self.feature_width <= 1:
            raise ValueError("gan_stage.feature_width must be in (0, 1]")
        self.weights.validate()
        self.g_optimizer.validate()
        self.d_optimizer.validate()


@dataclass
class DiagnosisConfig:
    input_size: int = 224
    conv_channels: tuple = (32, 32, 64, 64, 128, 128, 256, 256)
    pool_size: int = 7
    fc_width: int = 2048
    dropout: float = 0.5
    classes: int = 25
    batch_size: int = 128
    epochs: int = 1000
    optimizer: AdamConfig = field(default_factory=lambda: AdamConfig(lr=1e-4))
    augment: bool = True
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.conv_channels = tuple(self.conv_channels)

    def validate(self) -> None:
        if len(self.conv_channels) != 8 or any(c < 1 for c in self.conv_channels):
            raise ValueError("diagnosis.conv_channels needs exactly 8 positive entries")
        if self.input_size < 16 or self.input_size % 16:
            raise ValueError(f"diagnosis.input_size must be a positive multiple of 16, got {self.input_size}")
        if self.pool_size < 1 or self.fc_width < 1:
            raise ValueError("diagnosis.pool_size and fc_width must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"diagnosis.dropout must be in [0, 1), got {self.dropout}")
        if self.classes < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("diagnosis.classes and batch_size must be >= 1, epochs >= 0")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("diagnosis.val_fraction must be in [0, 1)")
        self.optimizer.validate()


@dataclass
class DataConfig:
    manifest: str = "corpus/manifest.jsonl"
    label_space: str = "cucumber25"
    train_fraction: float = 0.75
    split_seed: int = 0

    def validate(self) -> None:
        if not 0 < self.train_fraction < 1:
            raise ValueError(f"data.train_fraction must be in (0, 1), got {self.train_fraction}")


@dataclass
class EvaluationConfig:
    lr_size: int = 56
    contact_sheet_rows: int = 4

    def validate(self) -> None:
        if self.lr_size < 1:
            raise ValueError("evaluation.lr_size must be >= 1")
        if self.contact_sheet_rows < 0:
            raise ValueError("evaluation.contact_sheet_rows must be >= 0")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    pixel_stage: PixelStageConfig = field(default_factory=PixelStageConfig)
    gan_stage: GanStageConfig = field(default_factory=GanStageConfig)
    diagnosis: DiagnosisConfig = field(default_factory=DiagnosisConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    seed: int = 0
    deterministic: bool = True
    output_dir: str = "runs/default"

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if hasattr(value, "validate"):
                value.validate()
        if self.discriminator.input_size != self.gan_stage.crop:
            raise ValueError(
                f"discriminator.input_size ({self.discriminator.input_size}) must equal gan_stage.crop ({self.gan_stage.crop})"
            )
        if self.diagnosis.input_size != self.evaluation.lr_size * self.generator.scale:
            raise ValueError("diagnosis.input_size must equal evaluation.lr_size * generator.scale")

    @classmethod
    def desk(cls) -> "RunConfig":
        """Scaled-down settings used by the synthetic-corpus experiment."""
        return cls(
            data=DataConfig(manifest="corpus/manifest.jsonl", label_space="synthetic4"),
            generator=GeneratorConfig(blocks=4, features=32, growth=16),
            discriminator=DiscriminatorConfig(input_size=64, features=(16, 16, 32, 32, 64, 64)),
            pixel_stage=PixelStageConfig(crop=64, batch_size=8, iterations=600,
                                         optimizer=AdamConfig(lr=5e-4), checkpoint_every=200),
            gan_stage=GanStageConfig(crop=64, batch_size=4, epochs=1, feature_width=0.125,
                                     g_optimizer=AdamConfig(lr=5e-5), d_optimizer=AdamConfig(lr=5e-5)),
            diagnosis=DiagnosisConfig(conv_channels=(8, 8, 16, 16, 32, 32, 64, 64), pool_size=1,
                                      fc_width=128, classes=4, batch_size=16, epochs=25,
                                      optimizer=AdamConfig(lr=2e-3)),
            output_dir="runs/desk",
        )


def to_dict(cfg) -> dict[str, Any]:
    def convert(v):
        if isinstance(v, tuple):
            return list(v)
        if isinstance(v, dict):
            return {k: convert(x) for k, x in v.items()}
        return v

    return convert(dataclasses.asdict(cfg))


def from_dict(cls, data: dict | None, where: str = ""):
    """Build a (nested) config dataclass, rejecting unknown keys."""
    data = dict(data or {})
    kwargs = {}
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in known:
            raise ValueError(f"unknown config key {where + key!r}")
        default = known[key].default_factory() if known[key].default_factory is not dataclasses.MISSING else known[key].default
        if dataclasses.is_dataclass(default):
            if not isinstance(value, dict):
                raise ValueError(f"config section {where + key!r} must be a mapping")
            kwargs[key] = from_dict(type(default), value, f"{where}{key}.")
        else:
            kwargs[key] = value
    return cls(**kwargs)


def merge(cfg, overrides: dict, where: str = ""):
    """Return a copy of ``cfg`` with the (nested) ``overrides`` applied."""
    base = to_dict(cfg)

    def deep(dst, src, prefix):
        for k, v in src.items():
            if k not in dst:
                raise ValueError(f"unknown config key {prefix + k!r}")
            if isinstance(dst[k], dict) and isinstance(v, dict):
                deep(dst[k], v, f"{prefix}{k}.")
            else:
                dst[k] = v

    deep(base, overrides, where)
    return from_dict(type(cfg), base)


def load_run_config(path=None, preset: str = "reference") -> RunConfig:
    """Load a YAML run config on top of a preset (``reference`` or ``desk``)."""
    if preset not in ("reference", "desk"):
        raise ValueError(f"unknown preset {preset!r}")
    cfg = RunConfig.desk() if preset == "desk" else RunConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        data = yaml.safe_load(path.read_text()) or {}
        if not isinstance(data, dict):
            raise ValueError(f"{path}: top level must be a mapping")
        data = dict(data)
        if "preset" in data:
            cfg = load_run_config(None, data.pop("preset"))
        cfg = merge(cfg, data)
    cfg.validate()
    return cfg
