"""RRDB generator and relativistic discriminator backbone."""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn
import torch.nn.functional as F

from . import tensorfile
from .config import DiscriminatorConfig, GeneratorConfig, from_dict, to_dict


def conv3(cin: int, cout: int) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, 1, 1)


class DenseBlock(nn.Module):
    """Five densely connected convs; the last one is the residual branch output."""

    def __init__(self, features: int, growth: int, beta: float):
        super().__init__()
        self.beta = beta
        self.convs = nn.ModuleList(
            [conv3(features + i * growth, growth) for i in range(4)] + [conv3(features + 4 * growth, features)]
        )

    def forward(self, x: Tensor) -> Tensor:
        feats = [x]
        for conv in self.convs[:-1]:
            feats.append(F.leaky_relu(conv(torch.cat(feats, 1)), 0.2))
        return x + self.beta * self.convs[-1](torch.cat(feats, 1))


class RRDB(nn.Module):
    def __init__(self, features: int, growth: int, beta: float):
        super().__init__()
        self.beta = beta
        self.dense = nn.Sequential(*(DenseBlock(features, growth, beta) for _ in range(3)))

    def forward(self, x: Tensor) -> Tensor:
        # residual of the dense chain is rescaled, so zeroed branches give the identity
        return x + self.beta * (self.dense(x) - x)


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        nf = cfg.features
        self.conv_first = conv3(cfg.channels, nf)
        self.body = nn.Sequential(*(RRDB(nf, cfg.growth, cfg.beta) for _ in range(cfg.blocks)))
        self.conv_trunk = conv3(nf, nf)
        self.upconvs = nn.ModuleList(conv3(nf, nf) for _ in range(int(math.log2(cfg.scale))))
        self.conv_hr = conv3(nf, nf)
        self.conv_last = conv3(nf, cfg.channels)

    def forward(self, x: Tensor) -> Tensor:
        feat = self.conv_first(x)
        feat = feat + self.conv_trunk(self.body(feat))
        for conv in self.upconvs:
            feat = F.leaky_relu(conv(F.interpolate(feat, scale_factor=2, mode="nearest")), 0.2)
        return self.conv_last(F.leaky_relu(self.conv_hr(feat), 0.2))


class Discriminator(nn.Module):
    """Six conv blocks (3x3/s1 then 4x4/s2), FC-100, FC-1.  Returns raw logits."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        layers: list[nn.Module] = []
        cin = cfg.channels
        for i, n in enumerate(cfg.features):
            layers.append(nn.Conv2d(cin, n, 3, 1, 1, bias=i == 0))
            if i > 0:
                layers.append(nn.BatchNorm2d(n, momentum=0.1))
            layers.append(nn.LeakyReLU(cfg.slope))
            layers += [nn.Conv2d(n, n, 4, 2, 1, bias=False), nn.BatchNorm2d(n, momentum=0.1), nn.LeakyReLU(cfg.slope)]
            cin = n
        self.features = nn.Sequential(*layers)
        self.extent = cfg.input_size // 64
        self.fc1 = nn.Linear(cin * self.extent * self.extent, cfg.fc_units)
        self.fc2 = nn.Linear(cfg.fc_units, 1)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-2:] != (self.cfg.input_size, self.cfg.input_size):
            raise ValueError(
                f"discriminator expects {self.cfg.input_size}x{self.cfg.input_size} inputs, got {tuple(x.shape[-2:])}"
            )
        h = self.features(x).flatten(1)
        return self.fc2(F.leaky_relu(self.fc1(h), self.cfg.slope)).squeeze(1)


def seeded_init(model: nn.Module, seed: int, slope: float = 0.2, residual_scale: float = 0.1) -> nn.Module:
    """Truncated-normal He init driven by a private generator.

    Convs that close a residual branch (the last conv of every dense block)
    are scaled down by ``residual_scale``.
    """
    gen = torch.Generator().manual_seed(int(seed))
    gain = math.sqrt(2.0 / (1.0 + slope**2))
    residual = {id(m.convs[-1]) for m in model.modules() if isinstance(m, DenseBlock)}
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight[0].numel()
                std = gain / math.sqrt(fan_in)
                nn.init.trunc_normal_(m.weight, 0.0, std, -2 * std, 2 * std, generator=gen)
                if id(m) in residual:
                    m.weight.mul_(residual_scale)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.reset_parameters()
                m.reset_running_stats()
    return model


def build_generator(cfg: GeneratorConfig, seed: int = 0) -> Generator:
    return seeded_init(Generator(cfg), seed)


def build_discriminator(cfg: DiscriminatorConfig, seed: int = 0) -> Discriminator:
    return seeded_init(Discriminator(cfg), seed, slope=cfg.slope, residual_scale=1.0)


def conv_layers(model: nn.Module) -> list[str]:
    """Names of every Conv2d in construction order."""
    return [name for name, m in model.named_modules() if isinstance(m, nn.Conv2d)]


def images_to_tensor(batch) -> Tensor:
    """Stack HxWxC images into an NCHW float32 tensor; all images must share a shape."""
    if isinstance(batch, np.ndarray) and batch.ndim == 3:
        batch = [batch]
    arrays = [np.asarray(im, dtype=np.float32) for im in batch]
    if not arrays:
        raise ValueError("empty batch")
    arrays = [a[:, :, None] if a.ndim == 2 else a for a in arrays]
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"batch images must share dimensions, got {sorted(shapes)}")
    return torch.from_numpy(np.stack(arrays)).permute(0, 3, 1, 2).contiguous()


def tensor_to_images(t: Tensor) -> np.ndarray:
    return t.detach().permute(0, 2, 3, 1).to(torch.float64).numpy()


def generator_forward(model: Generator, lr_batch, clamp: bool = False) -> np.ndarray:
    """Evaluate the generator on a batch of HxWxC images; returns NxHxWxC float64."""
    x = images_to_tensor(lr_batch)
    if x.shape[1] != model.cfg.channels:
        raise ValueError(f"generator expects {model.cfg.channels} channels, got {x.shape[1]}")
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = model(x)
    model.train(was_training)
    if clamp:
        out = out.clamp(0.0, 1.0)
    return tensor_to_images(out)


def discriminator_logits(model: Discriminator, batch) -> np.ndarray:
    x = images_to_tensor(batch)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = model(x)
    model.train(was_training)
    return out.to(torch.float64).numpy()


def state_tensors(model: nn.Module) -> dict[str, Tensor]:
    """Parameters and float buffers; batch-norm step counters are not persisted."""
    return {k: v for k, v in model.state_dict().items() if not k.endswith("num_batches_tracked")}


def assign_state(model: nn.Module, tensors: dict, source: str = "<tensors>") -> nn.Module:
    """Copy named arrays into ``model``, requiring an exact name and shape match."""
    expected = state_tensors(model)
    missing = [k for k in expected if k not in tensors]
    extra = [k for k in tensors if k not in expected]
    if missing:
        raise tensorfile.ContainerError(f"{source}: missing tensor(s) {missing[:5]}")
    if extra:
        raise tensorfile.ContainerError(f"{source}: unexpected tensor(s) {extra[:5]}")
    with torch.no_grad():
        for k, ref in expected.items():
            value = torch.as_tensor(np.asarray(tensors[k]))
            if tuple(value.shape) != tuple(ref.shape):
                raise tensorfile.ContainerError(
                    f"{source}: tensor {k!r} has shape {tuple(value.shape)}, architecture expects {tuple(ref.shape)}"
                )
            ref.copy_(value)
    return model


_KINDS = {"generator": (GeneratorConfig, build_generator), "discriminator": (DiscriminatorConfig, build_discriminator)}


def save_model(path, model: nn.Module, kind: str, cfg, extra: dict | None = None) -> None:
    meta = {"kind": kind, "config": to_dict(cfg), **(extra or {})}
    tensorfile.save(path, state_tensors(model), meta)


def load_model(path, expected_kind: str | None = None):
    """Rebuild a generator or discriminator from a container file."""
    tensors, meta = tensorfile.load(path)
    kind = meta.get("kind")
    if expected_kind is not None and kind != expected_kind:
        raise tensorfile.ContainerError(f"{path}: expected a {expected_kind} file, found {kind!r}")
    if kind not in _KINDS:
        raise tensorfile.ContainerError(f"{path}: unknown model kind {kind!r}")
    cfg_cls, build = _KINDS[kind]
    cfg = from_dict(cfg_cls, meta.get("config"))
    return assign_state(build(cfg), tensors, str(Path(path)))
