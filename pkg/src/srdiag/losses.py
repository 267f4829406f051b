"""Training objectives for the SR generator and discriminator.

All reductions are means.  Functions accept torch tensors (gradients flow)
or numpy arrays (converted to float64 tensors).
"""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn
import torch.nn.functional as F

from . import tensorfile
from .config import LossWeights

LOG_FLOOR = math.log(1e-12)

# VGG-19 convolution plan; "M" is a 2x2 max-pool.  The tap is conv5_4.
VGG19_PLAN = (64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M", 512, 512, 512, 512, "M", 512, 512, 512, 512)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def _t(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _nonempty(*vectors: Tensor) -> None:
    for v in vectors:
        if v.numel() == 0:
            raise ValueError("logit vectors must be non-empty")


def pixel_loss(hr, sr) -> Tensor:
    hr, sr = _t(hr), _t(sr)
    if hr.shape != sr.shape:
        raise ValueError(f"shape mismatch: {tuple(hr.shape)} vs {tuple(sr.shape)}")
    return (hr - sr).abs().mean()


def relativistic_output(c_a, c_b) -> Tensor:
    """sigmoid(C(a) - mean C(b)) per element of ``c_a``."""
    c_a, c_b = _t(c_a).reshape(-1), _t(c_b).reshape(-1)
    _nonempty(c_a, c_b)
    return torch.sigmoid(c_a - c_b.mean())


def _log_d(c_a: Tensor, c_b: Tensor) -> Tensor:
    # log D(a, b), floored at log(1e-12)
    return F.logsigmoid(c_a - c_b.mean()).clamp_min(LOG_FLOOR)


def _log_one_minus_d(c_a: Tensor, c_b: Tensor) -> Tensor:
    return F.logsigmoid(c_b.mean() - c_a).clamp_min(LOG_FLOOR)


def discriminator_loss(c_hr, c_sr) -> Tensor:
    c_hr, c_sr = _t(c_hr).reshape(-1), _t(c_sr).reshape(-1)
    _nonempty(c_hr, c_sr)
    return -_log_d(c_hr, c_sr).mean() - _log_one_minus_d(c_sr, c_hr).mean()


def generator_adv_loss(c_hr, c_sr) -> Tensor:
    c_hr, c_sr = _t(c_hr).reshape(-1), _t(c_sr).reshape(-1)
    _nonempty(c_hr, c_sr)
    return -_log_one_minus_d(c_hr, c_sr).mean() - _log_d(c_sr, c_hr).mean()


class FeatureExtractor(nn.Module):
    """VGG-19 convolution stack up to conv5_4, returning pre-activation features.

    ``width`` scales every channel count (1.0 is the standard network); it
    only makes sense for randomly initialised extractors.
    """

    def __init__(self, width: float = 1.0, in_channels: int = 3):
        super().__init__()
        self.width = width
        self.layers = nn.ModuleDict()
        self.plan: list[str] = []
        cin = in_channels
        stage, index = 1, 1
        for item in VGG19_PLAN:
            if item == "M":
                self.plan.append("pool")
                stage, index = stage + 1, 1
                continue
            cout = max(1, int(round(item * width)))
            name = f"conv{stage}_{index}"
            self.layers[name] = nn.Conv2d(cin, cout, 3, 1, 1)
            self.plan.append(name)
            cin, index = cout, index + 1
        self.out_channels = cin
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] < 32 or x.shape[-2] < 32:
            raise ValueError(f"perceptual features need images of at least 32x32, got {tuple(x.shape[-2:])}")
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        h = (x - self.mean) / self.std
        last = self.plan[-1]
        for step in self.plan:
            if step == "pool":
                h = F.max_pool2d(h, 2)
            else:
                h = self.layers[step](h)
                if step != last:
                    h = F.relu(h)
        return h

    def freeze(self) -> "FeatureExtractor":
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()


def load_feature_extractor(source: str, width: float = 1.0) -> FeatureExtractor:
    """Frozen extractor from a container file, or ``"random:<seed>"`` for seeded random weights."""
    source = str(source)
    if source.startswith("random:"):
        try:
            seed = int(source.split(":", 1)[1])
        except ValueError:
            raise ValueError(f"bad random extractor source {source!r}; expected 'random:<int>'") from None
        fx = FeatureExtractor(width)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for conv in fx.layers.values():
                std = math.sqrt(2.0 / conv.weight[0].numel())
                conv.weight.normal_(0.0, std, generator=gen)
                conv.bias.zero_()
        return fx.freeze()
    tensors, meta = tensorfile.load(source)
    fx = FeatureExtractor(float(meta.get("width", 1.0)))
    expected = {k: v for k, v in fx.state_dict().items() if k.startswith("layers.")}
    for name, ref in expected.items():
        if name not in tensors:
            raise tensorfile.ContainerError(f"{source}: missing tensor {name!r}")
        if tuple(tensors[name].shape) != tuple(ref.shape):
            raise tensorfile.ContainerError(
                f"{source}: tensor {name!r} has shape {tuple(tensors[name].shape)}, expected {tuple(ref.shape)}"
            )
    extra = sorted(set(tensors) - set(expected))
    if extra:
        raise tensorfile.ContainerError(f"{source}: unexpected tensor(s) {extra[:5]}")
    with torch.no_grad():
        for name, ref in expected.items():
            ref.copy_(torch.from_numpy(tensors[name]))
    return fx.freeze()


def save_feature_extractor(path, fx: FeatureExtractor) -> None:
    tensors = {k: v for k, v in fx.state_dict().items() if k.startswith("layers.")}
    tensorfile.save(Path(path), tensors, {"kind": "vgg19_54", "width": fx.width})


def perceptual_loss(fx: FeatureExtractor, hr, sr) -> Tensor:
    hr, sr = _t(hr), _t(sr)
    if hr.shape != sr.shape:
        raise ValueError(f"shape mismatch: {tuple(hr.shape)} vs {tuple(sr.shape)}")
    return (fx(hr) - fx(sr)).abs().mean()


def total_generator_loss(fx: FeatureExtractor, weights: LossWeights, hr, sr, c_hr, c_sr) -> tuple[Tensor, dict]:
    """Perceptual + adversarial * L_G + pixel * L1.  Returns the total and its parts."""
    percep = perceptual_loss(fx, hr, sr)
    adv = generator_adv_loss(c_hr, c_sr)
    pix = pixel_loss(hr, sr)
    total = percep + weights.adversarial * adv + weights.pixel * pix
    return total, {"perceptual": percep, "adversarial": adv, "pixel": pix}
