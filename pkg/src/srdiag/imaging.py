"""Image I/O, bicubic resampling, crop/flip/rotate primitives and PSNR.

Images are ``float64`` numpy arrays of shape ``(H, W, C)`` with values
nominally in ``[0, 1]``.  ``C`` is 1 or 3.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

KEYS_A = -0.5
PSNR_CAP = 99.0


def as_image(img) -> np.ndarray:
    """Validate and normalise an image array to ``(H, W, C)`` float64."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"expected an (H, W, C) image with C in (1, 3), got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"empty image of shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    return arr


def keys_kernel(x, a: float = KEYS_A):
    """Keys cubic convolution kernel."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2 = x * x
    x3 = x2 * x
    near = (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0
    far = a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


@dataclass(frozen=True)
class ResamplePlan:
    """Precomputed 1-D resampling weights for one axis.

    ``weights`` has shape ``(dst, src)``; each row sums to one.  When
    minifying, the kernel is stretched by ``src / dst`` so that it acts as
    an antialiasing filter.
    """

    src: int
    dst: int
    weights: np.ndarray
    a: float = KEYS_A

    @classmethod
    def build(cls, src: int, dst: int, a: float = KEYS_A) -> "ResamplePlan":
        return cls(src, dst, _plan_weights(src, dst, a), a)

    def apply(self, img: np.ndarray, axis: int) -> np.ndarray:
        return np.moveaxis(np.tensordot(self.weights, img, axes=([1], [axis])), 0, axis)


@lru_cache(maxsize=64)
def _plan_weights(src: int, dst: int, a: float) -> np.ndarray:
    if src < 1 or dst < 1:
        raise ValueError(f"resample dimensions must be >= 1, got {src} -> {dst}")
    scale = dst / src
    stretch = 1.0 / scale if scale < 1.0 else 1.0
    support = 2.0 * stretch
    centers = (np.arange(dst) + 0.5) / scale - 0.5
    first = np.floor(centers - support).astype(int)
    taps = int(np.ceil(2 * support)) + 2
    idx = first[:, None] + np.arange(taps)[None, :]
    w = keys_kernel((idx - centers[:, None]) / stretch, a)
    w /= w.sum(axis=1, keepdims=True)
    out = np.zeros((dst, src))
    rows = np.repeat(np.arange(dst), taps)
    np.add.at(out, (rows, np.clip(idx, 0, src - 1).ravel()), w.ravel())
    out.setflags(write=False)
    return out


def bicubic_resize(img, target_h: int, target_w: int, clamp: bool = True) -> np.ndarray:
    """Separable Keys (a=-0.5) resampling with edge clamping.

    Pixel centres are aligned (``src = (dst + 0.5) / scale - 0.5``).  The
    result is clamped to ``[0, 1]`` unless ``clamp`` is false.
    """
    img = as_image(img)
    if target_h < 1 or target_w < 1:
        raise ValueError(f"target size must be >= 1, got {target_h}x{target_w}")
    h, w, _ = img.shape
    out = img
    if target_h != h:
        out = ResamplePlan.build(h, target_h).apply(out, 0)
    if target_w != w:
        out = ResamplePlan.build(w, target_w).apply(out, 1)
    if clamp:
        out = np.clip(out, 0.0, 1.0)
    return np.ascontiguousarray(out)


def random_crop(img, size: int, rng: np.random.Generator) -> np.ndarray:
    img = as_image(img)
    h, w, _ = img.shape
    if size < 1 or size > min(h, w):
        raise ValueError(f"crop size {size} does not fit a {h}x{w} image")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return img[top:top + size, left:left + size].copy()


def flip_rotate(img, flip: bool, k: int) -> np.ndarray:
    """Horizontal flip (optional) followed by ``k`` counter-clockwise quarter turns."""
    out = as_image(img)
    if flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(np.rot90(out, k % 4, axes=(0, 1)))


def augment(img, rng: np.random.Generator) -> np.ndarray:
    flip = bool(rng.random() < 0.5)
    k = int(rng.integers(0, 4))
    return flip_rotate(img, flip, k)


def psnr(a, b) -> float:
    """PSNR in dB for peak value 1.0; identical images return ``PSNR_CAP``."""
    a = as_image(a)
    b = as_image(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def to_uint8(img) -> np.ndarray:
    return np.round(255.0 * np.clip(as_image(img), 0.0, 1.0)).astype(np.uint8)


def read_png(path) -> np.ndarray:
    path = Path(path)
    with Image.open(path) as im:
        if im.format != "PNG":
            raise ValueError(f"{path}: only PNG input is supported, got {im.format}")
        if im.mode in ("L", "LA", "1"):
            im = im.convert("L")
        elif im.mode != "RGB":
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return as_image(arr)


def write_png(path, img) -> None:
    data = to_uint8(img)
    if data.shape[2] == 1:
        data = data[:, :, 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data).save(path, format="PNG")
