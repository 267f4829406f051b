"""Manifests, label spaces, splits, LR/HR pairs and the synthetic texture corpus.

Manifest files are JSON lines.  The first line is a header object with
``"version": 1`` (and optionally ``"classes": [...]``); every following
line is ``{"path": "<relative/or/absolute.png>", "labels": ["name", ...]}``.
Relative paths resolve against the manifest's directory.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import imaging

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1

CUCUMBER_DISEASES = (
    "CCYV", "CMV", "KGMMV", "MYSV", "PRSV", "ZYMV", "WMV",
    "brown_spot", "downy_mildew", "gray_mold", "powdery_mildew",
)
# The 13 observed multi-infection combinations are not enumerated in the
# source publication; these names are placeholders, not real label data.
CUCUMBER_COMBINATIONS = tuple(f"combination_{i:02d}" for i in range(1, 14))


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class LabelSpace:
    names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(set(self.names)) != len(self.names):
            raise ValueError("label names must be unique")
        if not self.names:
            raise ValueError("label space must not be empty")

    @property
    def size(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ValueError(f"unknown label {name!r}") from None

    def __contains__(self, name) -> bool:
        return name in self.names

    def __len__(self) -> int:
        return len(self.names)

    @classmethod
    def cucumber(cls) -> "LabelSpace":
        """25 classes: 11 diseases, 13 placeholder combinations, healthy."""
        return cls(CUCUMBER_DISEASES + CUCUMBER_COMBINATIONS + ("healthy",))

    @classmethod
    def synthetic(cls, n: int) -> "LabelSpace":
        return cls(tuple(f"texture_{i}" for i in range(n)))

    @classmethod
    def preset(cls, name: str) -> "LabelSpace":
        if name == "cucumber25":
            return cls.cucumber()
        if name.startswith("synthetic") and name[len("synthetic"):].isdigit():
            return cls.synthetic(int(name[len("synthetic"):]))
        raise ValueError(f"unknown label-space preset {name!r}")


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    labels: frozenset


@dataclass(frozen=True)
class SamplePair:
    lr: np.ndarray
    hr: np.ndarray
    scale: int


def read_manifest_header(path) -> dict:
    path = Path(path)
    with path.open() as fh:
        for line in fh:
            if line.strip():
                header = json.loads(line)
                return header if isinstance(header, dict) and "version" in header else {}
    return {}


def load_manifest(path, space: LabelSpace | None = None) -> list[ManifestEntry]:
    """Parse and validate a manifest.  With ``space=None`` the header's class list is used."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    entries: list[ManifestEntry] = []
    seen: dict[str, int] = {}
    header_seen = False
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(record, dict):
                raise ManifestError(f"{path}:{lineno}: expected a JSON object")
            if not header_seen:
                header_seen = True
                if "version" in record:
                    if record["version"] != MANIFEST_VERSION:
                        raise ManifestError(f"{path}:{lineno}: unsupported manifest version {record['version']!r}")
                    if space is None and "classes" in record:
                        space = LabelSpace(tuple(record["classes"]))
                    continue
                raise ManifestError(f"{path}:{lineno}: missing header line with \"version\": {MANIFEST_VERSION}")
            for key in ("path", "labels"):
                if key not in record:
                    raise ManifestError(f"{path}:{lineno}: missing field {key!r}")
            labels = record["labels"]
            if not isinstance(labels, list) or not labels or not all(isinstance(x, str) for x in labels):
                raise ManifestError(f"{path}:{lineno}: 'labels' must be a non-empty list of strings")
            if space is None:
                raise ManifestError(f"{path}: no label space given and header has no 'classes'")
            for label in labels:
                if label not in space:
                    raise ManifestError(f"{path}:{lineno}: unknown label {label!r}")
            raw = str(record["path"])
            if raw in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate path {raw!r} (first seen on line {seen[raw]})")
            seen[raw] = lineno
            p = Path(raw)
            entries.append(ManifestEntry(p if p.is_absolute() else root / p, frozenset(labels)))
    return entries


def write_manifest(path, entries: Iterable[ManifestEntry], space: LabelSpace | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"version": MANIFEST_VERSION}
    if space is not None:
        header["classes"] = list(space.names)
    order = {n: i for i, n in enumerate(space.names)} if space is not None else {}
    lines = [json.dumps(header)]
    for e in entries:
        try:
            rel = Path(e.path).relative_to(path.parent)
        except ValueError:
            rel = Path(e.path)
        labels = sorted(e.labels, key=lambda n: (order.get(n, len(order)), n))
        lines.append(json.dumps({"path": rel.as_posix(), "labels": labels}))
    path.write_text("\n".join(lines) + "\n")


def split(entries: Sequence, train_fraction: float, seed: int) -> tuple[list, list]:
    """Seeded disjoint split; ``round(train_fraction * N)`` items go to train.

    Both parts keep the input order.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(entries)
    n_train = int(round(train_fraction * n))
    perm = np.random.default_rng(seed).permutation(n)
    train_idx = np.sort(perm[:n_train])
    test_idx = np.sort(perm[n_train:])
    return [entries[i] for i in train_idx], [entries[i] for i in test_idx]


def make_pair(hr, scale: int = 4) -> SamplePair:
    hr = imaging.as_image(hr)
    h, w, _ = hr.shape
    if scale < 1 or h % scale or w % scale:
        raise ValueError(f"HR size {h}x{w} is not divisible by scale {scale}")
    return SamplePair(imaging.bicubic_resize(hr, h // scale, w // scale), hr, scale)


def encode_labels(labels, space: LabelSpace) -> np.ndarray:
    labels = set(labels)
    if not labels:
        raise ValueError("label sets must be non-empty")
    vec = np.zeros(space.size, dtype=np.float32)
    for name in labels:
        vec[space.index(name)] = 1.0
    return vec


def decode_labels(vector, space: LabelSpace, threshold=0.5) -> frozenset:
    vector = np.asarray(vector, dtype=np.float64)
    thr = np.broadcast_to(np.asarray(threshold, dtype=np.float64), vector.shape)
    return frozenset(space.names[i] for i in np.flatnonzero(vector >= thr))


class ImageStore:
    """Lazy PNG loader with an in-memory cache keyed by path."""

    def __init__(self):
        self._cache: dict[Path, np.ndarray] = {}

    def get(self, path) -> np.ndarray:
        path = Path(path)
        img = self._cache.get(path)
        if img is None:
            img = imaging.read_png(path)
            self._cache[path] = img
        return img


def sample_sr_batch(images: Sequence[np.ndarray], crop: int, batch_size: int, rng: np.random.Generator,
                    scale: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``batch_size`` random crops, augment them and degrade them.

    Returns ``(lr, hr)`` arrays of shape ``(N, crop/scale, crop/scale, C)``
    and ``(N, crop, crop, C)``.  The draw order is fixed so that the batch is
    a pure function of the generator state.
    """
    lrs, hrs = [], []
    for _ in range(batch_size):
        img = images[int(rng.integers(0, len(images)))]
        hr = imaging.augment(imaging.random_crop(img, crop, rng), rng)
        pair = make_pair(hr, scale)
        lrs.append(pair.lr)
        hrs.append(pair.hr)
    return np.stack(lrs), np.stack(hrs)


# -- synthetic corpus -------------------------------------------------------

PERIOD_RANGE = (5.6, 7.4)


def class_periods(classes: int) -> np.ndarray:
    """Stripe period (HR pixels) of each synthetic class."""
    if classes == 1:
        return np.array([PERIOD_RANGE[0]])
    return np.linspace(PERIOD_RANGE[0], PERIOD_RANGE[1], classes)


def synth_image(label: int, classes: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """One texture sample of class ``label``.

    Sinusoidal stripes (horizontal or vertical, random phase) with a
    class-specific period between 5.6 and 7.4 px, a random tint and base
    colour, plus a gentle linear brightness gradient.  A 4x bicubic
    downsample folds these frequencies into weak low-frequency aliases, so
    the class signature survives only in aliased form.
    """
    period = class_periods(classes)[label]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    coord = xx if rng.random() < 0.5 else yy
    phase = rng.uniform(0.0, 2.0 * np.pi)
    contrast = rng.uniform(0.15, 0.25)
    base = rng.uniform(0.35, 0.65, 3)
    tint = rng.uniform(0.7, 1.0, 3)
    gx, gy = rng.uniform(-0.12, 0.12, 2)
    gradient = gx * (xx / size - 0.5) + gy * (yy / size - 0.5)
    stripes = contrast * np.cos(2.0 * np.pi * coord / period + phase)
    img = base + gradient[..., None] + stripes[..., None] * tint
    return np.clip(img, 0.0, 1.0)


def synth_corpus(root, n_per_class: int = 100, classes: int = 4, hr_size: int = 224,
                 seed: int = 0) -> list[ManifestEntry]:
    """Write ``<root>/<class>/<index>.png`` plus ``<root>/manifest.jsonl``."""
    if classes < 2:
        raise ValueError(f"synthetic corpus needs at least 2 classes, got {classes}")
    if n_per_class < 1 or hr_size < 1:
        raise ValueError("n_per_class and hr_size must be >= 1")
    root = Path(root)
    space = LabelSpace.synthetic(classes)
    entries = []
    for c, name in enumerate(space.names):
        for i in range(n_per_class):
            rng = np.random.default_rng([seed, c, i])
            path = root / name / f"{i:05d}.png"
            imaging.write_png(path, synth_image(c, classes, hr_size, rng))
            entries.append(ManifestEntry(path, frozenset([name])))
    write_manifest(root / "manifest.jsonl", entries, space)
    log.info("wrote %d synthetic images to %s", len(entries), root)
    return entries
