"""Degrade / restore / classify comparison harness and its reports.

Report CSV columns: ``variant, accuracy, mean_psnr, n``.  ``mean_psnr`` is
left empty for the ``original`` variant.
"""
from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import imaging
from .datasets import ImageStore, LabelSpace, ManifestEntry
from .diagnosis import Classifier, predict_sets, subset_accuracy
from .models import Generator, generator_forward

log = logging.getLogger(__name__)

VARIANT_ORDER = ("bicubic", "g_pix", "g_feat", "original")
CSV_COLUMNS = ("variant", "accuracy", "mean_psnr", "n")


@dataclass
class PipelineVariant:
    name: str
    restorer: Generator | None = None

    def __post_init__(self):
        if self.name not in VARIANT_ORDER:
            raise ValueError(f"unknown variant {self.name!r}; expected one of {VARIANT_ORDER}")
        if self.name in ("bicubic", "original") and self.restorer is not None:
            raise ValueError(f"variant {self.name!r} takes no generator")


@dataclass
class DegradedItem:
    path: Path | None
    lr: np.ndarray
    original: np.ndarray
    labels: frozenset


@dataclass
class VariantResult:
    variant: str
    accuracy: float
    mean_psnr: float | None
    n: int


@dataclass
class MetricsTable:
    rows: list[VariantResult] = field(default_factory=list)
    lr_digest: str = ""
    errors: list[tuple[str, str]] = field(default_factory=list)
    samples: dict = field(default_factory=dict)

    def row(self, variant: str) -> VariantResult:
        for r in self.rows:
            if r.variant == variant:
                return r
        raise KeyError(variant)

    def accuracy(self, variant: str) -> float:
        return self.row(variant).accuracy


def degrade_testset(entries: Sequence[ManifestEntry], lr_size: int = 56, scale: int = 4,
                    store: ImageStore | None = None) -> tuple[list[DegradedItem], list[tuple[str, str]]]:
    """Bicubic-resize every test image to ``lr_size`` square.

    The reference image kept for the ``original`` variant is the file itself,
    resized to ``lr_size * scale`` if it is not already that size.
    Unreadable or too-small images are skipped and reported.
    """
    store = store or ImageStore()
    items, skipped = [], []
    hr_size = lr_size * scale
    for e in entries:
        try:
            img = store.get(e.path)
            if min(img.shape[:2]) < lr_size:
                raise ValueError(f"image is smaller than {lr_size}x{lr_size}")
        except Exception as exc:  # noqa: BLE001 - every per-item failure is recorded
            skipped.append((str(e.path), str(exc)))
            log.warning("skipping %s: %s", e.path, exc)
            continue
        original = img if img.shape[:2] == (hr_size, hr_size) else imaging.bicubic_resize(img, hr_size, hr_size)
        items.append(DegradedItem(e.path, imaging.bicubic_resize(img, lr_size, lr_size), original, e.labels))
    return items, skipped


def lr_digest(items: Sequence[DegradedItem]) -> str:
    h = hashlib.sha256()
    for it in items:
        h.update(np.ascontiguousarray(it.lr).tobytes())
    return h.hexdigest()


def restore(variant: PipelineVariant, lr, scale: int = 4) -> np.ndarray:
    """4x restoration of one LR image, clamped to [0, 1]."""
    lr = imaging.as_image(lr)
    if variant.name == "original":
        raise ValueError("the original variant has no restoration step")
    h, w, _ = lr.shape
    if variant.name == "bicubic":
        return imaging.bicubic_resize(lr, h * scale, w * scale)
    if variant.restorer is None:
        raise ValueError(f"variant {variant.name!r} needs generator weights")
    return generator_forward(variant.restorer, [lr], clamp=True)[0]


def compare_pipelines(classifier: Classifier, thresholds, space: LabelSpace, variants: Sequence[PipelineVariant],
                      items: Sequence[DegradedItem], keep: int = 0) -> MetricsTable:
    """Classify every variant of every item with one classifier and threshold vector.

    ``keep`` images per variant are retained in ``table.samples`` for the
    contact sheet.
    """
    if items and classifier.cfg.input_size != items[0].original.shape[0]:
        raise ValueError("classifier input size does not match the restored image size")
    table = MetricsTable(lr_digest=lr_digest(items))
    ordered = sorted(variants, key=lambda v: VARIANT_ORDER.index(v.name))
    for variant in ordered:
        images, truths, psnrs = [], [], []
        for it in items:
            try:
                img = it.original if variant.name == "original" else restore(variant, it.lr)
            except Exception as exc:  # noqa: BLE001
                table.errors.append((f"{variant.name}:{it.path}", str(exc)))
                continue
            images.append(img)
            truths.append(it.labels)
            if variant.name != "original":
                psnrs.append(imaging.psnr(img, it.original))
        preds = predict_sets(classifier.probabilities(images), thresholds, space) if images else []
        table.rows.append(VariantResult(variant.name, subset_accuracy(preds, truths) if preds else 0.0,
                                        float(np.mean(psnrs)) if psnrs else None, len(images)))
        if keep:
            table.samples[variant.name] = images[:keep]
    return table


def write_report_csv(path, table: MetricsTable) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in table.rows:
            w.writerow([r.variant, repr(float(r.accuracy)), "" if r.mean_psnr is None else repr(float(r.mean_psnr)), r.n])


def read_report_csv(path) -> list[VariantResult]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        return [VariantResult(row["variant"], float(row["accuracy"]),
                              float(row["mean_psnr"]) if row["mean_psnr"] else None, int(row["n"])) for row in reader]


def center_crop(img: np.ndarray, size: int) -> np.ndarray:
    h, w, _ = img.shape
    size = min(size, h, w)
    top, left = (h - size) // 2, (w - size) // 2
    return img[top:top + size, left:left + size]


def contact_sheet(rows: Sequence[Sequence[np.ndarray]], tile: int = 96, gap: int = 2) -> np.ndarray:
    """Grid of centre crops; ``rows[i][j]`` is sample i under variant j.  Gaps are white."""
    n_rows = len(rows)
    n_cols = max(len(r) for r in rows)
    channels = max(r[0].shape[2] for r in rows if r)
    sheet = np.ones((n_rows * tile + (n_rows - 1) * gap, n_cols * tile + (n_cols - 1) * gap, channels))
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            crop = center_crop(imaging.as_image(img), tile)
            if crop.shape[:2] != (tile, tile):
                crop = imaging.bicubic_resize(crop, tile, tile)
            y, x = i * (tile + gap), j * (tile + gap)
            sheet[y:y + tile, x:x + tile] = crop
    return sheet


def export_report(table: MetricsTable, out_dir, k: int = 4, tile: int = 96) -> dict[str, Path]:
    """Write ``report.csv`` and, when samples exist, ``contact_sheet.png``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {"csv": out_dir / "report.csv"}
    write_report_csv(written["csv"], table)
    names = [v for v in VARIANT_ORDER if table.samples.get(v)]
    if k > 0 and names:
        n = min(k, min(len(table.samples[v]) for v in names))
        rows = [[table.samples[v][i] for v in names] for i in range(n)]
        if rows:
            written["contact_sheet"] = out_dir / "contact_sheet.png"
            imaging.write_png(written["contact_sheet"], contact_sheet(rows, tile))
    return written
