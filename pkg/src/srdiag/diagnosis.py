"""Multi-label diagnosis CNN, per-class threshold tuning and subset accuracy."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn
import torch.nn.functional as F

from . import imaging, tensorfile
from .config import DiagnosisConfig, from_dict, to_dict
from .datasets import LabelSpace, encode_labels
from .models import assign_state, images_to_tensor, state_tensors

log = logging.getLogger(__name__)

THRESHOLD_GRID = np.round(np.arange(1, 20) * 0.05, 2)


class Classifier(nn.Module):
    """Four conv pairs (conv-BN-ReLU x2, then 2x2 max-pool), two hidden FC layers, sigmoid head.

    ``forward`` returns logits; ``probabilities`` applies the sigmoid.
    """

    def __init__(self, cfg: DiagnosisConfig, in_channels: int = 3):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.in_channels = in_channels
        layers: list[nn.Module] = []
        cin = in_channels
        for i, cout in enumerate(cfg.conv_channels):
            layers += [nn.Conv2d(cin, cout, 3, 1, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU()]
            if i % 2 == 1:
                layers.append(nn.MaxPool2d(2))
            cin = cout
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(cfg.pool_size)
        self.fc1 = nn.Linear(cin * cfg.pool_size**2, cfg.fc_width)
        self.fc2 = nn.Linear(cfg.fc_width, cfg.fc_width)
        self.fc3 = nn.Linear(cfg.fc_width, cfg.classes)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x: Tensor) -> Tensor:
        h = self.pool(self.features(x)).flatten(1)
        h = self.dropout(F.relu(self.fc1(h)))
        h = self.dropout(F.relu(self.fc2(h)))
        return self.fc3(h)

    def probabilities(self, images, batch_size: int = 16) -> np.ndarray:
        """Evaluation-mode sigmoid outputs for a sequence of HxWxC images."""
        images = list(images)
        size = self.cfg.input_size
        for im in images:
            if im.shape[:2] != (size, size):
                raise ValueError(f"classifier expects {size}x{size} inputs, got {im.shape[0]}x{im.shape[1]}")
        was_training = self.training
        self.eval()
        out = []
        with torch.no_grad():
            for i in range(0, len(images), batch_size):
                out.append(torch.sigmoid(self(images_to_tensor(images[i:i + batch_size]))).double().numpy())
        self.train(was_training)
        return np.concatenate(out) if out else np.zeros((0, self.cfg.classes))


def build_classifier(cfg: DiagnosisConfig, seed: int = 0, in_channels: int = 3) -> Classifier:
    model = Classifier(cfg, in_channels)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                std = math.sqrt(2.0 / m.weight[0].numel())
                nn.init.trunc_normal_(m.weight, 0.0, std, -2 * std, 2 * std, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
    return model


@dataclass
class ClassifierHistory:
    loss: list = field(default_factory=list)


def train_classifier(model: Classifier, images: Sequence[np.ndarray], targets: np.ndarray,
                     cfg: DiagnosisConfig | None = None) -> ClassifierHistory:
    """Adam on mean per-class BCE.  ``targets`` is an (N, classes) multi-hot matrix.

    Flip/rotation augmentation is drawn from a numpy generator seeded with
    ``cfg.seed``; dropout uses a torch generator seeded from the same value.
    """
    cfg = cfg or model.cfg
    targets = np.asarray(targets, dtype=np.float32)
    if len(images) == 0 or len(images) != len(targets):
        raise ValueError("training data must be non-empty and match the targets")
    absent = np.flatnonzero(targets.sum(0) == 0)
    if len(absent):
        log.warning("classes %s have no positive training samples", absent.tolist())
    history = ClassifierHistory()
    if cfg.epochs == 0:
        return history
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.optimizer.lr,
                           betas=(cfg.optimizer.beta1, cfg.optimizer.beta2), eps=cfg.optimizer.eps)
    model.train()
    n = len(images)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = [imaging.augment(images[i], rng) if cfg.augment else images[i] for i in idx]
            x = images_to_tensor(batch)
            y = torch.from_numpy(targets[idx])
            loss = F.binary_cross_entropy_with_logits(model(x), y)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite classifier loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        history.loss.append(total / seen)
        log.info("classifier epoch %d loss %.4f", epoch + 1, history.loss[-1])
    model.eval()
    return history


def _f1(pred: np.ndarray, truth: np.ndarray) -> float:
    tp = np.sum(pred & truth)
    denom = 2 * tp + np.sum(pred & ~truth) + np.sum(~pred & truth)
    return 2 * tp / denom if denom else 0.0


def tune_thresholds(probabilities, truth, grid=THRESHOLD_GRID) -> np.ndarray:
    """Per-class threshold maximising F1 on the grid; ties go to the lowest value.

    Classes without any positive sample get 0.5.
    """
    probs = np.asarray(probabilities, dtype=np.float64)
    truth = np.asarray(truth)
    if probs.ndim != 2 or probs.shape != truth.shape:
        raise ValueError(f"probabilities {probs.shape} and truth {truth.shape} must be equal 2-D shapes")
    truth = truth.astype(bool)
    out = np.full(probs.shape[1], 0.5)
    for c in range(probs.shape[1]):
        if not truth[:, c].any():
            continue
        scores = [_f1(probs[:, c] >= t, truth[:, c]) for t in grid]
        out[c] = grid[int(np.argmax(scores))]
    return out


def predict_sets(probabilities, thresholds, space: LabelSpace) -> list[frozenset]:
    probs = np.atleast_2d(np.asarray(probabilities, dtype=np.float64))
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if probs.shape[1] != len(thresholds) or len(thresholds) != space.size:
        raise ValueError("threshold vector length must equal the number of classes")
    hits = probs >= thresholds[None, :]
    return [frozenset(space.names[i] for i in np.flatnonzero(row)) for row in hits]


def predict(model: Classifier, img, thresholds, space: LabelSpace) -> frozenset:
    """Label set for one image: class i is present iff p_i >= threshold_i."""
    img = imaging.as_image(img)
    return predict_sets(model.probabilities([img]), thresholds, space)[0]


def subset_accuracy(predictions: Sequence, truth: Sequence) -> float:
    """Fraction of samples whose predicted label set equals the true set exactly."""
    if len(predictions) != len(truth):
        raise ValueError(f"length mismatch: {len(predictions)} predictions vs {len(truth)} truths")
    if not predictions:
        return 0.0
    return sum(set(p) == set(t) for p, t in zip(predictions, truth)) / len(predictions)


def targets_for(labels: Sequence, space: LabelSpace) -> np.ndarray:
    return np.stack([encode_labels(l, space) for l in labels]) if labels else np.zeros((0, space.size), np.float32)


def save_classifier(path, model: Classifier, space: LabelSpace) -> None:
    meta = {"kind": "classifier", "config": to_dict(model.cfg), "classes": list(space.names),
            "in_channels": model.in_channels}
    tensorfile.save(path, state_tensors(model), meta)


def load_classifier(path) -> tuple[Classifier, LabelSpace]:
    tensors, meta = tensorfile.load(path)
    if meta.get("kind") != "classifier":
        raise tensorfile.ContainerError(f"{path}: expected a classifier file, found {meta.get('kind')!r}")
    cfg = from_dict(DiagnosisConfig, meta["config"])
    model = Classifier(cfg, int(meta.get("in_channels", 3)))
    assign_state(model, tensors, str(path))
    return model.eval(), LabelSpace(tuple(meta["classes"]))


def save_thresholds(path, thresholds, space: LabelSpace) -> None:
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if len(thresholds) != space.size:
        raise ValueError("threshold vector length must equal the number of classes")
    data = {"version": 1, "thresholds": {n: float(t) for n, t in zip(space.names, thresholds)}}
    Path(path).write_text(json.dumps(data, indent=2) + "\n")


def load_thresholds(path, space: LabelSpace) -> np.ndarray:
    data = json.loads(Path(path).read_text())
    table = data.get("thresholds", {})
    missing = [n for n in space.names if n not in table]
    if missing:
        raise ValueError(f"{path}: no threshold for class(es) {missing}")
    return np.array([float(table[n]) for n in space.names])
