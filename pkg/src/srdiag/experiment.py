"""Desk-scale analogue of the bicubic / G_pix / G_feat / original comparison."""
from __future__ import annotations

import copy
import logging
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datasets, diagnosis, evaluation, training
from .config import RunConfig
from .losses import load_feature_extractor
from .models import Generator, build_discriminator, build_generator

log = logging.getLogger(__name__)


def component_seed(global_seed: int, component: str, local_seed: int = 0) -> int:
    """Independent 32-bit seed for one pipeline component."""
    ss = np.random.SeedSequence([int(global_seed), zlib.crc32(component.encode()), int(local_seed)])
    return int(ss.generate_state(1)[0])


def seeded(cfg: RunConfig) -> RunConfig:
    """Copy of ``cfg`` whose per-stage seeds are expanded from the global seed."""
    cfg = copy.deepcopy(cfg)
    cfg.pixel_stage.seed = component_seed(cfg.seed, "pixel_stage", cfg.pixel_stage.seed)
    cfg.gan_stage.seed = component_seed(cfg.seed, "gan_stage", cfg.gan_stage.seed)
    cfg.diagnosis.seed = component_seed(cfg.seed, "diagnosis", cfg.diagnosis.seed)
    return cfg


def validation_split(entries, fraction: float, seed: int):
    """Hold out ``fraction`` of the training entries for threshold tuning."""
    if fraction <= 0 or len(entries) < 2:
        return list(entries), list(entries)
    fit, val = datasets.split(entries, 1.0 - fraction, seed)
    return fit, val


def fit_classifier(cfg: RunConfig, space: datasets.LabelSpace, train_entries, store: datasets.ImageStore):
    """Train the classifier on the fit part and tune thresholds on the validation slice."""
    dcfg = cfg.diagnosis
    fit, val = validation_split(train_entries, dcfg.val_fraction, component_seed(cfg.seed, "validation"))
    images = [store.get(e.path) for e in fit]
    model = diagnosis.build_classifier(dcfg, component_seed(cfg.seed, "classifier_init"), images[0].shape[2])
    history = diagnosis.train_classifier(model, images, diagnosis.targets_for([e.labels for e in fit], space), dcfg)
    val_probs = model.probabilities([store.get(e.path) for e in val])
    val_truth = diagnosis.targets_for([e.labels for e in val], space)
    thresholds = diagnosis.tune_thresholds(val_probs, val_truth)
    val_acc = diagnosis.subset_accuracy(diagnosis.predict_sets(val_probs, thresholds, space), [e.labels for e in val])
    return model, thresholds, history, val_acc


def train_g_pix(cfg: RunConfig, train_entries, store: datasets.ImageStore, checkpoint_path=None) -> tuple[Generator, dict]:
    gen = build_generator(cfg.generator, component_seed(cfg.seed, "generator_init"))
    images = [store.get(e.path) for e in train_entries]
    return training.train_pixel_stage(gen, images, cfg.pixel_stage, checkpoint_path=checkpoint_path)


def train_g_feat(cfg: RunConfig, g_pix: Generator, train_entries, store: datasets.ImageStore,
                 checkpoint_path=None) -> tuple[Generator, dict]:
    disc = build_discriminator(cfg.discriminator, component_seed(cfg.seed, "discriminator_init"))
    fx = load_feature_extractor(cfg.gan_stage.feature_extractor, cfg.gan_stage.feature_width)
    images = [store.get(e.path) for e in train_entries]
    return training.train_gan_stage(g_pix, disc, images, cfg.gan_stage, fx, checkpoint_path=checkpoint_path)


@dataclass
class DeskResult:
    seed: int
    table: evaluation.MetricsTable
    val_accuracy: float
    timings: dict = field(default_factory=dict)
    histories: dict = field(default_factory=dict)

    def accuracy(self, variant: str) -> float:
        return self.table.accuracy(variant)

    def psnr(self, variant: str) -> float:
        return self.table.row(variant).mean_psnr


def run_desk_pipeline(cfg: RunConfig, root, seed: int, per_class: int = 60, classes: int = 4,
                      with_gan: bool = False) -> DeskResult:
    """Synthesize a corpus, train classifier and generator(s), compare restorations."""
    root = Path(root)
    cfg = copy.deepcopy(cfg)
    cfg.seed = seed
    cfg.diagnosis.classes = classes
    cfg = seeded(cfg)
    timings = {}
    t0 = time.perf_counter()
    entries = datasets.synth_corpus(root / "corpus", per_class, classes, cfg.diagnosis.input_size,
                                    component_seed(seed, "corpus"))
    space = datasets.LabelSpace.synthetic(classes)
    train, test = datasets.split(entries, cfg.data.train_fraction, component_seed(seed, "split"))
    store = datasets.ImageStore()
    timings["corpus"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    clf, thresholds, clf_hist, val_acc = fit_classifier(cfg, space, train, store)
    timings["classifier"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    g_pix, pix_hist = train_g_pix(cfg, train, store)
    timings["g_pix"] = time.perf_counter() - t0
    variants = [evaluation.PipelineVariant("bicubic"), evaluation.PipelineVariant("g_pix", g_pix),
                evaluation.PipelineVariant("original")]
    histories = {"classifier": clf_hist.loss, "pixel": pix_hist}
    if with_gan:
        t0 = time.perf_counter()
        g_feat, gan_hist = train_g_feat(cfg, g_pix, train, store)
        timings["g_feat"] = time.perf_counter() - t0
        variants.append(evaluation.PipelineVariant("g_feat", g_feat))
        histories["gan"] = gan_hist

    t0 = time.perf_counter()
    items, skipped = evaluation.degrade_testset(test, cfg.evaluation.lr_size, cfg.generator.scale, store)
    table = evaluation.compare_pipelines(clf, thresholds, space, variants, items, keep=cfg.evaluation.contact_sheet_rows)
    table.errors.extend(skipped)
    timings["evaluation"] = time.perf_counter() - t0
    log.info("seed %d: %s", seed, [(r.variant, r.accuracy, r.mean_psnr) for r in table.rows])
    return DeskResult(seed, table, val_acc, timings, histories)
