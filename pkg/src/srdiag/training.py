"""Two-stage SR training: pixel-loss pretraining, then adversarial fine-tuning.

Checkpoints are named-tensor containers.  Tensor names are prefixed with
``generator.``, ``discriminator.``, ``g_opt.`` and ``d_opt.``; everything
else (counters, RNG states, config snapshot, loss history, optimizer
hyper-parameters) lives in the JSON metadata.
"""
from __future__ import annotations

import base64
import copy
import csv
import hashlib
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import tensorfile
from .config import AdamConfig, DiscriminatorConfig, GanStageConfig, GeneratorConfig, PixelStageConfig, from_dict, to_dict
from .datasets import make_pair, sample_sr_batch
from . import imaging
from .losses import FeatureExtractor, discriminator_loss, pixel_loss, total_generator_loss
from .models import (Discriminator, Generator, assign_state, build_discriminator, build_generator,
                     images_to_tensor, state_tensors)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDiverged(FloatingPointError):
    pass


def configure_runtime(threads: int | None = None, deterministic: bool = True) -> int:
    """Pin torch threading/determinism.  ``SRDIAG_THREADS`` is the fallback thread count."""
    if threads is None:
        threads = int(os.environ.get("SRDIAG_THREADS", "1" if deterministic else "0") or 0)
    if threads > 0:
        torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(deterministic)
    return torch.get_num_threads()


def make_adam(params, cfg: AdamConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)


def params_digest(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


@dataclass
class TrainState:
    stage: str
    generator: Generator
    g_opt: torch.optim.Adam
    rng: np.random.Generator
    config: dict
    discriminator: Discriminator | None = None
    d_opt: torch.optim.Adam | None = None
    step: int = 0
    history: dict = field(default_factory=dict)


def init_pixel_state(gen: Generator, cfg: PixelStageConfig) -> TrainState:
    cfg.validate()
    torch.manual_seed(cfg.seed)
    return TrainState("pixel", gen, make_adam(gen.parameters(), cfg.optimizer), np.random.default_rng(cfg.seed),
                      to_dict(cfg), history={"iteration": [], "loss": []})


def init_gan_state(gen: Generator, disc: Discriminator, cfg: GanStageConfig) -> TrainState:
    cfg.validate()
    if disc.cfg.input_size != cfg.crop:
        raise ValueError(f"discriminator input size {disc.cfg.input_size} does not match gan crop {cfg.crop}")
    torch.manual_seed(cfg.seed)
    keys = ("epoch", "d_loss", "perceptual", "adversarial", "pixel_term", "total")
    return TrainState("gan", gen, make_adam(gen.parameters(), cfg.g_optimizer), np.random.default_rng(cfg.seed),
                      to_dict(cfg), disc, make_adam(disc.parameters(), cfg.d_optimizer),
                      history={k: [] for k in keys})


def usable_images(images: Sequence[np.ndarray], crop: int) -> list[np.ndarray]:
    kept = [im for im in images if min(im.shape[:2]) >= crop]
    if len(kept) < len(images):
        log.warning("skipping %d image(s) smaller than the %dpx crop", len(images) - len(kept), crop)
    if not kept:
        raise ValueError(f"no training image is at least {crop}x{crop}")
    return kept


def pixel_step(state: TrainState, lr: np.ndarray, hr: np.ndarray) -> float:
    gen = state.generator
    gen.train()
    loss = pixel_loss(images_to_tensor(hr), gen(images_to_tensor(lr)))
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"non-finite pixel loss at iteration {state.step}")
    state.g_opt.zero_grad()
    loss.backward()
    state.g_opt.step()
    return loss.item()


def run_pixel_stage(state: TrainState, images: Sequence[np.ndarray], cfg: PixelStageConfig,
                    until: int | None = None, checkpoint_path=None) -> TrainState:
    """Advance a pixel-stage state to iteration ``until`` (default ``cfg.iterations``)."""
    until = cfg.iterations if until is None else min(until, cfg.iterations)
    if state.step >= until:
        return state
    pool = usable_images(images, cfg.crop)
    scale = state.generator.cfg.scale
    running = []
    while state.step < until:
        lr, hr = sample_sr_batch(pool, cfg.crop, cfg.batch_size, state.rng, scale)
        try:
            loss = pixel_step(state, lr, hr)
        except TrainingDiverged:
            if checkpoint_path:
                save_checkpoint(checkpoint_path, state)
            raise
        state.step += 1
        running.append(loss)
        if state.step % cfg.log_every == 0:
            state.history["iteration"].append(state.step)
            state.history["loss"].append(float(np.mean(running)))
            running = []
        if checkpoint_path and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, state)
    return state


def train_pixel_stage(gen: Generator, images: Sequence[np.ndarray], cfg: PixelStageConfig,
                      checkpoint_path=None) -> tuple[Generator, dict]:
    state = run_pixel_stage(init_pixel_state(gen, cfg), images, cfg, checkpoint_path=checkpoint_path)
    return state.generator, state.history


def gan_step(state: TrainState, fx: FeatureExtractor, weights, lr: np.ndarray, hr: np.ndarray) -> dict:
    """One discriminator update followed by one generator update on the same batch."""
    gen, disc = state.generator, state.discriminator
    gen.train()
    disc.train()
    x_lr, x_hr = images_to_tensor(lr), images_to_tensor(hr)

    for p in disc.parameters():
        p.requires_grad_(True)
    with torch.no_grad():
        fake = gen(x_lr)
    d_loss = discriminator_loss(disc(x_hr), disc(fake))
    if not torch.isfinite(d_loss):
        raise TrainingDiverged(f"non-finite discriminator loss at epoch {state.step}")
    state.d_opt.zero_grad()
    d_loss.backward()
    state.d_opt.step()

    for p in disc.parameters():
        p.requires_grad_(False)
    sr = gen(x_lr)
    c_hr = disc(x_hr).detach()
    c_sr = disc(sr)
    total, parts = total_generator_loss(fx, weights, x_hr, sr, c_hr, c_sr)
    if not torch.isfinite(total):
        raise TrainingDiverged(f"non-finite generator loss at epoch {state.step}")
    state.g_opt.zero_grad()
    total.backward()
    state.g_opt.step()
    for p in disc.parameters():
        p.requires_grad_(True)
    return {"d_loss": d_loss.item(), "perceptual": parts["perceptual"].item(),
            "adversarial": parts["adversarial"].item(), "pixel_term": weights.pixel * parts["pixel"].item(),
            "total": total.item()}


def gan_epoch_batches(images: Sequence[np.ndarray], cfg: GanStageConfig, rng: np.random.Generator, scale: int):
    """Yield ``(lr, hr)`` batches covering every image once in shuffled order."""
    order = rng.permutation(len(images))
    for start in range(0, len(order), cfg.batch_size):
        lrs, hrs = [], []
        for i in order[start:start + cfg.batch_size]:
            hr = imaging.augment(imaging.random_crop(images[i], cfg.crop, rng), rng)
            pair = make_pair(hr, scale)
            lrs.append(pair.lr)
            hrs.append(pair.hr)
        yield np.stack(lrs), np.stack(hrs)


def run_gan_stage(state: TrainState, images: Sequence[np.ndarray], cfg: GanStageConfig, fx: FeatureExtractor | None,
                  until: int | None = None, checkpoint_path=None) -> TrainState:
    if fx is None:
        raise ValueError("the adversarial stage needs a feature extractor")
    until = cfg.epochs if until is None else min(until, cfg.epochs)
    if state.step >= until:
        return state
    pool = usable_images(images, cfg.crop)
    scale = state.generator.cfg.scale
    while state.step < until:
        sums: dict[str, float] = {}
        batches = 0
        try:
            for lr, hr in gan_epoch_batches(pool, cfg, state.rng, scale):
                for k, v in gan_step(state, fx, cfg.weights, lr, hr).items():
                    sums[k] = sums.get(k, 0.0) + v
                batches += 1
        except TrainingDiverged:
            if checkpoint_path:
                save_checkpoint(checkpoint_path, state)
            raise
        state.step += 1
        state.history["epoch"].append(state.step)
        for k, v in sums.items():
            state.history[k].append(v / batches)
        log.info("gan epoch %d: %s", state.step, {k: round(v / batches, 5) for k, v in sums.items()})
        if checkpoint_path and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, state)
    return state


def train_gan_stage(gen_init: Generator, disc: Discriminator, images: Sequence[np.ndarray], cfg: GanStageConfig,
                    fx: FeatureExtractor | None, checkpoint_path=None) -> tuple[Generator, dict]:
    """Fine-tune a copy of ``gen_init`` adversarially; ``gen_init`` itself is not modified."""
    if fx is None:
        raise ValueError("the adversarial stage needs a feature extractor")
    state = init_gan_state(copy.deepcopy(gen_init), disc, cfg)
    state = run_gan_stage(state, images, cfg, fx, checkpoint_path=checkpoint_path)
    return state.generator, state.history


# -- checkpoints ------------------------------------------------------------

def _optimizer_tensors(prefix: str, opt: torch.optim.Optimizer) -> tuple[dict, dict]:
    sd = opt.state_dict()
    tensors, scalars = {}, {}
    for idx, slots in sd["state"].items():
        for key, value in slots.items():
            if isinstance(value, torch.Tensor):
                tensors[f"{prefix}.{idx}.{key}"] = value.reshape(-1) if value.ndim == 0 else value
            else:
                scalars[f"{idx}.{key}"] = value
    return tensors, {"param_groups": sd["param_groups"], "scalars": scalars}


def _restore_optimizer(opt: torch.optim.Optimizer, prefix: str, tensors: dict, meta: dict) -> None:
    sd = opt.state_dict()
    state: dict = {}
    for name, arr in tensors.items():
        if not name.startswith(prefix + "."):
            continue
        idx, key = name[len(prefix) + 1:].split(".", 1)
        t = torch.from_numpy(arr.copy())
        if key == "step":
            t = t.reshape(())
        state.setdefault(int(idx), {})[key] = t
    for name, value in meta.get("scalars", {}).items():
        idx, key = name.split(".", 1)
        state.setdefault(int(idx), {})[key] = value
    groups = meta["param_groups"]
    for g in groups:
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
    opt.load_state_dict({"state": state, "param_groups": groups})
    if len(opt.state_dict()["param_groups"]) != len(sd["param_groups"]):
        raise tensorfile.ContainerError("optimizer layout does not match the model")


def save_checkpoint(path, state: TrainState) -> None:
    tensors = {f"generator.{k}": v for k, v in state_tensors(state.generator).items()}
    g_t, g_meta = _optimizer_tensors("g_opt", state.g_opt)
    tensors.update(g_t)
    meta = {
        "kind": "checkpoint",
        "checkpoint_version": CHECKPOINT_VERSION,
        "stage": state.stage,
        "step": state.step,
        "config": state.config,
        "generator_config": to_dict(state.generator.cfg),
        "g_opt": g_meta,
        "rng": state.rng.bit_generator.state,
        "torch_rng": base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode("ascii"),
        "history": state.history,
    }
    if state.discriminator is not None:
        tensors.update({f"discriminator.{k}": v for k, v in state_tensors(state.discriminator).items()})
        d_t, d_meta = _optimizer_tensors("d_opt", state.d_opt)
        tensors.update(d_t)
        meta["discriminator_config"] = to_dict(state.discriminator.cfg)
        meta["d_opt"] = d_meta
    tensorfile.save(path, tensors, meta)


# schedule fields may change between runs so that training can be extended on resume
RESUMABLE_FIELDS = {"iterations", "epochs", "checkpoint_every"}


def _check_config(live: dict, saved: dict, where: str) -> None:
    for key, value in saved.items():
        if not where.startswith(("generator.", "discriminator.")) and key in RESUMABLE_FIELDS:
            continue
        if key not in live:
            raise ValueError(f"checkpoint field {where}{key} is not part of the live configuration")
        if isinstance(value, dict) and isinstance(live[key], dict):
            _check_config(live[key], value, f"{where}{key}.")
        elif live[key] != value:
            raise ValueError(f"checkpoint disagrees with the live configuration on {where}{key}: "
                             f"saved {value!r}, live {live[key]!r}")


def load_checkpoint(path, generator_cfg: GeneratorConfig | None = None,
                    discriminator_cfg: DiscriminatorConfig | None = None,
                    stage_cfg: PixelStageConfig | GanStageConfig | None = None) -> TrainState:
    """Restore a training state.  Any live config passed in must agree with the snapshot."""
    tensors, meta = tensorfile.load(path)
    if meta.get("kind") != "checkpoint":
        raise tensorfile.ContainerError(f"{path}: not a training checkpoint")
    if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise tensorfile.ContainerError(
            f"{path}: checkpoint version {meta.get('checkpoint_version')!r} is not supported (expected {CHECKPOINT_VERSION})")
    if generator_cfg is not None:
        _check_config(to_dict(generator_cfg), meta["generator_config"], "generator.")
    config = meta["config"]
    if stage_cfg is not None:
        _check_config(to_dict(stage_cfg), config, f"{meta['stage']}_stage.")
        config = to_dict(stage_cfg)
    gcfg = from_dict(GeneratorConfig, meta["generator_config"])
    gen = assign_state(build_generator(gcfg), _strip(tensors, "generator."), str(path))
    g_opt = make_adam(gen.parameters(), AdamConfig())
    _restore_optimizer(g_opt, "g_opt", tensors, meta["g_opt"])
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    torch_state = np.frombuffer(base64.b64decode(meta["torch_rng"]), dtype=np.uint8).copy()
    torch.set_rng_state(torch.from_numpy(torch_state))
    state = TrainState(meta["stage"], gen, g_opt, rng, config, step=int(meta["step"]),
                       history={k: list(v) for k, v in meta["history"].items()})
    if "discriminator_config" in meta:
        if discriminator_cfg is not None:
            _check_config(to_dict(discriminator_cfg), meta["discriminator_config"], "discriminator.")
        dcfg = from_dict(DiscriminatorConfig, meta["discriminator_config"])
        state.discriminator = assign_state(build_discriminator(dcfg), _strip(tensors, "discriminator."), str(path))
        state.d_opt = make_adam(state.discriminator.parameters(), AdamConfig())
        _restore_optimizer(state.d_opt, "d_opt", tensors, meta["d_opt"])
    return state


def _strip(tensors: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}


def write_history_csv(path, history: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = list(history)
    rows = zip(*(history[k] for k in keys))
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
