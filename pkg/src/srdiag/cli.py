"""Command-line entry point: ``srdiag <command> [options]``.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from . import datasets, diagnosis, evaluation, imaging, training
from .config import RunConfig, load_run_config, merge, to_dict
from .experiment import component_seed, fit_classifier, seeded
from .losses import load_feature_extractor
from .models import build_discriminator, build_generator, load_model, save_model

log = logging.getLogger("srdiag")


class ConfigError(Exception):
    """Invalid configuration or arguments; reported with exit code 2."""


def _parse_set(values: list[str]) -> dict:
    out: dict = {}
    for item in values or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return out


def _run_config(args) -> RunConfig:
    try:
        cfg = load_run_config(args.config, args.preset)
        overrides = _parse_set(args.set)
        if getattr(args, "out", None):
            overrides["output_dir"] = str(args.out)
        if overrides:
            cfg = merge(cfg, overrides)
        cfg.validate()
        training.configure_runtime(args.threads, cfg.deterministic)
    except (ValueError, FileNotFoundError, TypeError, yaml.YAMLError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def _space_for(cfg: RunConfig) -> datasets.LabelSpace:
    if cfg.data.label_space == "manifest":
        header = datasets.read_manifest_header(cfg.data.manifest)
        if "classes" not in header:
            raise ConfigError(f"{cfg.data.manifest}: header has no 'classes' list")
        return datasets.LabelSpace(tuple(header["classes"]))
    try:
        return datasets.LabelSpace.preset(cfg.data.label_space)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _split(cfg: RunConfig, space: datasets.LabelSpace | None = None):
    manifest = Path(cfg.data.manifest)
    if not manifest.is_file():
        raise ConfigError(f"manifest not found: {manifest}")
    space = space or _space_for(cfg)
    if cfg.diagnosis.classes != space.size:
        cfg.diagnosis.classes = space.size
    try:
        entries = datasets.load_manifest(manifest, space)
    except datasets.ManifestError as exc:
        raise ConfigError(str(exc)) from None
    train, test = datasets.split(entries, cfg.data.train_fraction, component_seed(cfg.seed, "split", cfg.data.split_seed))
    return space, train, test


def cmd_synth(args) -> int:
    if args.classes < 2:
        raise ConfigError(f"--classes must be at least 2, got {args.classes}")
    if args.per_class < 1 or args.size < 1:
        raise ConfigError("--per-class and --size must be positive")
    entries = datasets.synth_corpus(args.out, args.per_class, args.classes, args.size, args.seed)
    print(f"wrote {len(entries)} images and {Path(args.out) / 'manifest.jsonl'}")
    return 0


def cmd_train_sr(args) -> int:
    cfg = seeded(_run_config(args))
    out = Path(cfg.output_dir)
    if args.stage == "gan":
        init = Path(args.init_weights) if args.init_weights else out / "g_pix.srt"
        if not args.resume and not init.is_file():
            raise ConfigError(
                f"the adversarial stage starts from a pixel-stage generator; run '--stage pixel' first "
                f"or pass --init-weights (looked for {init})")
    if args.resume and not Path(args.resume).is_file():
        raise ConfigError(f"checkpoint not found: {args.resume}")
    _, train, _ = _split(cfg)
    fx = None
    if args.stage == "gan":
        try:
            fx = load_feature_extractor(cfg.gan_stage.feature_extractor, cfg.gan_stage.feature_width)
        except (ValueError, FileNotFoundError) as exc:
            raise ConfigError(str(exc)) from None
    store = datasets.ImageStore()
    images = [store.get(e.path) for e in train]
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False))

    if args.stage == "pixel":
        ckpt = out / "pixel_checkpoint.srt"
        if args.resume:
            state = training.load_checkpoint(args.resume, cfg.generator, stage_cfg=cfg.pixel_stage)
        else:
            gen = build_generator(cfg.generator, component_seed(cfg.seed, "generator_init"))
            state = training.init_pixel_state(gen, cfg.pixel_stage)
        state = training.run_pixel_stage(state, images, cfg.pixel_stage, checkpoint_path=ckpt)
        training.save_checkpoint(ckpt, state)
        save_model(out / "g_pix.srt", state.generator, "generator", cfg.generator)
        training.write_history_csv(out / "pixel_history.csv", state.history)
        print(f"pixel stage finished at iteration {state.step}; generator written to {out / 'g_pix.srt'}")
        return 0

    ckpt = out / "gan_checkpoint.srt"
    if args.resume:
        state = training.load_checkpoint(args.resume, cfg.generator, cfg.discriminator, cfg.gan_stage)
    else:
        gen = load_model(init, "generator")
        if to_dict(gen.cfg) != to_dict(cfg.generator):
            raise ConfigError(f"{init}: generator architecture differs from the configured one")
        disc = build_discriminator(cfg.discriminator, component_seed(cfg.seed, "discriminator_init"))
        state = training.init_gan_state(gen, disc, cfg.gan_stage)
    state = training.run_gan_stage(state, images, cfg.gan_stage, fx, checkpoint_path=ckpt)
    training.save_checkpoint(ckpt, state)
    save_model(out / "g_feat.srt", state.generator, "generator", cfg.generator)
    save_model(out / "discriminator.srt", state.discriminator, "discriminator", cfg.discriminator)
    training.write_history_csv(out / "gan_history.csv", state.history)
    print(f"adversarial stage finished at epoch {state.step}; generator written to {out / 'g_feat.srt'}")
    return 0


def cmd_train_diag(args) -> int:
    cfg = seeded(_run_config(args))
    space, train, _ = _split(cfg)
    out = Path(cfg.output_dir)
    store = datasets.ImageStore()
    model, thresholds, history, val_acc = fit_classifier(cfg, space, train, store)
    out.mkdir(parents=True, exist_ok=True)
    diagnosis.save_classifier(out / "classifier.srt", model, space)
    diagnosis.save_thresholds(out / "thresholds.json", thresholds, space)
    training.write_history_csv(out / "classifier_history.csv",
                               {"epoch": list(range(1, len(history.loss) + 1)), "loss": history.loss})
    print(f"validation subset accuracy {val_acc:.4f}; wrote {out / 'classifier.srt'} and {out / 'thresholds.json'}")
    return 0


def _inputs(path: Path) -> list[Path]:
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.suffix.lower() == ".png")
    if path.is_file():
        return [path]
    raise ConfigError(f"input not found: {path}")


def cmd_restore(args) -> int:
    src = Path(args.input)
    files = _inputs(src)
    if args.method == "generator":
        if not args.model:
            raise ConfigError("--method generator needs --model")
        if not Path(args.model).is_file():
            raise ConfigError(f"model file not found: {args.model}")
        variant = evaluation.PipelineVariant("g_pix", load_model(args.model, "generator"))
    else:
        variant = evaluation.PipelineVariant("bicubic")
    out = Path(args.out)
    to_dir = src.is_dir() or out.suffix.lower() != ".png"
    for f in files:
        img = evaluation.restore(variant, imaging.read_png(f))
        imaging.write_png(out / f.name if to_dir else out, img)
    print(f"restored {len(files)} image(s) into {out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = seeded(_run_config(args))
    for flag, value in (("--classifier", args.classifier), ("--thresholds", args.thresholds),
                        ("--gpix", args.gpix), ("--gfeat", args.gfeat)):
        if value and not Path(value).is_file():
            raise ConfigError(f"{flag} file not found: {value}")
    clf, space = diagnosis.load_classifier(args.classifier)
    thresholds = diagnosis.load_thresholds(args.thresholds, space)
    _, _, test = _split(cfg, space)
    variants = [evaluation.PipelineVariant("bicubic"), evaluation.PipelineVariant("original")]
    if args.gpix:
        variants.append(evaluation.PipelineVariant("g_pix", load_model(args.gpix, "generator")))
    if args.gfeat:
        variants.append(evaluation.PipelineVariant("g_feat", load_model(args.gfeat, "generator")))
    items, skipped = evaluation.degrade_testset(test, cfg.evaluation.lr_size, cfg.generator.scale)
    table = evaluation.compare_pipelines(clf, thresholds, space, variants, items, keep=cfg.evaluation.contact_sheet_rows)
    table.errors.extend(skipped)
    written = evaluation.export_report(table, args.out or Path(cfg.output_dir) / "report", cfg.evaluation.contact_sheet_rows)
    for r in table.rows:
        psnr = "-" if r.mean_psnr is None else f"{r.mean_psnr:.2f} dB"
        print(f"{r.variant:9s} accuracy {100 * r.accuracy:6.2f}%  psnr {psnr:>9s}  n={r.n}")
    if table.errors:
        print(f"{len(table.errors)} item(s) skipped; see log")
    print(f"report written to {written['csv']}")
    return 0


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run config (sections: data, generator, discriminator, pixel_stage, "
                                     "gan_stage, diagnosis, evaluation); unset fields keep the preset values")
    p.add_argument("--preset", choices=("reference", "desk"), default="reference",
                   help="base values: 'reference' = full-scale protocol (23 RRDBs, crop 96/batch 64 pixel stage, "
                        "crop 192/batch 32 with lambda=5e-3, eta=1e-2 adversarial stage, batch 128 classifier); "
                        "'desk' = small CPU settings (default: reference)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config field, e.g. --set pixel_stage.iterations=200 (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="srdiag", description="Super-resolution pre-processing for multi-label "
                                     "leaf disease diagnosis: corpus synthesis, two-stage SR training, classifier "
                                     "training, restoration and the four-way comparison.")
    parser.add_argument("--threads", type=int, default=None,
                        help="torch worker threads (default: $SRDIAG_THREADS, else 1 in deterministic mode)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic texture corpus and manifest")
    p.add_argument("--out", required=True, help="corpus root; images go to <out>/<class>/<index>.png")
    p.add_argument("--classes", type=int, default=4, help="number of texture classes, >= 2 (default: 4)")
    p.add_argument("--per-class", type=int, default=100, help="images per class (default: 100)")
    p.add_argument("--size", type=int, default=224, help="image side in pixels (default: 224, the classifier input)")
    p.add_argument("--seed", type=int, default=0, help="corpus seed (default: 0)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-sr", help="train the generator (pixel stage) or fine-tune it adversarially (gan stage)")
    _add_config_flags(p)
    p.add_argument("--stage", choices=("pixel", "gan"), required=True,
                   help="'pixel': L1 pretraining; 'gan': perceptual + adversarial stage initialised from G_pix")
    p.add_argument("--resume", help="checkpoint file to continue from")
    p.add_argument("--init-weights", help="generator file to start the gan stage from "
                                          "(default: <output_dir>/g_pix.srt)")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.set_defaults(func=cmd_train_sr)

    p = sub.add_parser("train-diag", help="train the diagnosis classifier and tune per-class thresholds")
    _add_config_flags(p)
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.set_defaults(func=cmd_train_diag)

    p = sub.add_parser("restore", help="4x upscale PNG images")
    p.add_argument("--model", help="generator weights (required for --method generator)")
    p.add_argument("--in", dest="input", required=True, help="PNG file or directory of PNGs")
    p.add_argument("--out", required=True, help="output PNG file or directory")
    p.add_argument("--method", choices=("bicubic", "generator"), default="generator",
                   help="restoration method (default: generator)")
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("evaluate", help="degrade the test split to 56x56 and compare restorations")
    _add_config_flags(p)
    p.add_argument("--classifier", required=True, help="classifier weights from train-diag")
    p.add_argument("--thresholds", required=True, help="thresholds JSON from train-diag")
    p.add_argument("--gpix", help="pixel-stage generator weights (omit to skip the g_pix variant)")
    p.add_argument("--gfeat", help="adversarial-stage generator weights (omit to skip the g_feat variant)")
    p.add_argument("--out", help="report directory (default: <output_dir>/report)")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        training.configure_runtime(args.threads, deterministic=True)
        return args.func(args)
    except ConfigError as exc:
        print(f"srdiag {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"srdiag {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
