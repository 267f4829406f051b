"""Run the desk-scale bicubic / G_pix / G_feat / original comparison over several seeds.

    python scripts/desk_experiment.py --seeds 0 1 2 --out runs/desk_experiment
"""
import argparse
import logging
from pathlib import Path

import numpy as np

from srdiag.config import RunConfig
from srdiag.evaluation import VARIANT_ORDER, export_report
from srdiag.experiment import run_desk_pipeline
from srdiag.training import configure_runtime


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--per-class", type=int, default=60)
    ap.add_argument("--no-gan", action="store_true", help="skip the adversarial stage")
    ap.add_argument("--out", default="runs/desk_experiment")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    configure_runtime()

    out = Path(args.out)
    results = []
    for seed in args.seeds:
        r = run_desk_pipeline(RunConfig.desk(), out / f"seed{seed}", seed, per_class=args.per_class,
                              with_gan=not args.no_gan)
        export_report(r.table, out / f"seed{seed}" / "report")
        results.append(r)
        print(f"seed {seed}: " + ", ".join(f"{row.variant} {100 * row.accuracy:.1f}%" for row in r.table.rows)
              + f"  ({sum(r.timings.values()) / 60:.1f} min)")

    print(f"\n{'variant':>9} {'accuracy':>9} {'psnr':>9}")
    for v in VARIANT_ORDER:
        rows = [r.table.row(v) for r in results if any(x.variant == v for x in r.table.rows)]
        if not rows:
            continue
        acc = np.mean([x.accuracy for x in rows])
        psnr = "" if rows[0].mean_psnr is None else f"{np.mean([x.mean_psnr for x in rows]):7.2f} dB"
        print(f"{v:>9} {100 * acc:8.1f}% {psnr:>9}")


if __name__ == "__main__":
    main()
