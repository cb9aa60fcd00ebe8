"""Loss-weight sensitivity on the synthetic benchmark.

For each variant, trains at every weight in the grid (alpha for the AR
variants, eta for the hypersphere baseline) and reports the AUC spread
inside alpha in [0.5, 1] against the spread over the whole grid.

    python scripts/alpha_sweep.py [--seeds 3] [--variant margin_ar ...] [--out runs/sweep]
"""

import argparse
from dataclasses import replace
from pathlib import Path

from fewshot_tsad.config import ExperimentConfig
from fewshot_tsad.experiment import SWEEP_ALPHAS, run_sweep

ROOT = Path(__file__).resolve().parents[1]


def spread(rows, keep=lambda w: True):
    vals = [r["roc_auc_mean"] for r in rows if keep(r["weight"])]
    return max(vals) - min(vals) if vals else float("nan")


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default=ROOT / "configs" / "synthetic_desk.json")
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--variant", action="append", help="default: margin_ar, auxiliary_ar, hypersphere")
    ap.add_argument("--values", type=float, nargs="+", default=list(SWEEP_ALPHAS))
    ap.add_argument("--out", default="runs/sweep")
    args = ap.parse_args()

    cfg = replace(ExperimentConfig.load(args.config), seeds=list(range(args.seeds)))
    variants = args.variant or ["margin_ar", "auxiliary_ar", "hypersphere"]
    rows = run_sweep(cfg, args.values, variants=variants, out_dir=args.out)
    for v in variants:
        mine = [r for r in rows if r["variant"] == v]
        for r in mine:
            print(f"{v:<14} weight={r['weight']:<8g} auc {r['roc_auc_mean']:.4f} ({r['roc_auc_std']:.4f})")
        inside = spread(mine, lambda w: 0.5 <= w <= 1.0)
        print(f"{v:<14} spread in [0.5, 1]: {inside:.4f}, over the grid: {spread(mine):.4f}")
    print("table:", Path(args.out) / "sweep.csv")


if __name__ == "__main__":
    main()
