"""Per-fault detection rates on Tennessee Eastman CSV exports.

Expects CSVs with the columns faultNumber, simulationRun, sample, xmeas_1..41
and xmv_1..11 (one row per sample). Writes a table with one row per fault and
one ``mean (std)`` column per detector.

    python scripts/tep_table.py --train tep_train.csv --test tep_test.csv [--seeds 10] [--out runs/tep]
"""

import argparse
from dataclasses import replace
from pathlib import Path

from fewshot_tsad.config import ExperimentConfig
from fewshot_tsad.experiment import run_trials, write_report

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default=ROOT / "configs" / "tep.json")
    ap.add_argument("--train", nargs="+", required=True)
    ap.add_argument("--test", nargs="+", required=True)
    ap.add_argument("--seeds", type=int)
    ap.add_argument("--out", default="runs/tep")
    args = ap.parse_args()

    cfg = ExperimentConfig.load(args.config)
    cfg = replace(cfg, dataset=replace(cfg.dataset, train_csv=args.train, test_csv=args.test))
    if args.seeds:
        cfg = replace(cfg, seeds=list(range(args.seeds)))
    run_trials(cfg, out_dir=args.out)
    path = write_report([args.out], Path(args.out) / "table.csv")
    print(path.read_text(), end="")


if __name__ == "__main__":
    main()
