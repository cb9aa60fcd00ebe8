"""Command line entry point.

    fewshot-tsad synth  --config cfg.json --seed 0 --out bench/
    fewshot-tsad train  --config cfg.json --variant margin_ar --seeds 5 --out runs/
    fewshot-tsad eval   --checkpoint runs/margin_ar_seed0/model.json --data test.csv --out scores.csv
    fewshot-tsad sweep  --config cfg.json --variant auxiliary_ar --seeds 3 --out sweep/
    fewshot-tsad report runs/ --out table.csv

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import ExperimentConfig
from .data import load_csv
from .errors import ConfigError, FewShotTSADError
from .experiment import SWEEP_ALPHAS, run_sweep, run_trials, score_stream, write_report
from .metrics import aggregate_trials
from .models import DetectorVariant
from .synthgen import Scenario, make_benchmark, write_benchmark

log = logging.getLogger("fewshot_tsad")


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    changes = {}
    if getattr(args, "seeds", None) is not None:
        if args.seeds <= 0:
            raise ConfigError("--seeds must be positive")
        changes["seeds"] = list(range(args.seeds))
    if getattr(args, "seed", None) is not None:
        changes["seeds"] = [args.seed]
    if getattr(args, "variant", None):
        changes["variants"] = [_variant(v) for v in args.variant]
    if getattr(args, "out", None):
        changes["out_dir"] = args.out
    if changes:
        cfg = replace(cfg, **changes)
    alpha = getattr(args, "alpha", None)
    if alpha is not None:
        over = dict(cfg.variant_loss)
        for v in cfg.variants:
            key = "eta" if v == DetectorVariant.HYPERSPHERE.value else "alpha"
            over[v] = {**over.get(v, {}), key: alpha}
        cfg = replace(cfg, variant_loss=over)
    cfg.validate()
    return cfg


def _variant(name: str) -> str:
    try:
        return DetectorVariant(name).value
    except ValueError:
        choices = ", ".join(v.value for v in DetectorVariant)
        raise ConfigError(f"unknown variant {name!r} (choose from {choices})") from None


def cmd_synth(args) -> None:
    cfg = _config(args)
    if cfg.dataset.kind != "synthetic":
        raise ConfigError("synth needs a synthetic dataset config")
    scen = Scenario.from_json({"k_positives": cfg.k_positives, **cfg.dataset.scenario})
    seed = cfg.seeds[0]
    paths = write_benchmark(make_benchmark(scen, seed), cfg.out_dir)
    print(json.dumps(paths, indent=2))


def cmd_train(args) -> None:
    cfg = _config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    reports = run_trials(cfg, out_dir=out)
    by_variant: dict[str, list] = {}
    for r in reports:
        by_variant.setdefault(r.variant, []).append(r)
        print(f"{r.variant} seed={r.trial_seed} auc={r.roc_auc:.4f} ap={r.ap:.4f} far={r.far:.4f} avg_fdr={r.avg_fdr:.4f}")
    for v, rs in by_variant.items():
        s = aggregate_trials(rs)["roc_auc"]
        print(f"{v}: roc_auc {s['mean']:.4f} ({s['std']:.4f}) over {s['n']} seed(s)")


def cmd_eval(args) -> None:
    frames = load_csv(args.data, args.schema, sidecar=args.sidecar)
    out = Path(args.out) if args.out else None
    rows = []
    for fr in frames:
        scores, scored, al = score_stream(args.checkpoint, fr, args.threshold)
        for t in range(len(fr)):
            rows.append({
                "frame": fr.name,
                "t": t,
                "score": "" if not scored[t] else repr(float(scores[t])),
                "scored": int(scored[t]),
                "alarm": "" if al is None else int(al[t]),
                "label": int(fr.labels[t]),
            })
    fh = out.open("w", newline="") if out else sys.stdout
    try:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["frame", "t", "score", "scored", "alarm", "label"])
        w.writeheader()
        w.writerows(rows)
    finally:
        if out:
            fh.close()
    if out:
        n_alarm = sum(1 for r in rows if r["alarm"] == 1)
        print(f"scored {sum(r['scored'] for r in rows)} steps in {len(frames)} frame(s), {n_alarm} alarm(s) -> {out}")


def cmd_sweep(args) -> None:
    cfg = _config(_without_alpha(args))
    values = args.values or list(SWEEP_ALPHAS)
    rows = run_sweep(cfg, values, out_dir=cfg.out_dir)
    for r in rows:
        print(f"{r['variant']} weight={r['weight']} auc={r.get('roc_auc_mean', float('nan')):.4f} ({r.get('roc_auc_std', float('nan')):.4f})")


def _without_alpha(args):
    # the sweep sets the weight itself
    ns = argparse.Namespace(**vars(args))
    ns.alpha = None
    return ns


def cmd_report(args) -> None:
    path = write_report(args.dirs, args.out)
    print(path.read_text(), end="")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fewshot-tsad", description="Few-label time-series anomaly detection experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, variant=True, alpha=True):
        sp.add_argument("--config", help="experiment config (JSON)")
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--seed", type=int, help="run a single seed")
        g.add_argument("--seeds", type=int, help="run seeds 0..N-1")
        if variant:
            sp.add_argument("--variant", action="append", help="detector variant (repeatable)")
        if alpha:
            sp.add_argument("--alpha", type=float, help="loss weight (alpha, or eta for the hypersphere)")
        sp.add_argument("--out", help="output directory")

    s = sub.add_parser("synth", help="write a synthetic benchmark as CSV")
    common(s, variant=False, alpha=False)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train and evaluate detectors")
    common(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a CSV file with a saved checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--schema", default="generic", choices=["generic", "tep", "hai"])
    s.add_argument("--sidecar")
    s.add_argument("--threshold", type=float)
    s.add_argument("--out", help="output CSV (stdout when omitted)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="loss-weight sensitivity sweep")
    common(s)
    s.add_argument("--values", type=float, nargs="+", help="weights to sweep")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("report", help="aggregate report.json files into a summary CSV")
    s.add_argument("dirs", nargs="+")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except FewShotTSADError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except FloatingPointError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
