"""Trial orchestration: data preparation, training, calibration, evaluation, sweeps."""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ExperimentConfig
from .data import (
    HAI_TRAINING_ATTACKS,
    Normalizer,
    TimeSeriesFrame,
    WindowSet,
    concat_windows,
    fit_normalizer,
    load_csv,
    make_windows,
    select_few_positives,
    split_train_val,
    windows_from_frames,
)
from .errors import DataError
from .metrics import (
    EvalReport,
    ScoredSet,
    aggregate_trials,
    alarms,
    average_precision,
    far,
    fdr,
    roc_auc,
    threshold_at_far,
    write_summary_table,
)
from .models import DetectorVariant, HypersphereState, ModelParams, load_checkpoint, save_checkpoint, score_windows
from .synthgen import FAULT_NAMES, Scenario, make_benchmark
from .training import TrainSettings, TrainingLog, train_model

log = logging.getLogger(__name__)

THREADS_ENV = "FEWSHOT_TSAD_THREADS"
SWEEP_ALPHAS = (5.0, 1.0, 0.5, 0.1, 1e-2, 1e-3, 5e-4)


@dataclass
class PreparedData:
    train: WindowSet
    val: WindowSet
    test: WindowSet
    normalizer: Normalizer
    manifest: dict
    seen_fault_types: set | None = None


@dataclass
class TrialResult:
    params: ModelParams
    hypersphere: HypersphereState | None
    report: EvalReport
    log: TrainingLog
    best_params: ModelParams


@lru_cache(maxsize=16)
def _load_cached(paths: tuple, schema: str, sidecar, onset) -> tuple:
    frames = []
    for p in paths:
        frames += load_csv(p, schema, sidecar=sidecar, fault_onset=onset)
    return tuple(frames)


def _frames_source(config: ExperimentConfig, seed: int):
    """Returns (training frames, test frames, selection manifest, seen types)."""
    ds = config.dataset
    if ds.kind == "synthetic":
        scen = Scenario.from_json({"k_positives": config.k_positives, **ds.scenario})
        bench = make_benchmark(scen, seed)
        seen = {t for t, name in FAULT_NAMES.items() if name in scen.seen_faults}
        return list(bench.train), list(bench.test), bench.manifest, seen, set()

    train = list(_load_cached(tuple(ds.train_csv), ds.kind, ds.sidecar, ds.fault_onset))
    test = list(_load_cached(tuple(ds.test_csv), ds.kind, ds.sidecar, ds.fault_onset))
    if ds.kind == "hai":
        ids = ds.segment_ids if ds.segment_ids is not None else [a for a, *_ in HAI_TRAINING_ATTACKS]
        sel = select_few_positives(test, segment_ids=ids)
        manifest = {"train_segments": sel.segment_ids, "train_frames": [], "source": "test"}
        return train, test, manifest, None, set(sel.segment_ids)
    if ds.segment_ids is not None:
        sel = select_few_positives(train, segment_ids=ds.segment_ids)
    else:
        sel = select_few_positives(train, runs_per_fault=config.k_positives, seed=seed)
    normal = [f for f in train if not f.segments]
    chosen = set(sel.frame_names)
    picked = [f for f in train if f.name in chosen]
    manifest = {"train_segments": sel.segment_ids, "train_frames": sel.frame_names, "source": "train"}
    return normal + picked, test, manifest, None, set()


def prepare_data(config: ExperimentConfig, seed: int) -> PreparedData:
    train_frames, test_frames, manifest, seen, borrowed = _frames_source(config, seed)
    T = config.window
    if borrowed:
        # labeled anomalies taken from the test files: their windows train, the rest evaluates
        test_all = windows_from_frames(test_frames, T)
        in_sel = test_all.in_segments(borrowed)
        norm_frames = train_frames
        normalizer = fit_normalizer(norm_frames)
        train_w = concat_windows([
            windows_from_frames([normalizer.apply(f) for f in train_frames], T),
            _normalize_windows(test_all.subset(in_sel), normalizer),
        ])
        test_w = _normalize_windows(test_all.subset(~in_sel), normalizer)
    else:
        normalizer = fit_normalizer(train_frames)
        train_w = windows_from_frames([normalizer.apply(f) for f in train_frames], T)
        test_w = windows_from_frames([normalizer.apply(f) for f in test_frames], T)
        overlap = set(test_w.segment_ids[test_w.aoc_mask]) & set(manifest.get("train_segments", []))
        if overlap:
            raise DataError(f"training anomalies leak into evaluation: {sorted(overlap)[:3]}")
    tr, va = split_train_val(train_w, config.train_fraction, np.random.SeedSequence([seed, 1]).generate_state(1)[0])
    manifest = {**manifest, "normalizer": normalizer.to_json()}
    return PreparedData(tr, va, test_w, normalizer, manifest, seen)


def _normalize_windows(ws: WindowSet, nz: Normalizer) -> WindowSet:
    return replace(ws, inputs=nz.apply_array(ws.inputs), targets=nz.apply_array(ws.targets))


def settings_of(config: ExperimentConfig) -> TrainSettings:
    return TrainSettings(
        epochs=config.epochs, batch_size=config.batch_size, lr=config.lr, hidden=config.hidden,
        layers=config.layers, window=config.window, grad_clip=config.grad_clip,
    )


def evaluate(
    params: ModelParams,
    hypersphere: HypersphereState | None,
    data: PreparedData,
    target_far: float,
) -> dict:
    """Calibrate on validation normal windows, then score the test windows."""
    val_noc = data.val.subset(data.val.noc_mask) if data.val.noc_mask.any() else data.train.subset(data.train.noc_mask)
    val_scores = score_windows(params, val_noc.inputs, val_noc.targets, hypersphere)
    thr = threshold_at_far(val_scores, target_far)
    test = data.test
    scores = score_windows(params, test.inputs, test.targets, hypersphere)
    al = alarms(scores, thr)
    noc = test.noc_mask
    per_fault = {}
    per_auc = {}
    for ft in sorted(set(test.fault_types[test.aoc_mask].tolist())):
        m = test.fault_types == ft
        per_fault[str(ft)] = fdr(al, m)
        sel = noc | m
        per_auc[str(ft)] = roc_auc(ScoredSet(scores[sel], test.labels[sel]))
    out = {
        "threshold": thr,
        "far": far(al, noc),
        "far_val": far(alarms(val_scores, thr), np.ones(len(val_scores), bool)),
        "roc_auc": roc_auc(ScoredSet(scores, test.labels)),
        "ap": average_precision(ScoredSet(scores, test.labels)),
        "per_fault_fdr": per_fault,
        "per_fault_auc": per_auc,
        "group_auc": {},
    }
    if data.seen_fault_types is not None:
        seen_m = np.isin(test.fault_types, list(data.seen_fault_types)) & test.aoc_mask
        unseen_m = test.aoc_mask & ~seen_m
        for name, m in (("seen", seen_m), ("unseen", unseen_m)):
            if m.any():
                sel = noc | m
                out["group_auc"][name] = roc_auc(ScoredSet(scores[sel], test.labels[sel]))
    return out


def run_trial(
    config: ExperimentConfig,
    seed: int,
    variant: str | None = None,
    out_dir=None,
    data: PreparedData | None = None,
) -> TrialResult:
    """ingest -> normalize -> window -> split -> train -> calibrate -> evaluate -> persist."""
    variant = DetectorVariant(variant or config.variants[0])
    loss = config.loss_for(variant)
    if data is None:
        data = prepare_data(config, seed)
    res = train_model(variant, data.train, data.val, loss, settings_of(config), seed)
    ev = evaluate(res.params, res.hypersphere, data, config.target_far)
    report = EvalReport(
        variant=variant.value,
        trial_seed=int(seed),
        config_hash=config.hash,
        alpha=loss.alpha if variant in (DetectorVariant.MARGIN_AR, DetectorVariant.AUXILIARY_AR) else None,
        eta=loss.eta if variant is DetectorVariant.HYPERSPHERE else None,
        manifest={k: v for k, v in data.manifest.items() if k in ("train_segments", "train_frames")},
        **ev,
    )
    result = TrialResult(res.params, res.hypersphere, report, res.log, res.best_params)
    if out_dir is not None:
        persist_trial(result, config, data, out_dir)
    return result


def trial_dir(out_dir, variant: str, seed: int) -> Path:
    return Path(out_dir) / f"{variant}_seed{seed}"


def persist_trial(result: TrialResult, config: ExperimentConfig, data: PreparedData, out_dir) -> Path:
    d = trial_dir(out_dir, result.report.variant, result.report.trial_seed)
    d.mkdir(parents=True, exist_ok=True)
    extra = {"manifest": data.manifest, "normalizer": data.normalizer.to_json()}
    save_checkpoint(d / "model", result.params, result.hypersphere, config.hash, extra)
    save_checkpoint(d / "model_best_val", result.best_params, result.hypersphere, config.hash, extra)
    (d / "report.json").write_text(result.report.to_json())
    (d / "manifest.json").write_text(json.dumps({"config_hash": config.hash, **data.manifest}, indent=2, sort_keys=True))
    (d / "config.json").write_text(config.to_json())
    result.log.write(d, config.hash)
    return d


def _trial_job(args):
    cfg_dict, seed, variant, out_dir = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    return run_trial(cfg, seed, variant, out_dir).report


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def run_trials(config: ExperimentConfig, variants: Sequence[str] | None = None, seeds=None, out_dir=None) -> list[EvalReport]:
    """Every (variant, seed) pair. Trials are independent; up to
    ``$FEWSHOT_TSAD_THREADS`` run in parallel worker processes."""
    variants = list(variants or config.variants)
    seeds = list(config.seeds if seeds is None else seeds)
    jobs = [(v, s) for s in seeds for v in variants]
    workers = min(max_workers(), len(jobs))
    if workers <= 1:
        reports = []
        for s in seeds:
            data = prepare_data(config, s)
            for v in variants:
                reports.append(run_trial(config, s, v, out_dir, data=data).report)
        return reports
    d = config.to_dict()
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_trial_job, [(d, s, v, out_dir) for v, s in jobs]))


def run_sweep(
    config: ExperimentConfig,
    alpha_values: Sequence[float] = SWEEP_ALPHAS,
    variants: Sequence[str] | None = None,
    seeds=None,
    out_dir=None,
) -> list[dict]:
    """Sensitivity table: one aggregated row per (variant, weight).

    The weight is ``alpha`` for the AR variants and ``eta`` for the
    hypersphere baseline.
    """
    variants = [DetectorVariant(v) for v in (variants or config.variants)]
    seeds = list(config.seeds if seeds is None else seeds)
    rows = []
    cache: dict[int, PreparedData] = {}
    for v in variants:
        if v is DetectorVariant.NORMAL_AR:
            weights = [None]
        else:
            weights = list(alpha_values)
        for w in weights:
            over = {} if w is None else ({"eta": w} if v is DetectorVariant.HYPERSPHERE else {"alpha": w})
            cfg = replace(config, variant_loss={**config.variant_loss, v.value: {**config.variant_loss.get(v.value, {}), **over}})
            reports = []
            for s in seeds:
                if s not in cache:
                    cache[s] = prepare_data(config, s)
                sub = None if out_dir is None else Path(out_dir) / f"{v.value}_w{w}"
                reports.append(run_trial(cfg, s, v.value, sub, data=cache[s]).report)
            summ = aggregate_trials(reports)
            row = {"variant": v.value, "weight": w, "n_seeds": len(seeds)}
            for key in ("roc_auc", "ap", "avg_fdr"):
                if key in summ:
                    row[f"{key}_mean"] = summ[key]["mean"]
                    row[f"{key}_std"] = summ[key]["std"]
            row["roc_auc_values"] = [r.roc_auc for r in reports]
            rows.append(row)
    if out_dir is not None:
        write_sweep(rows, out_dir)
    return rows


def write_sweep(rows: list[dict], out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cols = [c for c in rows[0] if c != "roc_auc_values"]
    for r in rows:
        for c in r:
            if c not in cols and c != "roc_auc_values":
                cols.append(c)
    with (out / "sweep.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    # one series per variant: x = weight, y = mean AUC, err = std
    series = {}
    for r in rows:
        series.setdefault(r["variant"], []).append(
            {"weight": r["weight"], "roc_auc_mean": r.get("roc_auc_mean"), "roc_auc_std": r.get("roc_auc_std")}
        )
    (out / "sweep_series.json").write_text(json.dumps(series, indent=2, sort_keys=True))
    return out / "sweep.csv"


def score_stream(checkpoint, frame: TimeSeriesFrame, threshold: float | None = None):
    """Per-timestep scores for one raw frame. The first ``T`` steps get NaN
    and are flagged unscored; alarms use ``threshold`` when given."""
    params, hs, side = load_checkpoint(checkpoint)
    if frame.n != params.n:
        raise DataError(f"checkpoint expects {params.n} channels, frame {frame.name} has {frame.n}")
    if "normalizer" in side:
        frame = Normalizer.from_json(side["normalizer"]).apply(frame)
    L, T = len(frame), params.window
    scores = np.full(L, np.nan)
    scored = np.zeros(L, dtype=bool)
    if L > T:
        ws = make_windows(frame, T)
        scores[T:] = score_windows(params, ws.inputs, ws.targets, hs)
        scored[T:] = True
    al = None
    if threshold is not None:
        al = np.zeros(L, dtype=bool)
        al[scored] = scores[scored] > threshold
    return scores, scored, al


def collect_reports(dirs: Sequence) -> dict[str, list[EvalReport]]:
    """Gather ``report.json`` files below the given directories, keyed by variant."""
    found: dict[str, list[EvalReport]] = {}
    for d in dirs:
        for p in sorted(Path(d).rglob("report.json")):
            r = EvalReport.from_json(p.read_text())
            found.setdefault(r.variant, []).append(r)
    return found


def write_report(dirs: Sequence, out_csv) -> Path:
    groups = collect_reports(dirs)
    if not groups:
        raise DataError(f"no report.json found under {list(map(str, dirs))}")
    order = [v.value for v in DetectorVariant if v.value in groups]
    summaries = {v: aggregate_trials(groups[v]) for v in order}
    return write_summary_table(summaries, out_csv)
