"""Alarm-rate and ranking metrics.

An alarm is raised when ``score > threshold`` (strict). Thresholds are
nearest-rank quantiles of normal scores.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import DataError


@dataclass
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray
    fault_types: np.ndarray | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels).astype(np.int8).ravel()
        if self.scores.shape != self.labels.shape:
            raise DataError(f"{self.scores.size} scores but {self.labels.size} labels")
        if self.fault_types is not None:
            self.fault_types = np.asarray(self.fault_types).ravel()
            if self.fault_types.shape != self.labels.shape:
                raise DataError("fault_types must align with labels")
        if not np.all(np.isfinite(self.scores)):
            raise DataError("scores must be finite")


@dataclass
class EvalReport:
    variant: str
    trial_seed: int
    threshold: float
    far: float
    far_val: float
    roc_auc: float
    ap: float
    per_fault_fdr: dict = field(default_factory=dict)
    per_fault_auc: dict = field(default_factory=dict)
    group_auc: dict = field(default_factory=dict)
    config_hash: str = ""
    alpha: float | None = None
    eta: float | None = None
    manifest: dict = field(default_factory=dict)

    @property
    def avg_fdr(self) -> float:
        v = list(self.per_fault_fdr.values())
        return float(np.mean(v)) if v else float("nan")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def threshold_at_far(noc_scores, target_far: float = 0.05) -> float:
    """Smallest threshold whose false-alarm fraction on ``noc_scores`` is at most ``target_far``."""
    s = np.sort(np.asarray(noc_scores, dtype=np.float64).ravel())
    if s.size == 0:
        raise DataError("need at least one normal score")
    if not 0 <= target_far <= 1:
        raise DataError("target_far must lie in [0, 1]")
    k = math.ceil(round((1.0 - target_far) * s.size, 9))
    return float(s[max(k, 1) - 1])


def alarms(scores, threshold: float) -> np.ndarray:
    return np.asarray(scores) > threshold


def _rate(alarm, mask, what: str) -> float:
    a = np.asarray(alarm, dtype=bool)
    m = np.asarray(mask, dtype=bool)
    if a.shape != m.shape:
        raise DataError("alarms and mask must align")
    total = int(m.sum())
    if total == 0:
        raise DataError(f"no samples in the {what} region")
    return int(a[m].sum()) / total


def fdr(alarm, faulty_mask) -> float:
    """Alarms in the faulty region over samples in the faulty region."""
    return _rate(alarm, faulty_mask, "faulty")


def far(alarm, noc_mask) -> float:
    """Alarms among normal samples over the number of normal samples."""
    return _rate(alarm, noc_mask, "normal")


def roc_auc(scored: ScoredSet) -> float:
    """Mann-Whitney estimate P(s+ > s-) + P(s+ = s-)/2 via mid-ranks."""
    pos = scored.labels == 1
    n_pos = int(pos.sum())
    n_neg = scored.labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("ROC AUC needs both classes")
    ranks = rankdata(scored.scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scored: ScoredSet) -> float:
    """Step-wise area under the precision-recall curve.

    Tied scores form one threshold step, so the value does not depend on how
    ties are ordered.
    """
    y = scored.labels
    n_pos = int(y.sum())
    if n_pos == 0:
        raise DataError("average precision needs at least one positive")
    order = np.argsort(-scored.scores, kind="stable")
    s = scored.scores[order]
    yy = y[order].astype(np.float64)
    tp = np.cumsum(yy)
    # last index of each tie group in descending order
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp_end = tp[ends]
    precision = tp_end / (ends + 1)
    gained = np.diff(np.r_[0.0, tp_end])
    return float(np.sum(gained * precision) / n_pos)


def aggregate_trials(reports: Sequence[EvalReport]) -> dict:
    """Per-metric mean and sample (N-1) standard deviation across trials."""
    if not reports:
        raise DataError("need at least one report")
    table: dict[str, list[float]] = {}

    def add(key, v):
        table.setdefault(key, []).append(float(v))

    for r in reports:
        for k in ("roc_auc", "ap", "far", "far_val", "threshold"):
            add(k, getattr(r, k))
        if r.per_fault_fdr:
            add("avg_fdr", r.avg_fdr)
        for ft, v in r.per_fault_fdr.items():
            add(f"fdr/{ft}", v)
        for g, v in r.group_auc.items():
            add(f"auc/{g}", v)
    return {k: summarize(v) for k, v in table.items()}


def summarize(values: Sequence[float]) -> dict:
    v = np.asarray(values, dtype=np.float64)
    single = v.size < 2
    return {
        "mean": float(v.mean()),
        "std": 0.0 if single else float(v.std(ddof=1)),
        "n": int(v.size),
        "single_trial": single,
    }


def write_summary_table(summaries: Mapping[str, dict], path, rows: Sequence[str] | None = None) -> Path:
    """CSV with one row per metric (``fdr/<fault>`` rows first) and one
    ``mean (std)`` column per method."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    methods = list(summaries)
    if rows is None:
        keys = sorted({k for s in summaries.values() for k in s})
        fdr_rows = sorted((k for k in keys if k.startswith("fdr/")), key=lambda k: _natural(k[4:]))
        rows = fdr_rows + [k for k in ("avg_fdr", "far", "far_val", "roc_auc", "ap") if k in keys]
        rows += [k for k in keys if k.startswith("auc/")]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", *methods])
        for key in rows:
            cells = []
            for m in methods:
                s = summaries[m].get(key)
                cells.append("" if s is None else f"{s['mean']:.4f} ({s['std']:.4f})")
            w.writerow([key, *cells])
    return path


def _natural(s: str):
    return (0, int(s)) if s.lstrip("-").isdigit() else (1, s)
