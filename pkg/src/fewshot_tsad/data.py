"""Frames, CSV ingestion, normalization, windowing, splitting and batching."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError, ShapeError

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-8

TEP_FEATURES = [f"xmeas_{k}" for k in range(1, 42)] + [f"xmv_{k}" for k in range(1, 12)]
TEP_META = ["faultNumber", "simulationRun", "sample"]
# onset of the fault inside a run, keyed by run length (3-minute sampling)
TEP_ONSET_BY_LENGTH = {960: 160, 500: 20}

HAI_TIME_COLUMN = "time"
HAI_ATTACK_COLUMNS = ["attack", "attack_P1", "attack_P2", "attack_P3"]
HAI_N_FEATURES = 59

# (attack id, process, start time, duration in seconds) of the nine HAI 20.07
# attacks used as labeled training anomalies
HAI_TRAINING_ATTACKS = [
    ("A101", "P1", "2019-10-29 13:40", 370),
    ("A102", "P1", "2019-10-29 14:35", 312),
    ("A103", "P1", "2019-10-29 15:45", 868),
    ("A110", "P2", "2019-10-30 14:30", 370),
    ("A113", "P2", "2019-10-31 08:42", 348),
    ("A116", "P2", "2019-10-31 13:25", 368),
    ("A112", "P3", "2019-10-30 16:33", 154),
    ("A111", "P3", "2019-10-30 15:35", 180),
    ("A203", "P3", "2019-11-01 11:23", 180),
]


@dataclass
class Segment:
    start: int
    end: int  # exclusive
    fault_type: int
    segment_id: str


@dataclass
class TimeSeriesFrame:
    name: str
    values: np.ndarray
    labels: np.ndarray
    segments: list[Segment] = field(default_factory=list)
    sample_period: float = 1.0
    channels: list[str] | None = None
    timestamps: list[str] | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if self.values.ndim != 2:
            raise ShapeError(f"frame {self.name}: values must be (L, n), got {self.values.shape}")
        L = len(self.values)
        if self.labels.shape != (L,):
            raise ShapeError(f"frame {self.name}: {len(self.labels)} labels for {L} rows")
        if self.channels is not None and len(self.channels) != self.values.shape[1]:
            raise ShapeError(f"frame {self.name}: {len(self.channels)} channel names for {self.values.shape[1]} columns")
        expected = np.zeros(L, dtype=np.int8)
        last_end = 0
        for seg in sorted(self.segments, key=lambda s: s.start):
            if not (0 <= seg.start < seg.end <= L):
                raise DataError(f"frame {self.name}: segment {seg.segment_id} [{seg.start}, {seg.end}) out of bounds")
            if seg.start < last_end:
                raise DataError(f"frame {self.name}: segment {seg.segment_id} overlaps its predecessor")
            last_end = seg.end
            expected[seg.start:seg.end] = 1
        if not np.array_equal(expected, self.labels):
            raise DataError(f"frame {self.name}: labels disagree with segment metadata")

    @property
    def n(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return len(self.values)

    def equals(self, other: "TimeSeriesFrame") -> bool:
        return (
            self.name == other.name
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.labels, other.labels)
            and self.segments == other.segments
            and self.sample_period == other.sample_period
        )


def segments_from_labels(name: str, labels: np.ndarray, fault_types: np.ndarray | None = None) -> list[Segment]:
    """Contiguous runs of label 1, numbered ``<name>#k``."""
    y = np.asarray(labels).astype(np.int8)
    padded = np.concatenate([[0], y, [0]])
    edges = np.flatnonzero(np.diff(padded))
    segs = []
    for k, (s, e) in enumerate(zip(edges[::2], edges[1::2])):
        ft = int(fault_types[s]) if fault_types is not None else 1
        segs.append(Segment(int(s), int(e), ft, f"{name}#{k}"))
    return segs


# -- CSV ingestion -----------------------------------------------------------

def _read_table(path: Path, sep: str | None = None) -> pd.DataFrame:
    if not path.exists():
        raise DataError(f"{path}: file not found")
    if sep is None:
        with path.open() as fh:
            head = fh.readline()
        sep = ";" if head.count(";") > head.count(",") else ","
    try:
        return pd.read_csv(path, sep=sep, dtype=str, keep_default_na=False)
    except pd.errors.ParserError as exc:
        raise DataError(f"{path}: malformed CSV ({exc})") from exc


def _numeric(df: pd.DataFrame, columns: Sequence[str], path: Path) -> np.ndarray:
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise DataError(f"{path}: missing columns {missing[:5]}{'...' if len(missing) > 5 else ''}")
    out = np.empty((len(df), len(columns)))
    for j, col in enumerate(columns):
        raw = df[col]
        try:
            # Python's float() parser is correctly rounded, unlike pandas' fast path
            out[:, j] = np.array([float(s) for s in raw], dtype=np.float64)
        except ValueError:
            bad = pd.to_numeric(raw.str.strip(), errors="coerce").isna().to_numpy()
            row = int(np.flatnonzero(bad)[0])
            # +2: header line plus 1-based numbering
            raise DataError(
                f"{path}: line {row + 2}, column {col!r}: cannot parse {raw.iloc[row]!r} as a number"
            ) from None
    if not np.all(np.isfinite(out)):
        r, c = np.argwhere(~np.isfinite(out))[0]
        raise DataError(f"{path}: line {r + 2}, column {columns[c]!r}: non-finite value")
    return out


def _check_ragged(path: Path, sep: str | None = None) -> None:
    with path.open(newline="") as fh:
        first = fh.readline()
        if sep is None:
            sep = ";" if first.count(";") > first.count(",") else ","
        fh.seek(0)
        reader = csv.reader(fh, delimiter=sep)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file, header row required")
        for lineno, row in enumerate(reader, start=2):
            if row and len(row) != len(header):
                raise DataError(f"{path}: line {lineno} has {len(row)} fields, header has {len(header)}")


def load_csv(path, schema: str = "generic", sidecar=None, fault_onset: int | None = None) -> list[TimeSeriesFrame]:
    """Read a CSV into frames.

    ``schema`` is ``"tep"``, ``"hai"`` or ``"generic"``. TEP files carry the
    ``faultNumber, simulationRun, sample`` columns plus 52 process columns and
    yield one frame per run. HAI files yield one frame per file with labels
    from the attack columns. Generic files need a JSON sidecar (by default
    ``<file>.schema.json``).
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    _check_ragged(path)
    if schema == "tep":
        return _load_tep(path, fault_onset)
    if schema == "hai":
        return _load_hai(path)
    if schema == "generic":
        return _load_generic(path, sidecar)
    raise DataError(f"unknown schema {schema!r}")


def _load_tep(path: Path, fault_onset: int | None) -> list[TimeSeriesFrame]:
    df = _read_table(path)
    meta = _numeric(df, TEP_META, path).astype(np.int64)
    values = _numeric(df, TEP_FEATURES, path)
    frames = []
    keys = meta[:, :2]
    order = np.lexsort((meta[:, 2], keys[:, 1], keys[:, 0]))
    meta, values = meta[order], values[order]
    change = np.flatnonzero(np.any(np.diff(meta[:, :2], axis=0) != 0, axis=1)) + 1
    for lo, hi in zip(np.r_[0, change], np.r_[change, len(meta)]):
        fault, run = int(meta[lo, 0]), int(meta[lo, 1])
        L = hi - lo
        name = f"tep_f{fault:02d}_r{run}"
        labels = np.zeros(L, dtype=np.int8)
        segs = []
        if fault != 0:
            onset = fault_onset if fault_onset is not None else TEP_ONSET_BY_LENGTH.get(L)
            if onset is None:
                raise DataError(f"{path}: run {name} has length {L}; pass fault_onset explicitly")
            if onset < L:
                labels[onset:] = 1
                segs = [Segment(onset, L, fault, f"{name}#0")]
        frames.append(TimeSeriesFrame(name, values[lo:hi], labels, segs, 180.0, list(TEP_FEATURES)))
    return frames


def _load_hai(path: Path, n_features: int | None = HAI_N_FEATURES) -> list[TimeSeriesFrame]:
    df = _read_table(path)
    time_col = next((c for c in df.columns if c.strip().lower() in ("time", "timestamp")), None)
    if time_col is None:
        raise DataError(f"{path}: missing timestamp column")
    attack_cols = [c for c in df.columns if c.strip().lower().startswith("attack")]
    features = [c for c in df.columns if c != time_col and c not in attack_cols]
    if n_features is not None and len(features) != n_features:
        raise DataError(f"{path}: expected {n_features} feature columns, found {len(features)}")
    values = _numeric(df, features, path)
    stamps = pd.to_datetime(df[time_col].str.strip(), errors="coerce")
    if stamps.isna().any():
        row = int(np.flatnonzero(stamps.isna().to_numpy())[0])
        raise DataError(f"{path}: line {row + 2}, column {time_col!r}: bad timestamp")
    period = float(np.median(np.diff(stamps.to_numpy()).astype("timedelta64[ms]").astype(float)) / 1000.0) if len(df) > 1 else 1.0
    name = path.stem
    L = len(df)
    labels = np.zeros(L, dtype=np.int8)
    process = np.zeros(L, dtype=np.int64)
    if attack_cols:
        att = _numeric(df, attack_cols, path) != 0
        labels = att.any(axis=1).astype(np.int8)
        for k in (3, 2, 1):
            col = f"attack_P{k}"
            if col in attack_cols:
                process[att[:, attack_cols.index(col)]] = k
    stamp_str = stamps.dt.strftime("%Y-%m-%d %H:%M:%S").tolist()
    segs = []
    for s in segments_from_labels(name, labels, process):
        segs.append(Segment(s.start, s.end, s.fault_type, f"{name}@{stamp_str[s.start]}"))
    return [TimeSeriesFrame(name, values, labels, segs, period, features, stamp_str)]


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".schema.json")


def _load_generic(path: Path, sidecar) -> list[TimeSeriesFrame]:
    side_path = Path(sidecar) if sidecar is not None else _sidecar_path(path)
    if not side_path.exists():
        raise DataError(f"{path}: generic schema needs a sidecar at {side_path}")
    schema = json.loads(side_path.read_text())
    channels = schema.get("channels")
    if not channels:
        raise DataError(f"{side_path}: 'channels' must list the feature columns")
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    values = _numeric(df, channels, path)
    period = float(schema.get("sample_period_s", 1.0))
    lab_col = schema.get("label_column")
    ft_col = schema.get("fault_type_column")
    frame_col = schema.get("frame_column")
    labels = _numeric(df, [lab_col], path)[:, 0].astype(np.int8) if lab_col else np.zeros(len(df), np.int8)
    if np.any((labels != 0) & (labels != 1)):
        raise DataError(f"{path}: column {lab_col!r} must hold 0/1 labels")
    fts = _numeric(df, [ft_col], path)[:, 0].astype(np.int64) if ft_col else None
    if frame_col:
        if frame_col not in df.columns:
            raise DataError(f"{path}: missing frame column {frame_col!r}")
        names = df[frame_col].to_numpy()
        bounds = np.flatnonzero(names[1:] != names[:-1]) + 1
        groups = list(zip(np.r_[0, bounds], np.r_[bounds, len(df)]))
    else:
        names = np.full(len(df), path.stem, dtype=object)
        groups = [(0, len(df))]
    frames = []
    for lo, hi in groups:
        name = str(names[lo])
        y = labels[lo:hi]
        segs = segments_from_labels(name, y, None if fts is None else fts[lo:hi])
        frames.append(TimeSeriesFrame(name, values[lo:hi], y, segs, period, list(channels)))
    return frames


def write_csv(path, frames: Sequence[TimeSeriesFrame], channels: Sequence[str] | None = None) -> Path:
    """Write frames in the generic format plus the ``.schema.json`` sidecar.

    Floats are written with ``repr`` so values survive a round trip exactly.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not frames:
        raise DataError("nothing to write")
    n = frames[0].n
    channels = list(channels or frames[0].channels or [f"x{k}" for k in range(n)])
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", *channels, "label", "fault_type"])
        for fr in frames:
            ft = np.zeros(len(fr), dtype=np.int64)
            for s in fr.segments:
                ft[s.start:s.end] = s.fault_type
            for t in range(len(fr)):
                w.writerow([fr.name, *map(repr, fr.values[t].tolist()), int(fr.labels[t]), int(ft[t])])
    side = {
        "channels": channels,
        "label_column": "label",
        "fault_type_column": "fault_type",
        "frame_column": "frame",
        "sample_period_s": frames[0].sample_period,
    }
    _sidecar_path(path).write_text(json.dumps(side, indent=2))
    return path


# -- few-positive selection ----------------------------------------------------

@dataclass
class Selection:
    """Labeled anomaly segments moved into training."""

    segment_ids: list[str]
    frame_names: list[str]

    def to_json(self) -> dict:
        return {"segment_ids": list(self.segment_ids), "frame_names": list(self.frame_names)}


def resolve_hai_attack_ids(frames: Sequence[TimeSeriesFrame], attack_ids: Sequence[str]) -> list[str]:
    """Map HAI attack ids such as ``A101`` to segment ids by start minute."""
    table = {a: start for a, _, start, _ in HAI_TRAINING_ATTACKS}
    found = []
    for aid in attack_ids:
        if aid not in table:
            raise DataError(f"unknown HAI attack id {aid!r}")
        minute = pd.Timestamp(table[aid]).strftime("%Y-%m-%d %H:%M")
        hits = [
            s.segment_id
            for fr in frames if fr.timestamps is not None
            for s in fr.segments if fr.timestamps[s.start][:16] == minute
        ]
        if len(hits) != 1:
            raise DataError(f"HAI attack {aid} matched {len(hits)} segments starting at {minute}")
        found.append(hits[0])
    return found


def select_few_positives(
    frames: Sequence[TimeSeriesFrame],
    runs_per_fault: int | None = None,
    segment_ids: Sequence[str] | None = None,
    seed: int = 0,
) -> Selection:
    """Pick the labeled anomalies available for training.

    Either ``runs_per_fault`` faulty frames per fault type (drawn with
    ``seed``), or an explicit list of segment ids. HAI attack ids from
    :data:`HAI_TRAINING_ATTACKS` are accepted in the list too.
    """
    if (runs_per_fault is None) == (segment_ids is None):
        raise ConfigError("give exactly one of runs_per_fault or segment_ids")
    if segment_ids is not None:
        known = {s.segment_id: fr.name for fr in frames for s in fr.segments}
        table_ids = {a for a, *_ in HAI_TRAINING_ATTACKS}
        ids = list(segment_ids)
        if ids and all(i in table_ids for i in ids):
            ids = resolve_hai_attack_ids(frames, ids)
        missing = [i for i in ids if i not in known]
        if missing:
            raise DataError(f"segments not found: {missing}")
        names = sorted({known[i] for i in ids})
        return Selection(ids, names)

    if runs_per_fault < 0:
        raise ConfigError("runs_per_fault must be >= 0")
    by_type: dict[int, list[TimeSeriesFrame]] = {}
    for fr in frames:
        if fr.segments:
            by_type.setdefault(fr.segments[0].fault_type, []).append(fr)
    rng = np.random.default_rng(seed)
    ids, names = [], []
    for ft in sorted(by_type):
        pool = sorted(by_type[ft], key=lambda f: f.name)
        if runs_per_fault > len(pool):
            raise DataError(f"fault type {ft}: asked for {runs_per_fault} runs, only {len(pool)} available")
        for j in sorted(rng.choice(len(pool), size=runs_per_fault, replace=False)):
            names.append(pool[j].name)
            ids += [s.segment_id for s in pool[j].segments]
    return Selection(ids, names)


# -- windows -------------------------------------------------------------------

@dataclass
class WindowSet:
    """All windows of one or more frames, with per-window metadata.

    A window's label, fault type and segment id are those of its target row.
    """

    inputs: np.ndarray  # (N, T, n)
    targets: np.ndarray  # (N, n)
    labels: np.ndarray  # (N,)
    fault_types: np.ndarray  # (N,), -1 for normal targets
    segment_ids: np.ndarray  # (N,), "" for normal targets
    frame_names: np.ndarray  # (N,)
    time_index: np.ndarray  # (N,) target row inside its frame

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "WindowSet":
        return WindowSet(*(getattr(self, f)[idx] for f in _WINDOW_FIELDS))

    @property
    def noc_mask(self) -> np.ndarray:
        return self.labels == 0

    @property
    def aoc_mask(self) -> np.ndarray:
        return self.labels == 1

    def in_segments(self, ids) -> np.ndarray:
        return np.isin(self.segment_ids, list(ids))

    def in_frames(self, names) -> np.ndarray:
        return np.isin(self.frame_names, list(names))

    @classmethod
    def empty(cls, T: int, n: int) -> "WindowSet":
        return cls(
            np.zeros((0, T, n)), np.zeros((0, n)), np.zeros(0, np.int8), np.zeros(0, np.int64),
            np.zeros(0, dtype=object), np.zeros(0, dtype=object), np.zeros(0, np.int64),
        )


_WINDOW_FIELDS = ("inputs", "targets", "labels", "fault_types", "segment_ids", "frame_names", "time_index")


def make_windows(frame: TimeSeriesFrame, T: int = 20) -> WindowSet:
    """Windows ``rows [t-T, t) -> row t`` for every ``t`` in ``[T, L)``."""
    L = len(frame)
    if L < T + 1:
        raise DataError(f"frame {frame.name} has {L} rows, need at least {T + 1} for window {T}")
    view = np.lib.stride_tricks.sliding_window_view(frame.values[:-1], T, axis=0)
    inputs = np.ascontiguousarray(view.transpose(0, 2, 1))
    ft = np.full(L, -1, dtype=np.int64)
    sid = np.full(L, "", dtype=object)
    for s in frame.segments:
        ft[s.start:s.end] = s.fault_type
        sid[s.start:s.end] = s.segment_id
    t = np.arange(T, L)
    return WindowSet(
        inputs,
        frame.values[T:].copy(),
        frame.labels[T:].copy(),
        ft[T:],
        sid[T:],
        np.full(L - T, frame.name, dtype=object),
        t,
    )


def iter_windows(frame: TimeSeriesFrame, T: int = 20):
    """Yield ``(input window, target, label, fault_type)`` one at a time."""
    ws = make_windows(frame, T)
    for k in range(len(ws)):
        yield ws.inputs[k], ws.targets[k], int(ws.labels[k]), int(ws.fault_types[k])


def concat_windows(sets: Sequence[WindowSet]) -> WindowSet:
    sets = [s for s in sets if len(s)]
    if not sets:
        raise DataError("no windows to concatenate")
    return WindowSet(*(np.concatenate([getattr(s, f) for s in sets]) for f in _WINDOW_FIELDS))


def windows_from_frames(frames: Sequence[TimeSeriesFrame], T: int = 20) -> WindowSet:
    return concat_windows([make_windows(f, T) for f in frames])


# -- normalization ---------------------------------------------------------------

@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def apply_array(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def invert_array(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean

    def apply(self, frame: TimeSeriesFrame) -> TimeSeriesFrame:
        if frame.n != len(self.mean):
            raise ShapeError(f"frame {frame.name} has {frame.n} channels, normalizer has {len(self.mean)}")
        return replace(frame, values=self.apply_array(frame.values), segments=list(frame.segments))

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "Normalizer":
        return cls(np.array(d["mean"]), np.array(d["std"]))


def fit_normalizer(frames: Sequence[TimeSeriesFrame], floor: float = SIGMA_FLOOR) -> Normalizer:
    """Per-channel z-score fitted on the normal (label 0) rows only."""
    rows = [f.values[f.labels == 0] for f in frames]
    rows = [r for r in rows if len(r)]
    if not rows:
        raise DataError("no normal rows to fit the normalizer on")
    data = np.concatenate(rows)
    mean = data.mean(axis=0)
    std = data.std(axis=0)
    return Normalizer(mean, np.maximum(std, floor))


# -- split and batching -------------------------------------------------------------

def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def split_train_val(windows: WindowSet, fraction: float = 0.8, seed=0) -> tuple[WindowSet, WindowSet]:
    """Shuffled split, stratified by label. A lone anomalous window stays in train."""
    rng = _rng(seed)
    train_idx, val_idx = [], []
    for cls in (0, 1):
        idx = np.flatnonzero(windows.labels == cls)
        idx = idx[rng.permutation(len(idx))]
        k = int(math.floor(fraction * len(idx) + 0.5))
        if cls == 1 and len(idx):
            if len(idx) == 1:
                log.info("only one anomalous window; keeping it in the training split")
                k = 1
            else:
                k = min(max(k, 1), len(idx) - 1)
        train_idx.append(idx[:k])
        val_idx.append(idx[k:])
    tr = np.sort(np.concatenate(train_idx))
    va = np.sort(np.concatenate(val_idx))
    return windows.subset(tr), windows.subset(va)


@dataclass
class WindowBatch:
    inputs: np.ndarray
    targets: np.ndarray
    labels: np.ndarray
    fault_types: np.ndarray
    index: np.ndarray | None = None

    @property
    def noc_mask(self) -> np.ndarray:
        return self.labels == 0

    @property
    def aoc_mask(self) -> np.ndarray:
        return self.labels == 1

    def __len__(self) -> int:
        return len(self.labels)


def batch_mixed(windows: WindowSet, batch_size: int = 1000, seed=0) -> Iterator[WindowBatch]:
    """One epoch of shuffled batches; the last short batch is kept."""
    if batch_size <= 0:
        raise ConfigError("batch_size must be positive")
    rng = _rng(seed)
    perm = rng.permutation(len(windows))
    for s in range(0, len(perm), batch_size):
        idx = perm[s:s + batch_size]
        yield WindowBatch(windows.inputs[idx], windows.targets[idx], windows.labels[idx], windows.fault_types[idx], idx)
