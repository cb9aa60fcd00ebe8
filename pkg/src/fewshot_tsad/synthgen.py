"""Synthetic multivariate process with injected faults.

Normal data come from a stable VAR(2) process driven by per-channel
sinusoids and Gaussian noise. Four fault archetypes can be injected into a
frame: a step in the mean, a sensor stuck at its last reading, a slow linear
drift, and a burst of extra noise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Segment, TimeSeriesFrame, select_few_positives, write_csv
from .errors import ConfigError, DataError

BURN_IN = 200
MAX_SPECTRAL_RADIUS = 0.95

FAULT_TYPES = {"mean_shift": 1, "stuck_sensor": 2, "dynamics_drift": 3, "variance_burst": 4}
FAULT_NAMES = {v: k for k, v in FAULT_TYPES.items()}


def companion_matrix(A1: np.ndarray, A2: np.ndarray) -> np.ndarray:
    n = A1.shape[0]
    F = np.zeros((2 * n, 2 * n))
    F[:n, :n] = A1
    F[:n, n:] = A2
    F[n:, :n] = np.eye(n)
    return F


@dataclass
class ProcessSpec:
    n: int
    A1: np.ndarray
    A2: np.ndarray
    noise_sigma: np.ndarray
    drive_amp: np.ndarray | None = None
    drive_period: np.ndarray | None = None
    drive_phase: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        self.A1 = np.asarray(self.A1, dtype=np.float64)
        self.A2 = np.asarray(self.A2, dtype=np.float64)
        self.noise_sigma = np.broadcast_to(np.asarray(self.noise_sigma, dtype=np.float64), (self.n,)).copy()
        for a in ("drive_amp", "drive_period", "drive_phase"):
            v = getattr(self, a)
            if v is not None:
                setattr(self, a, np.broadcast_to(np.asarray(v, dtype=np.float64), (self.n,)).copy())
        self.validate()

    def companion(self) -> np.ndarray:
        return companion_matrix(self.A1, self.A2)

    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.companion()))))

    def validate(self) -> None:
        if self.A1.shape != (self.n, self.n) or self.A2.shape != (self.n, self.n):
            raise ConfigError(f"VAR coefficients must be {self.n}x{self.n}")
        if np.any(self.noise_sigma < 0):
            raise ConfigError("noise_sigma must be >= 0")
        rho = self.spectral_radius()
        if not rho < MAX_SPECTRAL_RADIUS:
            raise ConfigError(f"VAR(2) spectral radius {rho:.4f} is not below {MAX_SPECTRAL_RADIUS}")
        if self.drive_amp is not None and self.drive_period is not None and np.any(self.drive_period <= 0):
            raise ConfigError("drive periods must be positive")


def random_process(
    n: int = 6,
    seed: int = 0,
    radius: float = 0.9,
    noise: float = 0.3,
    drive: tuple[float, float] = (0.2, 0.6),
) -> ProcessSpec:
    """A random cross-coupled VAR(2) with companion spectral radius ``radius``
    and sinusoidal drive amplitudes drawn from ``drive``."""
    rng = np.random.default_rng(seed)
    a1 = 0.6 * np.eye(n) + rng.normal(0, 0.35 / np.sqrt(n), (n, n))
    a2 = 0.2 * np.eye(n) + rng.normal(0, 0.2 / np.sqrt(n), (n, n))
    scale = radius / np.max(np.abs(np.linalg.eigvals(companion_matrix(a1, a2))))
    # companion eigenvalues scale by s when A1 -> s A1 and A2 -> s^2 A2
    return ProcessSpec(
        n,
        a1 * scale,
        a2 * scale ** 2,
        noise_sigma=np.full(n, noise),
        drive_amp=rng.uniform(drive[0], drive[1], n),
        drive_period=rng.uniform(25, 80, n),
        drive_phase=rng.uniform(0, 2 * np.pi, n),
        seed=seed,
    )


def gen_noc(spec: ProcessSpec, length: int, seed: int | None = None, name: str = "noc") -> TimeSeriesFrame:
    """``length`` normal samples after discarding a burn-in of 200 steps."""
    if length <= 0:
        raise ConfigError("length must be positive")
    spec.validate()
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    total = length + BURN_IN
    n = spec.n
    eps = rng.standard_normal((total, n)) * spec.noise_sigma
    if spec.drive_amp is not None:
        t = np.arange(total)[:, None]
        eps = eps + spec.drive_amp * np.sin(2 * np.pi * t / spec.drive_period + spec.drive_phase)
    x = np.zeros((total + 2, n))
    A1T, A2T = spec.A1.T, spec.A2.T
    for k in range(total):
        x[k + 2] = x[k + 1] @ A1T + x[k] @ A2T + eps[k]
    values = x[2 + BURN_IN:]
    return TimeSeriesFrame(name, values, np.zeros(length, dtype=np.int8), [], 1.0, [f"x{k}" for k in range(n)])


@dataclass
class FaultSpec:
    fault_type: str
    magnitude: float
    channels: Sequence[int]
    start: int
    duration: int
    seed: int = 0

    def __post_init__(self):
        if self.fault_type not in FAULT_TYPES:
            raise ConfigError(f"unknown fault type {self.fault_type!r}")
        if not self.magnitude >= 0:
            raise ConfigError("fault magnitude must be >= 0")
        if self.duration <= 0 or self.start < 0:
            raise ConfigError("fault needs start >= 0 and duration > 0")
        if not list(self.channels):
            raise ConfigError("fault must affect at least one channel")


def _renumber(name: str, segs: list[Segment]) -> list[Segment]:
    segs = sorted(segs, key=lambda s: s.start)
    return [Segment(s.start, s.end, s.fault_type, f"{name}#{k}") for k, s in enumerate(segs)]


def inject_fault(frame: TimeSeriesFrame, fault: FaultSpec) -> TimeSeriesFrame:
    """Return a copy of ``frame`` with ``fault`` applied on ``[start, start + duration)``."""
    s, e = fault.start, fault.start + fault.duration
    L = len(frame)
    if e > L:
        raise DataError(f"fault [{s}, {e}) exceeds frame {frame.name} of length {L}")
    ch = np.asarray(list(fault.channels), dtype=int)
    if ch.min() < 0 or ch.max() >= frame.n:
        raise DataError(f"fault channels {ch.tolist()} outside 0..{frame.n - 1}")
    values = frame.values.copy()
    block = values[s:e][:, ch]
    if fault.fault_type == "mean_shift":
        block = block + fault.magnitude
    elif fault.fault_type == "stuck_sensor":
        block = np.broadcast_to(values[s, ch], block.shape).copy()
    elif fault.fault_type == "dynamics_drift":
        ramp = np.arange(1, e - s + 1, dtype=np.float64) / (e - s)
        block = block + fault.magnitude * ramp[:, None]
    else:
        rng = np.random.default_rng(fault.seed)
        block = block + rng.normal(0.0, 1.0, block.shape) * fault.magnitude
    values[s:e, ch] = block

    segs = []
    for seg in frame.segments:
        if seg.start == s and seg.end == e:
            continue
        if seg.start < e and s < seg.end:
            raise DataError(f"fault [{s}, {e}) overlaps segment {seg.segment_id}")
        segs.append(seg)
    segs.append(Segment(s, e, FAULT_TYPES[fault.fault_type], ""))
    labels = frame.labels.copy()
    labels[s:e] = 1
    return TimeSeriesFrame(
        frame.name, values, labels, _renumber(frame.name, segs), frame.sample_period, frame.channels, frame.timestamps
    )


@dataclass
class Scenario:
    """Everything needed to rebuild a benchmark. Fault magnitudes are in
    units of the innovation noise ``noise``."""

    seen_faults: list[str] = field(default_factory=lambda: list(FAULT_TYPES))
    unseen_faults: list[str] = field(default_factory=list)
    k_positives: int = 3
    n: int = 6
    process_seed: int = 7
    noise: float = 0.1
    drive: tuple = (0.3, 0.6)
    n_train_noc: int = 8
    train_noc_length: int = 500
    train_pool_runs: int = 10
    train_fault_length: int = 300
    train_onset: int = 60
    n_test_noc: int = 4
    test_runs_per_fault: int = 3
    test_length: int = 400
    test_onset: int = 100
    magnitudes: dict = field(default_factory=lambda: {
        "mean_shift": 6.0, "stuck_sensor": 1.0, "dynamics_drift": 10.0, "variance_burst": 6.0,
    })
    fault_channels: dict = field(default_factory=lambda: {
        "mean_shift": [0, 1], "stuck_sensor": [2], "dynamics_drift": [3, 4], "variance_burst": [5],
    })

    def __post_init__(self):
        for f in list(self.seen_faults) + list(self.unseen_faults):
            if f not in FAULT_TYPES:
                raise ConfigError(f"unknown fault type {f!r}")
        if self.k_positives < 0:
            raise ConfigError("k_positives must be >= 0")
        if self.k_positives > self.train_pool_runs:
            raise ConfigError("k_positives exceeds train_pool_runs")

    @property
    def all_faults(self) -> list[str]:
        seen = list(dict.fromkeys(list(self.seen_faults) + list(self.unseen_faults)))
        return [f for f in FAULT_TYPES if f in seen]

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "Scenario":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown scenario keys {sorted(extra)}")
        return cls(**d)


@dataclass
class Benchmark:
    train: list[TimeSeriesFrame]
    test: list[TimeSeriesFrame]
    manifest: dict


def _faulty_run(spec, scenario, fault, length, onset, seed, name, scale):
    fr = gen_noc(spec, length, seed=seed, name=name)
    ch = scenario.fault_channels[fault]
    mag = scenario.magnitudes[fault]
    rng = np.random.default_rng(seed + 1)
    out = fr
    for c in ch:
        out = _inject_channel(out, fault, mag * scale[c], c, onset, length - onset, seed, rng)
    return out


def _inject_channel(frame, fault, magnitude, channel, start, duration, seed, rng):
    # a multi-channel fault is applied channel by channel so each gets its own scale;
    # later channels reuse the interval, which inject_fault treats as the same segment
    return inject_fault(frame, FaultSpec(fault, magnitude, [channel], start, duration, seed=int(rng.integers(2**31))))


def make_benchmark(scenario: Scenario, seed: int = 0) -> Benchmark:
    """Build train/test frames. ``seed`` drives noise realizations and which
    ``k_positives`` faulty runs per seen type enter training; the process
    dynamics come from ``scenario.process_seed``."""
    spec = random_process(scenario.n, scenario.process_seed, noise=scenario.noise, drive=tuple(scenario.drive))
    scale = spec.noise_sigma
    ss = np.random.SeedSequence([seed, scenario.process_seed])
    seeds = iter(int(s) for s in ss.generate_state(10_000))

    train = [gen_noc(spec, scenario.train_noc_length, next(seeds), f"train_noc_{k:02d}") for k in range(scenario.n_train_noc)]
    pool = []
    for fault in scenario.seen_faults:
        for r in range(scenario.train_pool_runs):
            pool.append(_faulty_run(
                spec, scenario, fault, scenario.train_fault_length, scenario.train_onset,
                next(seeds), f"train_{fault}_{r:02d}", scale,
            ))
    sel = select_few_positives(pool, runs_per_fault=scenario.k_positives, seed=next(seeds)) if pool else None
    if sel is not None:
        chosen = set(sel.frame_names)
        train += [f for f in pool if f.name in chosen]

    test = [gen_noc(spec, scenario.test_length, next(seeds), f"test_noc_{k:02d}") for k in range(scenario.n_test_noc)]
    test_segments = []
    for fault in scenario.all_faults:
        for r in range(scenario.test_runs_per_fault):
            fr = _faulty_run(
                spec, scenario, fault, scenario.test_length, scenario.test_onset,
                next(seeds), f"test_{fault}_{r:02d}", scale,
            )
            test.append(fr)
            for s in fr.segments:
                test_segments.append({
                    "segment_id": s.segment_id,
                    "fault_type": s.fault_type,
                    "fault_name": fault,
                    "seen": fault in scenario.seen_faults,
                })
    manifest = {
        "scenario": scenario.to_json(),
        "seed": seed,
        "fault_type_ids": dict(FAULT_TYPES),
        "train_segments": [] if sel is None else list(sel.segment_ids),
        "train_frames": [] if sel is None else list(sel.frame_names),
        "test_segments": test_segments,
    }
    return Benchmark(train, test, manifest)


def write_benchmark(bench: Benchmark, out_dir) -> dict:
    """Emit ``train.csv``, ``test.csv`` (generic format with sidecars) and ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "train.csv", bench.train)
    write_csv(out / "test.csv", bench.test)
    (out / "manifest.json").write_text(json.dumps(bench.manifest, indent=2, sort_keys=True))
    return {"train": str(out / "train.csv"), "test": str(out / "test.csv"), "manifest": str(out / "manifest.json")}
