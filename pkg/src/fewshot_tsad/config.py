"""Experiment configuration, loaded from JSON and hashed for provenance."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .losses import LossConfig
from .models import DetectorVariant

DATASET_KINDS = ("synthetic", "tep", "hai", "generic")


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    scenario: dict = field(default_factory=dict)
    train_csv: list[str] = field(default_factory=list)
    test_csv: list[str] = field(default_factory=list)
    sidecar: str | None = None
    segment_ids: list[str] | None = None
    fault_onset: int | None = None

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset kind must be one of {DATASET_KINDS}, got {self.kind!r}")
        if self.kind != "synthetic" and (not self.train_csv or not self.test_csv):
            raise ConfigError(f"{self.kind} dataset needs train_csv and test_csv")
        if isinstance(self.train_csv, str):
            self.train_csv = [self.train_csv]
        if isinstance(self.test_csv, str):
            self.test_csv = [self.test_csv]


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    variants: list[str] = field(default_factory=lambda: [v.value for v in DetectorVariant])
    loss: LossConfig = field(default_factory=LossConfig)
    # per-variant overrides of alpha/eta, e.g. {"auxiliary_ar": {"alpha": 0.01}}
    variant_loss: dict = field(default_factory=dict)
    epochs: int = 100
    batch_size: int = 1000
    lr: float = 1e-3
    window: int = 20
    hidden: int = 50
    layers: int = 2
    k_positives: int = 3
    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    train_fraction: float = 0.8
    target_far: float = 0.05
    grad_clip: float = 5.0
    out_dir: str = "runs"

    def __post_init__(self):
        if isinstance(self.dataset, dict):
            self.dataset = DatasetConfig(**self.dataset)
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        self.validate()

    def validate(self) -> None:
        for v in self.variants:
            try:
                DetectorVariant(v)
            except ValueError:
                raise ConfigError(f"unknown variant {v!r}") from None
        for v, over in self.variant_loss.items():
            DetectorVariant(v)
            bad = set(over) - {"alpha", "eta", "percentile_p", "ema_momentum"}
            if bad:
                raise ConfigError(f"variant_loss[{v}] has unknown keys {sorted(bad)}")
            self.loss_for(v)
        for name in ("epochs", "batch_size", "window", "hidden", "layers"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.k_positives < 0:
            raise ConfigError("k_positives must be >= 0")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if not 0 < self.train_fraction <= 1:
            raise ConfigError("train_fraction must lie in (0, 1]")
        if not 0 <= self.target_far < 1:
            raise ConfigError("target_far must lie in [0, 1)")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")

    def loss_for(self, variant) -> LossConfig:
        v = DetectorVariant(variant).value
        return replace(self.loss, **self.variant_loss.get(v, {}))

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @property
    def hash(self) -> str:
        """Digest of everything that affects results (the output directory does not)."""
        d = self.to_dict()
        d.pop("out_dir", None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        p = Path(path)
        try:
            d = json.loads(p.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {p} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from None
        return cls.from_dict(d)
