"""Training objectives.

Batch reduction: the squared-error term is averaged over the normal (label 0)
samples of a batch, the margin and inverse-distance terms over the labeled
anomalies (label 1), and the cross-entropy term over every sample. An empty
group contributes 0.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .numerics import check_finite, log_softmax, softmax

log = logging.getLogger(__name__)

INVERSE_EPS = 1e-6


@dataclass
class LossConfig:
    alpha: float = 0.5
    percentile_p: float = 95.0
    ema_momentum: float = 0.9
    eta: float = 0.01

    def __post_init__(self):
        if not (self.alpha >= 0 and math.isfinite(self.alpha)):
            raise ConfigError(f"alpha must be a finite value >= 0, got {self.alpha}")
        if not 0 < self.percentile_p < 100:
            raise ConfigError(f"percentile_p must lie in (0, 100), got {self.percentile_p}")
        if not 0 <= self.ema_momentum < 1:
            raise ConfigError(f"ema_momentum must lie in [0, 1), got {self.ema_momentum}")
        if not (self.eta >= 0 and math.isfinite(self.eta)):
            raise ConfigError(f"eta must be a finite value >= 0, got {self.eta}")


@dataclass
class MarginState:
    r: float = 0.0
    batches_seen: int = 0


@dataclass
class Objective:
    loss: float
    grad_pred: np.ndarray | None
    grad_logits: np.ndarray | None = None
    parts: dict = field(default_factory=dict)


def per_sample_mse(pred, target) -> np.ndarray:
    """Squared Euclidean norm of each row of ``pred - target``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ in shape")
    d = pred - target
    return np.sum(d * d, axis=-1)


def mse_loss(pred, target) -> float:
    """``||pred - target||^2`` for one sample, summed over coordinates."""
    pred = np.asarray(pred, dtype=np.float64)
    if pred.ndim != 1:
        raise ShapeError("mse_loss takes single vectors; use per_sample_mse for batches")
    return float(per_sample_mse(pred, target))


def margin_loss(mse, r: float):
    """Hinge ``max(r - mse, 0)``; works elementwise on arrays."""
    out = np.maximum(r - np.asarray(mse, dtype=np.float64), 0.0)
    return float(out) if out.ndim == 0 else out


def nearest_rank_percentile(values, p: float) -> float:
    """The ceil(p/100 * N)-th smallest value (1-based)."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise DataError("percentile of an empty list")
    # round away float noise such as 0.95 * 100 = 95.00000000000001
    k = math.ceil(round(p * v.size / 100.0, 9))
    return float(v[min(max(k, 1), v.size) - 1])


def update_radius(state: MarginState, noc_mses, config: LossConfig) -> MarginState:
    """EMA of the batch's p-th percentile normal-sample error. Returns a new state."""
    mses = np.asarray(noc_mses, dtype=np.float64).ravel()
    if mses.size == 0:
        log.warning("batch holds no normal samples; radius left at %.6g", state.r)
        return MarginState(state.r, state.batches_seen)
    q = nearest_rank_percentile(mses, config.percentile_p)
    m = config.ema_momentum
    return MarginState(m * state.r + (1.0 - m) * q, state.batches_seen + 1)


def _masks(labels, size: int) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(labels).ravel()
    if y.shape != (size,):
        raise ShapeError(f"expected {size} labels, got {y.shape}")
    return y == 0, y == 1


def mse_objective(pred, target, labels) -> Objective:
    """Mean squared error over the normal samples only."""
    pred = np.asarray(pred, dtype=np.float64)
    d = pred - np.asarray(target, dtype=np.float64)
    s = np.sum(d * d, axis=1)
    noc, _ = _masks(labels, len(pred))
    n_noc = int(noc.sum())
    grad = np.zeros_like(pred)
    l_mse = 0.0
    if n_noc:
        l_mse = float(s[noc].mean())
        grad[noc] = 2.0 * d[noc] / n_noc
    return Objective(l_mse, grad, None, {"mse": l_mse})


def margin_objective(pred, target, labels, r: float, alpha: float) -> Objective:
    """Normal-sample MSE plus ``alpha`` times the mean hinge on anomalies."""
    base = mse_objective(pred, target, labels)
    pred = np.asarray(pred, dtype=np.float64)
    d = pred - np.asarray(target, dtype=np.float64)
    s = np.sum(d * d, axis=1)
    _, aoc = _masks(labels, len(pred))
    n_aoc = int(aoc.sum())
    l_m = 0.0
    grad = base.grad_pred
    if n_aoc:
        hinge = np.maximum(r - s[aoc], 0.0)
        l_m = float(hinge.mean())
        active = np.zeros(len(pred), dtype=bool)
        active[np.flatnonzero(aoc)[hinge > 0]] = True
        grad[active] += alpha * (-2.0 * d[active] / n_aoc)
    loss = base.loss + alpha * l_m
    return Objective(loss, grad, None, {"mse": base.loss, "margin": l_m, "r": r})


def cross_entropy_loss(logits, label: int) -> float:
    """Negative log-likelihood of ``label`` under softmax(logits)."""
    return float(-log_softmax(logits)[..., int(label)])


def aux_objective(pred, target, logits, labels, alpha: float) -> Objective:
    """Normal-sample MSE plus ``alpha`` times the mean cross-entropy over all samples."""
    base = mse_objective(pred, target, labels)
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels).astype(int).ravel()
    B = len(y)
    if logits.shape != (B, 2):
        raise ShapeError(f"logits must be {(B, 2)}, got {logits.shape}")
    lp = log_softmax(logits)
    ce = -lp[np.arange(B), y]
    l_c = float(ce.mean()) if B else 0.0
    onehot = np.zeros_like(logits)
    onehot[np.arange(B), y] = 1.0
    grad_logits = alpha * (softmax(logits) - onehot) / max(B, 1)
    return Objective(base.loss + alpha * l_c, base.grad_pred, grad_logits, {"mse": base.loss, "ce": l_c})


def hypersphere_objective(encodings, labels, center, eta: float) -> Objective:
    """Mean squared distance of normal encodings to the center plus ``eta``
    times the mean inverse squared distance of labeled anomalies."""
    enc = np.asarray(encodings, dtype=np.float64)
    c = np.asarray(center, dtype=np.float64)
    if enc.ndim != 2 or enc.shape[1] != c.shape[0]:
        raise ShapeError(f"encodings {enc.shape} do not match center {c.shape}")
    d = enc - c
    s = np.sum(d * d, axis=1)
    noc, aoc = _masks(labels, len(enc))
    grad = np.zeros_like(enc)
    l_n = l_a = 0.0
    if noc.any():
        l_n = float(s[noc].mean())
        grad[noc] = 2.0 * d[noc] / noc.sum()
    if aoc.any():
        inv = 1.0 / (s[aoc] + INVERSE_EPS)
        l_a = float(inv.mean())
        grad[aoc] = eta * (-(inv ** 2))[:, None] * 2.0 * d[aoc] / aoc.sum()
    return Objective(l_n + eta * l_a, grad, None, {"dist": l_n, "inverse": l_a})


def hypersphere_loss(encodings, labels, center, eta: float) -> float:
    enc = np.atleast_2d(np.asarray(encodings, dtype=np.float64))
    noc, _ = _masks(labels, len(enc))
    if not noc.any():
        raise DataError("hypersphere loss needs at least one normal sample")
    check_finite("encodings", enc)
    return hypersphere_objective(enc, labels, center, eta).loss


def combined_margin_loss(batch, params, state: MarginState, config: LossConfig) -> float:
    """Margin objective of ``params`` on a batch at the current radius ``state.r``."""
    from .models import forward

    pred = forward(params, batch.inputs).pred
    return margin_objective(pred, batch.targets, batch.labels, state.r, config.alpha).loss


def combined_aux_loss(batch, params, config: LossConfig) -> float:
    from .models import forward

    r = forward(params, batch.inputs)
    if r.logits is None:
        raise ShapeError("auxiliary objective needs a model with a classification head")
    return aux_objective(r.pred, batch.targets, r.logits, batch.labels, config.alpha).loss
