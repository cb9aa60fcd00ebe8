"""Single-worker training loop shared by all detector variants."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import WindowSet, batch_mixed
from .errors import DivergenceError
from .losses import (
    LossConfig,
    MarginState,
    Objective,
    aux_objective,
    hypersphere_objective,
    margin_objective,
    mse_objective,
    per_sample_mse,
    update_radius,
)
from .models import DetectorVariant, HypersphereState, ModelParams, backward, forward, init_hypersphere_center, init_params
from .numerics import AdamState, adam_step, clip_global_norm


@dataclass
class TrainSettings:
    epochs: int = 100
    batch_size: int = 1000
    lr: float = 1e-3
    hidden: int = 50
    layers: int = 2
    window: int = 20
    grad_clip: float = 5.0


@dataclass
class TrainingLog:
    epochs: list[dict] = field(default_factory=list)
    batches: list[dict] = field(default_factory=list)

    def write(self, out_dir, config_hash: str = "") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, rows in (("epochs", self.epochs), ("batches", self.batches)):
            if not rows:
                continue
            cols = list(rows[0])
            with (out / f"train_{name}.csv").open("w", newline="") as fh:
                fh.write(f"# config_hash={config_hash}\n")
                w = csv.DictWriter(fh, fieldnames=cols)
                w.writeheader()
                w.writerows(rows)


@dataclass
class TrainResult:
    params: ModelParams
    hypersphere: HypersphereState | None
    log: TrainingLog
    best_params: ModelParams
    best_val: float
    radius: MarginState


def _seeds(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    init_ss, batch_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_ss), np.random.default_rng(batch_ss)


def batch_objective(
    params: ModelParams,
    inputs,
    targets,
    labels,
    loss: LossConfig,
    radius: MarginState | None = None,
    hypersphere: HypersphereState | None = None,
) -> tuple[Objective, dict]:
    """Forward pass plus the variant's objective; returns the objective and the cache."""
    out = forward(params, inputs)
    v = params.variant
    if v is DetectorVariant.NORMAL_AR:
        obj = mse_objective(out.pred, targets, labels)
    elif v is DetectorVariant.MARGIN_AR:
        obj = margin_objective(out.pred, targets, labels, radius.r, loss.alpha)
    elif v is DetectorVariant.AUXILIARY_AR:
        obj = aux_objective(out.pred, targets, out.logits, labels, loss.alpha)
    else:
        obj = hypersphere_objective(out.pred, labels, hypersphere.center, loss.eta)
    return obj, out.cache


def loss_and_grad(params: ModelParams, inputs, targets, labels, loss: LossConfig, radius=None, hypersphere=None):
    obj, cache = batch_objective(params, inputs, targets, labels, loss, radius, hypersphere)
    grad = backward(params, cache, obj.grad_pred, obj.grad_logits)
    return obj, grad


def train_model(
    variant,
    train: WindowSet,
    val: WindowSet | None,
    loss: LossConfig,
    settings: TrainSettings,
    seed: int,
    params: ModelParams | None = None,
) -> TrainResult:
    """Train one detector for a fixed number of epochs.

    The initialization and the batch order depend only on ``seed``, so two
    variants with the same architecture see identical trajectories until their
    objectives differ. The radius of the margin variant is updated from the
    batch's detached normal-sample errors before the batch loss is formed.
    """
    variant = DetectorVariant(variant)
    init_rng, batch_rng = _seeds(seed)
    n = train.targets.shape[1]
    if params is None:
        params = init_params(variant, n, init_rng, settings.hidden, settings.window, settings.layers)
    hs = None
    if variant is DetectorVariant.HYPERSPHERE:
        center = init_hypersphere_center(params, train.inputs[train.noc_mask])
        hs = HypersphereState(center, loss.eta)
    adam = AdamState.fresh(params.layout.size, lr=settings.lr)
    radius = MarginState()
    log = TrainingLog()
    best_val = np.inf
    best = params.copy()
    step = 0
    for epoch in range(settings.epochs):
        t0 = time.perf_counter()
        sums: dict[str, float] = {}
        count = 0
        for batch in batch_mixed(train, settings.batch_size, batch_rng):
            out = forward(params, batch.inputs)
            if variant is DetectorVariant.MARGIN_AR:
                mses = per_sample_mse(out.pred, batch.targets)
                radius = update_radius(radius, mses[batch.noc_mask], loss)
                obj = margin_objective(out.pred, batch.targets, batch.labels, radius.r, loss.alpha)
            elif variant is DetectorVariant.AUXILIARY_AR:
                obj = aux_objective(out.pred, batch.targets, out.logits, batch.labels, loss.alpha)
            elif variant is DetectorVariant.HYPERSPHERE:
                obj = hypersphere_objective(out.pred, batch.labels, hs.center, loss.eta)
            else:
                obj = mse_objective(out.pred, batch.targets, batch.labels)
            if not np.isfinite(obj.loss):
                raise DivergenceError(f"{variant.value}: non-finite loss at epoch {epoch}, step {step}")
            grad = backward(params, out.cache, obj.grad_pred, obj.grad_logits)
            grad, gnorm = clip_global_norm(grad, settings.grad_clip)
            if not np.isfinite(gnorm):
                raise DivergenceError(f"{variant.value}: non-finite gradient at epoch {epoch}, step {step}")
            adam_step(params.flat, grad, adam)
            log.batches.append({"step": step, "epoch": epoch, "r": radius.r, "loss": obj.loss, **obj.parts})
            step += 1
            w = len(batch)
            count += w
            for k, v in [("loss", obj.loss), *obj.parts.items()]:
                sums[k] = sums.get(k, 0.0) + w * v
        row = {"epoch": epoch, **{f"train_{k}": v / count for k, v in sums.items()}}
        if val is not None and len(val):
            vobj = evaluate_objective(params, val, loss, radius, hs, settings.batch_size)
            row.update({f"val_{k}": v for k, v in vobj.items()})
            if vobj["loss"] < best_val:
                best_val = vobj["loss"]
                best = params.copy()
        row["r"] = radius.r
        row["seconds"] = time.perf_counter() - t0
        log.epochs.append(row)
        if not np.isfinite(row["train_loss"]):
            raise DivergenceError(f"{variant.value}: non-finite training loss at epoch {epoch}")
    return TrainResult(params, hs, log, best, float(best_val), radius)


def evaluate_objective(params, windows: WindowSet, loss, radius, hs, chunk: int = 4096) -> dict:
    """Objective components on a window set, reduced over the whole set."""
    preds, logits = [], []
    for s in range(0, len(windows), chunk):
        out = forward(params, windows.inputs[s:s + chunk])
        preds.append(out.pred)
        if out.logits is not None:
            logits.append(out.logits)
    pred = np.concatenate(preds)
    v = params.variant
    if v is DetectorVariant.MARGIN_AR:
        obj = margin_objective(pred, windows.targets, windows.labels, radius.r, loss.alpha)
    elif v is DetectorVariant.AUXILIARY_AR:
        obj = aux_objective(pred, windows.targets, np.concatenate(logits), windows.labels, loss.alpha)
    elif v is DetectorVariant.HYPERSPHERE:
        obj = hypersphere_objective(pred, windows.labels, hs.center, loss.eta)
    else:
        obj = mse_objective(pred, windows.targets, windows.labels)
    return {"loss": obj.loss, **obj.parts}
