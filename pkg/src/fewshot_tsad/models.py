"""Detector architectures sharing one stacked-LSTM trunk.

All four variants run the same recurrent trunk over a window and read the
last hidden state ``z`` of the top layer. ``ar_head`` maps ``z`` to the
n-dimensional prediction of the next sample (for the hypersphere baseline the
same head produces the encoding). The auxiliary variant adds a 2-way
``cls_head`` on ``z``.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, NonFiniteError, ShapeError
from .numerics import (
    Layout,
    LstmCellParams,
    check_finite,
    init_linear,
    init_lstm_cell,
    linear_backward,
    linear_forward,
    lstm_sequence_backward,
    lstm_sequence_forward,
    read_params,
    write_params,
)

CENTER_GUARD = 0.1


class DetectorVariant(str, enum.Enum):
    NORMAL_AR = "normal_ar"
    MARGIN_AR = "margin_ar"
    AUXILIARY_AR = "auxiliary_ar"
    HYPERSPHERE = "hypersphere"

    @property
    def is_ar(self) -> bool:
        return self is not DetectorVariant.HYPERSPHERE

    @property
    def has_cls_head(self) -> bool:
        return self is DetectorVariant.AUXILIARY_AR


def model_layout(variant: DetectorVariant, n: int, hidden: int, layers: int) -> Layout:
    entries = []
    for k in range(layers):
        d = n if k == 0 else hidden
        entries += [
            (f"lstm{k + 1}.W_ih", (4 * hidden, d)),
            (f"lstm{k + 1}.W_hh", (4 * hidden, hidden)),
            (f"lstm{k + 1}.b", (4 * hidden,)),
        ]
    entries += [("ar_head.W", (n, hidden)), ("ar_head.b", (n,))]
    if variant.has_cls_head:
        entries += [("cls_head.W", (2, hidden)), ("cls_head.b", (2,))]
    return Layout(tuple(entries))


@dataclass
class ModelParams:
    """Parameters of one detector, stored as a single flat float64 vector.

    The named blocks returned by :attr:`cells`, :attr:`ar_head` and
    :attr:`cls_head` are views into ``flat``, so in-place optimizer updates on
    ``flat`` are seen everywhere.
    """

    variant: DetectorVariant
    n: int
    hidden: int = 50
    window: int = 20
    layers: int = 2
    flat: np.ndarray | None = None

    def __post_init__(self):
        self.variant = DetectorVariant(self.variant)
        if self.n <= 0 or self.hidden <= 0 or self.window <= 0 or self.layers <= 0:
            raise ShapeError("n, hidden, window and layers must be positive")
        self.layout = model_layout(self.variant, self.n, self.hidden, self.layers)
        if self.flat is None:
            self.flat = np.zeros(self.layout.size)
        elif self.flat.shape != (self.layout.size,):
            raise ShapeError(f"flat vector has {self.flat.size} entries, layout needs {self.layout.size}")

    def view(self, name: str) -> np.ndarray:
        return self.layout.view(self.flat, name)

    @property
    def cells(self) -> list[LstmCellParams]:
        return [
            LstmCellParams(self.view(f"lstm{k}.W_ih"), self.view(f"lstm{k}.W_hh"), self.view(f"lstm{k}.b"))
            for k in range(1, self.layers + 1)
        ]

    @property
    def ar_head(self) -> tuple[np.ndarray, np.ndarray]:
        return self.view("ar_head.W"), self.view("ar_head.b")

    @property
    def cls_head(self) -> tuple[np.ndarray, np.ndarray] | None:
        if not self.variant.has_cls_head:
            return None
        return self.view("cls_head.W"), self.view("cls_head.b")

    def copy(self) -> "ModelParams":
        return ModelParams(self.variant, self.n, self.hidden, self.window, self.layers, self.flat.copy())

    def with_flat(self, flat: np.ndarray) -> "ModelParams":
        return ModelParams(self.variant, self.n, self.hidden, self.window, self.layers, flat)


def init_params(
    variant: DetectorVariant | str,
    n: int,
    rng: np.random.Generator,
    hidden: int = 50,
    window: int = 20,
    layers: int = 2,
) -> ModelParams:
    """Random initialization. Trunk and AR head are drawn first, so every
    variant started from the same generator state shares them."""
    p = ModelParams(DetectorVariant(variant), n, hidden, window, layers)
    for k, cell in enumerate(p.cells):
        fresh = init_lstm_cell(cell.input_dim, hidden, rng)
        cell.W_ih[...] = fresh.W_ih
        cell.W_hh[...] = fresh.W_hh
        cell.b[...] = fresh.b
    W, b = init_linear(hidden, n, rng)
    p.ar_head[0][...] = W
    p.ar_head[1][...] = b
    if p.cls_head is not None:
        W, b = init_linear(hidden, 2, rng)
        p.cls_head[0][...] = W
        p.cls_head[1][...] = b
    return p


@dataclass
class ForwardResult:
    pred: np.ndarray
    logits: np.ndarray | None
    z: np.ndarray
    cache: dict


def forward(params: ModelParams, windows) -> ForwardResult:
    """Run the trunk over ``windows`` of shape (T, n) or (B, T, n)."""
    x = np.asarray(windows, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (params.window, params.n):
        raise ShapeError(
            f"windows must be (B, {params.window}, {params.n}), got {np.shape(windows)}"
        )
    check_finite("window", x)
    caches = []
    seq = np.ascontiguousarray(x.transpose(1, 0, 2))  # (T, B, n)
    for cell in params.cells:
        seq, cache = lstm_sequence_forward(seq, cell)
        caches.append(cache)
    z = seq[-1]
    W, b = params.ar_head
    pred = linear_forward(z, W, b)
    logits = None
    if params.cls_head is not None:
        Wc, bc = params.cls_head
        logits = linear_forward(z, Wc, bc)
    if not np.all(np.isfinite(pred)):
        raise NonFiniteError("non-finite model output")
    cache = {"cells": caches, "z": z, "single": single}
    if single:
        return ForwardResult(pred[0], None if logits is None else logits[0], z[0], cache)
    return ForwardResult(pred, logits, z, cache)


def backward(params: ModelParams, cache: dict, grad_pred=None, grad_logits=None) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. ``params.flat`` given output gradients."""
    z = cache["z"]
    B = z.shape[0]
    grad = np.zeros(params.layout.size)
    G = params.layout

    def fix(g, width):
        if g is None:
            return None
        g = np.asarray(g, dtype=np.float64)
        if cache["single"]:
            g = g[None]
        if g.shape != (B, width):
            raise ShapeError(f"output gradient must be {(B, width)}, got {g.shape}")
        return g

    grad_pred = fix(grad_pred, params.n)
    grad_logits = fix(grad_logits, 2)
    dz = np.zeros_like(z)
    if grad_pred is not None:
        W, _ = params.ar_head
        dzp, dW, db = linear_backward(z, W, grad_pred)
        dz += dzp
        G.view(grad, "ar_head.W")[...] = dW
        G.view(grad, "ar_head.b")[...] = db
    if grad_logits is not None:
        if params.cls_head is None:
            raise ShapeError("classification gradient given but model has no cls_head")
        Wc, _ = params.cls_head
        dzc, dW, db = linear_backward(z, Wc, grad_logits)
        dz += dzc
        G.view(grad, "cls_head.W")[...] = dW
        G.view(grad, "cls_head.b")[...] = db

    # gradient w.r.t. every hidden output of the current layer, shape (T, B, H)
    d_out = np.zeros((params.window, B, params.hidden))
    d_out[-1] = dz
    for k in range(params.layers - 1, -1, -1):
        d_out, g = lstm_sequence_backward(cache["cells"][k], d_out)
        G.view(grad, f"lstm{k + 1}.W_ih")[...] = g.W_ih
        G.view(grad, f"lstm{k + 1}.W_hh")[...] = g.W_hh
        G.view(grad, f"lstm{k + 1}.b")[...] = g.b
    return grad


def ar_forward(window, params: ModelParams):
    """Returns ``(prediction, z, cache)``."""
    r = forward(params, window)
    return r.pred, r.z, r.cache


def aux_forward(window, params: ModelParams):
    """Returns ``(prediction, logits, z, cache)``; logits are unnormalized."""
    if params.cls_head is None:
        raise ShapeError("aux_forward needs a model with a classification head")
    r = forward(params, window)
    return r.pred, r.logits, r.z, r.cache


@dataclass
class HypersphereState:
    center: np.ndarray
    eta: float = 0.01

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        check_finite("hypersphere center", self.center)


def center_from_encodings(encodings, guard: float = CENTER_GUARD) -> np.ndarray:
    enc = np.atleast_2d(np.asarray(encodings, dtype=np.float64))
    if enc.shape[0] == 0:
        raise DataError("need at least one encoding to place the center")
    c = enc.mean(axis=0)
    small = np.abs(c) < guard
    c[small] = np.where(c[small] < 0, -guard, guard)
    return c


def init_hypersphere_center(params: ModelParams, noc_windows, guard: float = CENTER_GUARD) -> np.ndarray:
    """Mean encoding of normal windows, with near-zero coordinates pushed to +-guard."""
    w = np.asarray(noc_windows, dtype=np.float64)
    if w.ndim == 2:
        w = w[None]
    if w.shape[0] == 0:
        raise DataError("need at least one normal window to place the center")
    enc = np.concatenate([forward(params, w[s:s + 2048]).pred for s in range(0, len(w), 2048)])
    return center_from_encodings(enc, guard)


def score_windows(
    params: ModelParams,
    inputs,
    targets,
    hypersphere: HypersphereState | None = None,
    chunk: int = 4096,
) -> np.ndarray:
    """Per-window anomaly scores for a batch of windows."""
    x = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if params.variant is DetectorVariant.HYPERSPHERE and hypersphere is None:
        raise ConfigError("hypersphere scoring needs a center")
    check_finite("parameters", params.flat)
    out = np.empty(len(x))
    for s in range(0, len(x), chunk):
        pred = forward(params, x[s:s + chunk]).pred
        if params.variant is DetectorVariant.HYPERSPHERE:
            d = pred - hypersphere.center
        else:
            d = pred - y[s:s + chunk]
        out[s:s + chunk] = np.sum(d * d, axis=1)
    return out


def anomaly_score(window, target, params: ModelParams, hypersphere: HypersphereState | None = None) -> float:
    """Squared prediction error for AR variants, squared distance to the
    center for the hypersphere baseline."""
    return float(score_windows(params, np.asarray(window)[None], np.asarray(target)[None], hypersphere)[0])


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(
    path_stem,
    params: ModelParams,
    hypersphere: HypersphereState | None = None,
    config_hash: str = "",
    extra: dict | None = None,
) -> tuple[Path, Path]:
    """Writes ``<stem>.bin`` (flat parameters) and ``<stem>.json`` (sidecar)."""
    stem = Path(path_stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    bin_path = stem.with_suffix(".bin")
    json_path = stem.with_suffix(".json")
    write_params(bin_path, params.flat, params.layout, {"variant": params.variant.value})
    side = {
        "variant": params.variant.value,
        "n": params.n,
        "T": params.window,
        "hidden": params.hidden,
        "layers": params.layers,
        "config_hash": config_hash,
        "params_file": bin_path.name,
    }
    if hypersphere is not None:
        side["hypersphere"] = {"center": hypersphere.center.tolist(), "eta": hypersphere.eta}
    if extra:
        side.update(extra)
    json_path.write_text(json.dumps(side, indent=2, sort_keys=True))
    return bin_path, json_path


def load_checkpoint(path) -> tuple[ModelParams, HypersphereState | None, dict]:
    """Accepts the ``.json`` sidecar, the ``.bin`` file or the common stem."""
    p = Path(path)
    json_path = p.with_suffix(".json")
    side = json.loads(json_path.read_text())
    flat, layout, _ = read_params(json_path.parent / side["params_file"])
    params = ModelParams(side["variant"], side["n"], side["hidden"], side["T"], side["layers"], flat)
    if params.layout.entries != layout.entries:
        raise ShapeError("parameter file layout does not match the sidecar description")
    hs = None
    if "hypersphere" in side:
        hs = HypersphereState(np.array(side["hypersphere"]["center"]), side["hypersphere"]["eta"])
    return params, hs, side
