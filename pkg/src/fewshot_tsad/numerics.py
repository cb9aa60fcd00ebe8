"""Small float64 numerics kernel: LSTM cell, linear layer, softmax, Adam.

Every op accepts a single sample (1-D vectors) or a batch (leading batch
axis). Gradients are hand derived and checked against central differences
in the test suite. Matrices are plain ``numpy.ndarray`` in float64.

Gate order inside the stacked LSTM weights is ``[i, f, g, o]``: input,
forget, candidate (cell), output.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DataError, NonFiniteError, ShapeError

GATE_ORDER = ("i", "f", "g", "o")
FORMAT_VERSION = 1
_MAGIC = b"FSTSAD01"

DTYPE = np.float64


def check_finite(name: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"non-finite values in {name}")


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class LstmCellParams:
    """Stacked weights of one LSTM cell.

    ``W_ih`` is (4H, D), ``W_hh`` is (4H, H) and ``b`` is (4H,), rows grouped
    by gate in ``GATE_ORDER``.
    """

    W_ih: np.ndarray
    W_hh: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        four_h, d = self.W_ih.shape
        if four_h % 4 or four_h == 0 or d == 0:
            raise ShapeError(f"W_ih must be (4H, D) with H, D > 0, got {self.W_ih.shape}")
        h = four_h // 4
        if self.W_hh.shape != (four_h, h):
            raise ShapeError(f"W_hh must be {(four_h, h)}, got {self.W_hh.shape}")
        if self.b.shape != (four_h,):
            raise ShapeError(f"b must be ({four_h},), got {self.b.shape}")

    @property
    def hidden(self) -> int:
        return self.W_hh.shape[1]

    @property
    def input_dim(self) -> int:
        return self.W_ih.shape[1]

    @classmethod
    def zeros(cls, input_dim: int, hidden: int) -> "LstmCellParams":
        return cls(
            np.zeros((4 * hidden, input_dim)),
            np.zeros((4 * hidden, hidden)),
            np.zeros(4 * hidden),
        )


def init_lstm_cell(input_dim: int, hidden: int, rng: np.random.Generator) -> LstmCellParams:
    """Uniform(-1/sqrt(H), 1/sqrt(H)) weights, forget-gate bias set to 1."""
    k = 1.0 / np.sqrt(hidden)
    p = LstmCellParams(
        rng.uniform(-k, k, size=(4 * hidden, input_dim)),
        rng.uniform(-k, k, size=(4 * hidden, hidden)),
        rng.uniform(-k, k, size=4 * hidden),
    )
    p.b[hidden:2 * hidden] = 1.0
    return p


def init_linear(in_dim: int, out_dim: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    k = 1.0 / np.sqrt(in_dim)
    return rng.uniform(-k, k, size=(out_dim, in_dim)), rng.uniform(-k, k, size=out_dim)


@dataclass
class LstmCache:
    x: np.ndarray
    h: np.ndarray
    c: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    tanh_c: np.ndarray
    params: LstmCellParams
    batched: bool


def _as_batch(a: np.ndarray) -> tuple[np.ndarray, bool]:
    a = np.asarray(a, dtype=DTYPE)
    if a.ndim == 1:
        return a[None, :], False
    if a.ndim == 2:
        return a, True
    raise ShapeError(f"expected a vector or a (batch, dim) matrix, got shape {a.shape}")


def lstm_cell_forward(x, h, c, params: LstmCellParams):
    """One LSTM step. Returns ``(h_new, c_new, cache)``."""
    x2, batched = _as_batch(x)
    h2, hb = _as_batch(h)
    c2, cb = _as_batch(c)
    H = params.hidden
    if not (batched == hb == cb):
        raise ShapeError("x, h and c must all be vectors or all be batches")
    if x2.shape[1] != params.input_dim:
        raise ShapeError(f"x has dim {x2.shape[1]}, cell expects {params.input_dim}")
    if h2.shape != (x2.shape[0], H) or c2.shape != (x2.shape[0], H):
        raise ShapeError(f"h/c must have shape {(x2.shape[0], H)}, got {h2.shape} and {c2.shape}")
    check_finite("lstm input", x2, h2, c2)

    z = x2 @ params.W_ih.T + h2 @ params.W_hh.T + params.b
    s = sigmoid(z)
    i = s[:, :H]
    f = s[:, H:2 * H]
    g = np.tanh(z[:, 2 * H:3 * H])
    o = s[:, 3 * H:]
    c_new = f * c2 + i * g
    tanh_c = np.tanh(c_new)
    h_new = o * tanh_c
    check_finite("lstm state", h_new, c_new)
    cache = LstmCache(x2, h2, c2, i, f, g, o, tanh_c, params, batched)
    if not batched:
        return h_new[0], c_new[0], cache
    return h_new, c_new, cache


def lstm_cell_backward(cache: LstmCache, grad_h_new, grad_c_new):
    """Reverse-mode pass of :func:`lstm_cell_forward`.

    Returns ``(grad_x, grad_h, grad_c, grad_params)``; the parameter gradient
    is summed over the batch.
    """
    if not isinstance(cache, LstmCache):
        raise TypeError("cache must come from lstm_cell_forward")
    dh, b1 = _as_batch(grad_h_new)
    dc_next, b2 = _as_batch(grad_c_new)
    if b1 != cache.batched or b2 != cache.batched:
        raise ShapeError("gradient rank does not match the cached forward call")
    expected = cache.h.shape
    if dh.shape != expected or dc_next.shape != expected:
        raise ShapeError(f"gradients must have shape {expected}, got {dh.shape} and {dc_next.shape}")
    p = cache.params
    if p.W_ih.shape[1] != cache.x.shape[1] or p.hidden != expected[1]:
        raise ShapeError("cache is stale: parameter shapes changed since the forward call")

    do = dh * cache.tanh_c
    dc = dc_next + dh * cache.o * (1.0 - cache.tanh_c ** 2)
    df = dc * cache.c
    di = dc * cache.g
    dg = dc * cache.i
    dc_prev = dc * cache.f
    dz = np.concatenate(
        [
            di * cache.i * (1.0 - cache.i),
            df * cache.f * (1.0 - cache.f),
            dg * (1.0 - cache.g ** 2),
            do * cache.o * (1.0 - cache.o),
        ],
        axis=1,
    )
    grads = LstmCellParams(dz.T @ cache.x, dz.T @ cache.h, dz.sum(axis=0))
    dx = dz @ p.W_ih
    dh_prev = dz @ p.W_hh
    if not cache.batched:
        return dx[0], dh_prev[0], dc_prev[0], grads
    return dx, dh_prev, dc_prev, grads


@dataclass
class LstmSeqCache:
    xs: np.ndarray  # (T, B, D)
    hs: np.ndarray  # (T + 1, B, H), hs[0] is the initial state
    cs: np.ndarray  # (T + 1, B, H)
    gates: np.ndarray  # (T, B, 4H) activated i, f, g, o
    tanh_c: np.ndarray  # (T, B, H)
    params: LstmCellParams


def lstm_sequence_forward(xs: np.ndarray, params: LstmCellParams) -> tuple[np.ndarray, LstmSeqCache]:
    """Unrolled cell over ``xs`` of shape (T, B, D) from zero states.

    Same arithmetic as repeated :func:`lstm_cell_forward`, with the input
    projection hoisted out of the time loop. Returns hidden states (T, B, H).
    """
    T, B, D = xs.shape
    if D != params.input_dim:
        raise ShapeError(f"inputs have dim {D}, cell expects {params.input_dim}")
    H = params.hidden
    xproj = (xs.reshape(T * B, D) @ params.W_ih.T + params.b).reshape(T, B, 4 * H)
    hs = np.zeros((T + 1, B, H))
    cs = np.zeros((T + 1, B, H))
    gates = np.empty((T, B, 4 * H))
    tanh_c = np.empty((T, B, H))
    W_hhT = params.W_hh.T
    # one exp per step: sigmoid for i, f, o and tanh(u) = 2 sigmoid(2u) - 1 for g
    scale = np.ones(4 * H)
    scale[2 * H:3 * H] = 2.0
    with np.errstate(over="ignore"):
        for t in range(T):
            z = xproj[t] + hs[t] @ W_hhT
            g = gates[t]
            np.multiply(z, -scale, out=g)
            np.exp(g, out=g)
            g += 1.0
            np.reciprocal(g, out=g)
            gg = g[:, 2 * H:3 * H]
            gg *= 2.0
            gg -= 1.0
            cs[t + 1] = g[:, H:2 * H] * cs[t] + g[:, :H] * gg
            tc = tanh_c[t]
            np.multiply(cs[t + 1], -2.0, out=tc)
            np.exp(tc, out=tc)
            tc += 1.0
            np.divide(2.0, tc, out=tc)
            tc -= 1.0
            hs[t + 1] = g[:, 3 * H:] * tc
    check_finite("lstm state", hs[-1], cs[-1])
    return hs[1:], LstmSeqCache(xs, hs, cs, gates, tanh_c, params)


def lstm_sequence_backward(cache: LstmSeqCache, grad_hs: np.ndarray) -> tuple[np.ndarray, LstmCellParams]:
    """Backpropagation through time for :func:`lstm_sequence_forward`.

    ``grad_hs`` holds the loss gradient w.r.t. every output hidden state.
    Returns the input gradient (T, B, D) and the batch-summed parameter gradient.
    """
    T, B, H = cache.tanh_c.shape
    if grad_hs.shape != (T, B, H):
        raise ShapeError(f"grad_hs must be {(T, B, H)}, got {grad_hs.shape}")
    p = cache.params
    dz = np.empty((T, B, 4 * H))
    dh = np.zeros((B, H))
    dc = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        g = cache.gates[t]
        i, f, gg, o = g[:, :H], g[:, H:2 * H], g[:, 2 * H:3 * H], g[:, 3 * H:]
        dht = grad_hs[t] + dh
        tc = cache.tanh_c[t]
        dc = dc + dht * o * (1.0 - tc * tc)
        d = dz[t]
        d[:, :H] = dc * gg * i * (1.0 - i)
        d[:, H:2 * H] = dc * cache.cs[t] * f * (1.0 - f)
        d[:, 2 * H:3 * H] = dc * i * (1.0 - gg * gg)
        d[:, 3 * H:] = dht * tc * o * (1.0 - o)
        dc = dc * f
        dh = d @ p.W_hh
    flat_dz = dz.reshape(T * B, 4 * H)
    grads = LstmCellParams(
        flat_dz.T @ cache.xs.reshape(T * B, -1),
        flat_dz.T @ cache.hs[:-1].reshape(T * B, H),
        flat_dz.sum(axis=0),
    )
    dxs = (flat_dz @ p.W_ih).reshape(T, B, -1)
    return dxs, grads


def linear_forward(x, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    if W.ndim != 2 or b.shape != (W.shape[0],):
        raise ShapeError(f"W must be (out, in) and b (out,), got {W.shape} and {b.shape}")
    if x.shape[-1] != W.shape[1]:
        raise ShapeError(f"x has dim {x.shape[-1]}, W expects {W.shape[1]}")
    check_finite("linear input", x)
    return x @ W.T + b


def linear_backward(x, W: np.ndarray, grad_y):
    """Returns ``(grad_x, grad_W, grad_b)``; batch gradients are summed."""
    x2, batched = _as_batch(x)
    gy, gb = _as_batch(grad_y)
    if gb != batched or gy.shape != (x2.shape[0], W.shape[0]):
        raise ShapeError(f"grad_y shape {np.shape(grad_y)} does not match the forward output")
    dx = gy @ W
    dW = gy.T @ x2
    db = gy.sum(axis=0)
    return (dx if batched else dx[0]), dW, db


def softmax(logits) -> np.ndarray:
    """Max-shifted softmax over the last axis."""
    z = np.asarray(logits, dtype=DTYPE)
    check_finite("logits", z)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=DTYPE)
    check_finite("logits", z)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, size: int, **hyper) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), **hyper)


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if params.shape != grad.shape or state.m.shape != params.shape:
        raise ShapeError(
            f"params {params.shape}, grad {grad.shape} and state {state.m.shape} must align"
        )
    check_finite("gradient", grad)
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (grad * grad)
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


def clip_global_norm(grad: np.ndarray, max_norm: float) -> tuple[np.ndarray, float]:
    norm = float(np.sqrt(np.dot(grad, grad)))
    if max_norm > 0 and norm > max_norm:
        grad = grad * (max_norm / norm)
    return grad, norm


def finite_difference_check(
    loss_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    params: np.ndarray,
    eps: float = 1e-5,
    indices: Iterable[int] | None = None,
    grad: np.ndarray | None = None,
    loss_only: Callable[[np.ndarray], float] | None = None,
) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``loss_and_grad(theta)`` must return ``(loss, gradient)``. Only the listed
    ``indices`` are probed when given. ``grad`` overrides the analytic
    gradient, which is how a corrupted gradient can be fed in. ``loss_only``,
    if given, is used for the perturbed evaluations to skip needless backward
    passes.
    """
    if loss_only is None:
        def loss_only(th):
            return loss_and_grad(th)[0]

    theta = np.array(params, dtype=DTYPE, copy=True)
    loss0, analytic = loss_and_grad(theta.copy())
    if grad is not None:
        analytic = grad
    if not np.isfinite(loss0):
        raise NonFiniteError("loss is not finite at the base point")
    idx = range(theta.size) if indices is None else indices
    worst = 0.0
    for k in idx:
        old = theta[k]
        theta[k] = old + eps
        lp = loss_only(theta.copy())
        theta[k] = old - eps
        lm = loss_only(theta.copy())
        theta[k] = old
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise NonFiniteError(f"loss is not finite when perturbing index {k}")
        numeric = (lp - lm) / (2 * eps)
        a = float(analytic[k])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst


# -- flat parameter serialization -------------------------------------------

@dataclass(frozen=True)
class Layout:
    """Named slices of a flat parameter vector."""

    entries: tuple[tuple[str, tuple[int, ...]], ...]
    offsets: dict = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        offs = {}
        pos = 0
        for name, shape in self.entries:
            size = int(np.prod(shape)) if shape else 1
            offs[name] = (pos, pos + size, tuple(shape))
            pos += size
        object.__setattr__(self, "offsets", offs)
        object.__setattr__(self, "_size", pos)

    @property
    def size(self) -> int:
        return self._size

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.entries]

    def view(self, flat: np.ndarray, name: str) -> np.ndarray:
        start, stop, shape = self.offsets[name]
        return flat[start:stop].reshape(shape)

    def to_json(self) -> list:
        return [{"name": n, "shape": list(s)} for n, s in self.entries]

    @classmethod
    def from_json(cls, items: Sequence[dict]) -> "Layout":
        return cls(tuple((d["name"], tuple(d["shape"])) for d in items))


def pack_params(flat: np.ndarray, layout: Layout, meta: dict | None = None) -> bytes:
    """Magic, u64 header length, JSON header, then little-endian float64 data."""
    if flat.shape != (layout.size,):
        raise ShapeError(f"flat vector has {flat.size} entries, layout needs {layout.size}")
    header = {
        "format_version": FORMAT_VERSION,
        "dtype": "<f8",
        "gate_order": list(GATE_ORDER),
        "count": layout.size,
        "layout": layout.to_json(),
        "meta": meta or {},
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    return _MAGIC + struct.pack("<Q", len(hb)) + hb + np.asarray(flat, dtype="<f8").tobytes()


def unpack_params(blob: bytes) -> tuple[np.ndarray, Layout, dict]:
    if blob[:8] != _MAGIC:
        raise DataError("not a parameter file (bad magic)")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported format version {header.get('format_version')}")
    layout = Layout.from_json(header["layout"])
    data = np.frombuffer(blob[16 + hlen:], dtype="<f8")
    if data.size != layout.size:
        raise DataError(f"payload has {data.size} floats, header declares {layout.size}")
    return data.astype(DTYPE), layout, header["meta"]


def write_params(path, flat: np.ndarray, layout: Layout, meta: dict | None = None) -> None:
    Path(path).write_bytes(pack_params(flat, layout, meta))


def read_params(path) -> tuple[np.ndarray, Layout, dict]:
    return unpack_params(Path(path).read_bytes())
