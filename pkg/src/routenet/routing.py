"""Data-dependent routing between bundles of parallel tensors.

A gate unit turns one input tensor X_i into routing probabilities
G_i = softmax(W2 relu(W1 gap(X_i) + b1) + b2) over the n outputs, computed
per sample. Two router kinds consume the gates:

* cross-prediction: every input makes a conv/dense prediction U_ij for every
  output, and Y_j = relu(sum_i g_ij U_ij);
* cross-connection: inputs are mixed directly, Y_j = sum_i g_ij X_i.

Backward passes are written out by hand. For cross-connections the input
gradient has two parts: the gated direct term sum_j g_ij dL/dY_j and the
term that flows back through the gate computation of X_i.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .ops import ConvParams, DenseParams, MissingCacheError
from .tensor import Rng, get_dtype, softmax


def se_hidden_width(channels: int, ratio: int = 16, floor: int = 4) -> int:
    """Squeeze-excitation style reduction: max(ceil(C / ratio), floor)."""
    return max(math.ceil(channels / ratio), floor)


@dataclass
class GateUnit:
    """Gate parameters for one input tensor.

    In the default two-layer form ``w1`` is C x Hd and ``w2`` is Hd x n.
    With ``simplified=True`` there is no pooling and no hidden layer: the
    flattened input (length k) is mapped by ``w1`` (k x n) straight to the
    logits, matching the single-FC derivation of the cross-connection gradient.
    """

    w1: np.ndarray
    b1: np.ndarray | None
    w2: np.ndarray | None
    b2: np.ndarray | None
    simplified: bool = False

    @classmethod
    def init(cls, rng: Rng, channels: int, n: int, hidden: int | None = None, bias: bool = True):
        hidden = se_hidden_width(channels) if hidden is None else hidden
        dt = get_dtype()
        w1 = rng.child(0).normal((channels, hidden), math.sqrt(2.0 / channels))
        w2 = rng.child(1).normal((hidden, n), math.sqrt(2.0 / hidden))
        b1 = np.zeros(hidden, dtype=dt) if bias else None
        b2 = np.zeros(n, dtype=dt) if bias else None
        return cls(w1, b1, w2, b2)

    @classmethod
    def init_simplified(cls, rng: Rng, k: int, n: int, scale: float = 1.0):
        return cls(rng.normal((k, n), scale / math.sqrt(k)), None, None, None, simplified=True)

    @property
    def channels(self) -> int:
        return self.w1.shape[0]

    @property
    def n(self) -> int:
        return self.w1.shape[1] if self.simplified else self.w2.shape[1]

    def slots(self):
        names = ("w1",) if self.simplified else ("w1", "b1", "w2", "b2")
        return [nm for nm in names if getattr(self, nm) is not None]

    def params(self) -> dict:
        return {nm: getattr(self, nm) for nm in self.slots()}

    def n_params(self) -> int:
        return sum(a.size for a in self.params().values())

    def zeroed(self) -> "GateUnit":
        z = {nm: (None if a is None else np.zeros_like(a)) for nm, a in
             (("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2))}
        return GateUnit(z["w1"], z["b1"], z["w2"], z["b2"], self.simplified)


def _descriptor(x: np.ndarray, unit: GateUnit):
    if unit.simplified:
        return x.reshape(x.shape[0], -1), None
    if x.ndim == 4:
        return ops.global_avg_pool(x)
    if x.ndim == 2:
        return x, None
    raise ValueError(f"gate input must be B x H x W x C or B x C, got shape {x.shape}")


def gate_logits(x: np.ndarray, unit: GateUnit):
    """Pre-softmax relevance scores A (B x n) and the cache for ``gate_bwd``."""
    z, gap_cache = _descriptor(x, unit)
    if z.shape[1] != unit.channels:
        raise ValueError(f"gate expects {unit.channels} input channels, got {z.shape[1]}")
    if unit.simplified:
        a = z @ unit.w1
        return a, {"unit": unit, "z": z, "gap": gap_cache, "xshape": x.shape}
    pre = z @ unit.w1
    if unit.b1 is not None:
        pre = pre + unit.b1
    h = np.maximum(pre, 0)
    a = h @ unit.w2
    if unit.b2 is not None:
        a = a + unit.b2
    return a, {"unit": unit, "z": z, "gap": gap_cache, "pre": pre, "h": h, "xshape": x.shape}


def gate_fwd(x: np.ndarray, unit: GateUnit):
    """Gate probabilities G for a batch (B x n), or for one sample given rank-1 / rank-3 input.

    Returns ``(G, cache)``.
    """
    single = x.ndim in (1, 3)
    xb = x[None] if single else x
    a, cache = gate_logits(xb, unit)
    g = softmax(a, axis=1)
    cache.update(a=a, g=g, single=single)
    return (g[0] if single else g), cache


def softmax_backward(g: np.ndarray, grad_g: np.ndarray) -> np.ndarray:
    """Row-wise J^T grad_g for J = diag(g) - g g^T (J is symmetric)."""
    return g * (grad_g - (grad_g * g).sum(axis=1, keepdims=True))


def gate_bwd(grad_g: np.ndarray, cache, *, grad_a: np.ndarray | None = None):
    """Back-propagate dL/dG (or dL/dA directly, via ``grad_a``) through the gate.

    Returns ``(grad_x, grads)`` where ``grads`` maps parameter names to arrays.
    """
    if cache is None:
        raise MissingCacheError("gate backward called without a forward cache")
    unit: GateUnit = cache["unit"]
    if grad_a is None:
        grad_g = grad_g[None] if cache.get("single") else grad_g
        grad_a = softmax_backward(cache["g"], grad_g)
    z = cache["z"]
    grads = {}
    if unit.simplified:
        grads["w1"] = z.T @ grad_a
        grad_z = grad_a @ unit.w1.T
    else:
        grads["w2"] = cache["h"].T @ grad_a
        if unit.b2 is not None:
            grads["b2"] = grad_a.sum(axis=0)
        grad_pre = (grad_a @ unit.w2.T) * (cache["pre"] > 0)
        grads["w1"] = z.T @ grad_pre
        if unit.b1 is not None:
            grads["b1"] = grad_pre.sum(axis=0)
        grad_z = grad_pre @ unit.w1.T
    grad_z = grad_z.astype(z.dtype, copy=False)
    xshape = cache["xshape"]
    if unit.simplified:
        grad_x = grad_z.reshape(xshape)
    elif cache["gap"] is not None:
        grad_x = ops.global_avg_pool_bwd(grad_z, cache["gap"])
    else:
        grad_x = grad_z
    if cache.get("single"):
        grad_x = grad_x[0]
    return grad_x, grads


def _bcast(col: np.ndarray, ndim: int) -> np.ndarray:
    return col.reshape(col.shape + (1,) * (ndim - 1))


def _stack_gates(xs, gates, n, frozen):
    B = xs[0].shape[0]
    if frozen:
        uni = np.full((B, n), 1.0 / n, dtype=xs[0].dtype)
        return [uni] * len(xs), [None] * len(xs)
    out, caches = [], []
    for x, unit in zip(xs, gates):
        if unit.n != n:
            raise ValueError(f"gate produces {unit.n} outputs, router has {n}")
        g, c = gate_fwd(x, unit)
        out.append(g)
        caches.append(c)
    return out, caches


class CrossConnectionRouter:
    """m -> n router that mixes its inputs with per-sample gates. No prediction weights.

    ``frozen=True`` pins every gate to 1/n and drops the gate parameters
    (static uniform cross-connections, used as an ablation).
    """

    def __init__(self, gates: list[GateUnit], n: int, frozen: bool = False):
        if n < 1 or len(gates) < 1:
            raise ValueError("router needs m >= 1 inputs and n >= 1 outputs")
        self.gates = list(gates)
        self.n = n
        self.frozen = frozen

    @classmethod
    def init(cls, rng: Rng, m: int, n: int, channels: int, hidden=None, frozen=False, bias=True):
        return cls([GateUnit.init(rng.child(i), channels, n, hidden, bias) for i in range(m)], n, frozen)

    @property
    def m(self) -> int:
        return len(self.gates)

    def params(self) -> dict:
        if self.frozen:
            return {}
        return {f"gate{i}.{k}": v for i, u in enumerate(self.gates) for k, v in u.params().items()}

    def n_params(self) -> int:
        return sum(a.size for a in self.params().values())


def cc_router_fwd(xs, r: CrossConnectionRouter):
    if len(xs) != r.m:
        raise ValueError(f"router expects {r.m} inputs, got {len(xs)}")
    shape = xs[0].shape
    for x in xs[1:]:
        if x.shape != shape:
            raise ValueError(f"cross-connection inputs must share one shape: {shape} vs {x.shape}")
    gs, gcaches = _stack_gates(xs, r.gates, r.n, r.frozen)
    nd = len(shape)
    ys = []
    for j in range(r.n):
        y = _bcast(gs[0][:, j], nd) * xs[0]
        for i in range(1, r.m):
            y = y + _bcast(gs[i][:, j], nd) * xs[i]
        ys.append(y)
    return ys, {"xs": xs, "g": gs, "gate_caches": gcaches, "r": r}


def cc_router_bwd(grad_ys, cache, *, mask_gate_path: bool = False):
    """Returns ``(grad_xs, grad_gates)``; ``grad_gates[i]`` is a dict of gate-unit grads.

    ``mask_gate_path`` drops the term that flows back through the gate
    computation, keeping only sum_j g_ij dL/dY_j (for ablation checks).
    """
    if cache is None:
        raise MissingCacheError("cc_router backward called without a forward cache")
    r: CrossConnectionRouter = cache["r"]
    xs, gs = cache["xs"], cache["g"]
    if len(grad_ys) != r.n:
        raise ValueError(f"expected {r.n} output grads, got {len(grad_ys)}")
    nd = xs[0].ndim
    axes = tuple(range(1, nd))
    grad_xs, grad_gates = [], []
    for i in range(r.m):
        gx = _bcast(gs[i][:, 0], nd) * grad_ys[0]
        for j in range(1, r.n):
            gx = gx + _bcast(gs[i][:, j], nd) * grad_ys[j]
        if r.frozen:
            grad_gates.append({})
        else:
            # dL/dg_ij = sum over elements of dL/dY_j * X_i, per sample
            grad_g = np.stack([(grad_ys[j] * xs[i]).sum(axis=axes) for j in range(r.n)], axis=1)
            gxi, gp = gate_bwd(grad_g, cache["gate_caches"][i])
            if not mask_gate_path:
                gx = gx + gxi
            grad_gates.append(gp)
        grad_xs.append(gx)
    return grad_xs, grad_gates


def one_to_many(x: np.ndarray, r: CrossConnectionRouter):
    """Split one tensor across n paths: Y_j = g_1j X."""
    if r.m != 1:
        raise ValueError(f"one-to-many connector needs m=1, router has m={r.m}")
    return cc_router_fwd([x], r)


class CrossPredictionRouter:
    """m -> n router where input i predicts every output j with its own conv/dense op."""

    def __init__(self, predictions: list[list], gates: list[GateUnit]):
        if len(predictions) != len(gates) or not predictions:
            raise ValueError("need one prediction row and one gate unit per input")
        n = len(predictions[0])
        if any(len(row) != n for row in predictions):
            raise ValueError("prediction grid must be m x n")
        kinds = {type(p) for row in predictions for p in row}
        if len(kinds) != 1 or kinds.pop() not in (ConvParams, DenseParams):
            raise ValueError("predictions must all be ConvParams or all DenseParams")
        self.predictions = predictions
        self.gates = list(gates)

    @classmethod
    def init_conv(cls, rng: Rng, m, n, cin, cout, hidden=None, stride=1, bias=True):
        preds = [[ConvParams.init(rng.child(0, i, j), cin, cout, 3, stride) for j in range(n)] for i in range(m)]
        gates = [GateUnit.init(rng.child(1, i), cin, n, hidden, bias) for i in range(m)]
        return cls(preds, gates)

    @classmethod
    def init_dense(cls, rng: Rng, m, n, n_in, n_out, hidden=None, bias=True):
        preds = [[DenseParams.init(rng.child(0, i, j), n_in, n_out) for j in range(n)] for i in range(m)]
        gates = [GateUnit.init(rng.child(1, i), n_in, n, hidden, bias) for i in range(m)]
        return cls(preds, gates)

    @property
    def m(self):
        return len(self.gates)

    @property
    def n(self):
        return len(self.predictions[0])

    @property
    def is_conv(self):
        return isinstance(self.predictions[0][0], ConvParams)

    def params(self) -> dict:
        out = {}
        for i, row in enumerate(self.predictions):
            for j, p in enumerate(row):
                out[f"pred{i}_{j}.w"] = p.weights
                if p.bias is not None:
                    out[f"pred{i}_{j}.b"] = p.bias
        for i, u in enumerate(self.gates):
            for k, v in u.params().items():
                out[f"gate{i}.{k}"] = v
        return out

    def n_params(self) -> int:
        return sum(a.size for a in self.params().values())

    def prediction_params(self) -> int:
        return sum(p.n_params() for row in self.predictions for p in row)


def _fused(row):
    """All n predictions of one input as a single op (shared im2col)."""
    p0 = row[0]
    bias = None if p0.bias is None else np.concatenate([p.bias for p in row])
    if isinstance(p0, ConvParams):
        return ConvParams(np.concatenate([p.weights for p in row], axis=3), bias, p0.stride, p0.padding)
    return DenseParams(np.concatenate([p.weights for p in row], axis=1), bias)


def cp_router_fwd(xs, r: CrossPredictionRouter):
    if len(xs) != r.m:
        raise ValueError(f"router expects {r.m} inputs, got {len(xs)}")
    gs, gcaches = _stack_gates(xs, r.gates, r.n, False)
    us, pcaches = [], []
    for x, row in zip(xs, r.predictions):
        fp = _fused(row)
        out, c = ops.conv2d_fwd(x, fp) if r.is_conv else ops.dense_fwd(x, fp)
        us.append(np.split(out, r.n, axis=-1))
        pcaches.append(c)
    shape = us[0][0].shape
    nd = len(shape)
    ss, ys = [], []
    for j in range(r.n):
        s = _bcast(gs[0][:, j], nd) * us[0][j]
        for i in range(1, r.m):
            if us[i][j].shape != shape:
                raise ValueError("cross-predictions must share one output shape")
            s = s + _bcast(gs[i][:, j], nd) * us[i][j]
        ss.append(s)
        ys.append(np.maximum(s, 0))
    return ys, {"xs": xs, "u": us, "s": ss, "g": gs, "gate_caches": gcaches, "pred_caches": pcaches, "r": r}


def cp_router_bwd(grad_ys, cache, *, mask_gate_path: bool = False):
    """Returns ``(grad_xs, grad_predictions, grad_gates)``.

    ``grad_predictions[i][j]`` is ``(grad_w, grad_b)`` for prediction op (i, j).
    """
    if cache is None:
        raise MissingCacheError("cp_router backward called without a forward cache")
    r: CrossPredictionRouter = cache["r"]
    if len(grad_ys) != r.n:
        raise ValueError(f"expected {r.n} output grads, got {len(grad_ys)}")
    us, gs = cache["u"], cache["g"]
    nd = us[0][0].ndim
    axes = tuple(range(1, nd))
    grad_s = [grad_ys[j] * (cache["s"][j] > 0) for j in range(r.n)]
    grad_xs, grad_preds, grad_gates = [], [], []
    for i in range(r.m):
        grad_u = np.concatenate([_bcast(gs[i][:, j], nd) * grad_s[j] for j in range(r.n)], axis=-1)
        if r.is_conv:
            gx, gw, gb = ops.conv2d_bwd(grad_u, cache["pred_caches"][i])
            gws = np.split(gw, r.n, axis=3)
        else:
            gx, gw, gb = ops.dense_bwd(grad_u, cache["pred_caches"][i])
            gws = np.split(gw, r.n, axis=1)
        gbs = np.split(gb, r.n) if gb is not None else [None] * r.n
        grad_preds.append(list(zip(gws, gbs)))
        grad_g = np.stack([(grad_s[j] * us[i][j]).sum(axis=axes) for j in range(r.n)], axis=1)
        gxi, gp = gate_bwd(grad_g, cache["gate_caches"][i])
        if not mask_gate_path:
            gx = gx + gxi
        grad_xs.append(gx)
        grad_gates.append(gp)
    return grad_xs, grad_preds, grad_gates


def merge_average(xs):
    if len(xs) == 0:
        raise ValueError("merge_average of an empty bundle")
    shape = xs[0].shape
    out = xs[0]
    for x in xs[1:]:
        if x.shape != shape:
            raise ValueError(f"merge inputs must share one shape: {shape} vs {x.shape}")
        out = out + x
    return out / len(xs)


def merge_average_bwd(grad, m: int):
    g = grad / m
    return [g] * m
