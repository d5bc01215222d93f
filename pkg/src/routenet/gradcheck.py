"""Central finite-difference oracle for every analytic backward pass.

Each target builds a small randomized float64 instance, projects its outputs
onto a fixed random direction to get a scalar loss, and compares the analytic
input and parameter gradients with central differences.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops, routing
from .layers import (
    GAP, BatchNorm, CCRouterNode, Conv, CPRouterNode, Dense, Flatten, LAYER_KINDS, MaxPool, MergeNode,
    NODE_KINDS, PathwiseNode, ReLU, ResBlock, Sequential,
)
from .ops import BatchNormParams, ConvParams, DenseParams
from .routing import CrossConnectionRouter, CrossPredictionRouter, GateUnit
from .tensor import Rng, precision, softmax_jacobian

LINEAR_TOL = 1e-5
NONLINEAR_TOL = 1e-3
FROZEN_TOL = 1e-6
DEFAULT_H = 1e-4


class NonFiniteError(FloatingPointError):
    pass


def fd_gradient(f, theta, h: float = DEFAULT_H):
    """Central differences of scalar ``f(theta)`` w.r.t. every coordinate of ``theta``.

    ``theta`` is perturbed in place and restored, so ``f`` may also read it
    through a closure (the usual case when ``theta`` is a layer weight).
    """
    if not isinstance(theta, np.ndarray):
        theta = np.array(theta, dtype=np.float64)
    if theta.dtype != np.float64:
        raise TypeError("finite differences need float64 parameters")
    if not theta.flags.c_contiguous:
        raise ValueError("theta must be C-contiguous so it can be perturbed in place")
    flat = theta.reshape(-1)
    grad = np.zeros(flat.size)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        fp = f(theta)
        flat[k] = old - h
        fm = f(theta)
        flat[k] = old
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError(f"objective is non-finite at coordinate {k}")
        grad[k] = (fp - fm) / (2 * h)
    return grad.reshape(theta.shape)


def rel_error(a, f):
    a, f = np.asarray(a, dtype=np.float64), np.asarray(f, dtype=np.float64)
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-8)


@dataclass
class TensorError:
    max_rel: float
    max_abs: float
    worst_index: tuple
    trial: int


@dataclass
class GradReport:
    target: str
    threshold: float
    trials: int
    errors: dict = field(default_factory=dict)  # tensor name -> TensorError (worst over trials)
    trial_passed: list = field(default_factory=list)
    skipped_kinks: int = 0

    @property
    def passed(self) -> bool:
        return all(self.trial_passed)

    @property
    def max_rel(self) -> float:
        return max((e.max_rel for e in self.errors.values()), default=0.0)

    def failures(self):
        return {k: e for k, e in self.errors.items() if e.max_rel > self.threshold}

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        lines = [f"{self.target}: {status} ({sum(self.trial_passed)}/{self.trials} trials, "
                 f"max rel {self.max_rel:.3e}, threshold {self.threshold:g})"]
        worst = sorted(self.errors.items(), key=lambda kv: -kv[1].max_rel)
        for name, e in worst if not self.passed else worst[:3]:
            flag = "  !" if e.max_rel > self.threshold else "   "
            lines.append(f"{flag} {name:<28} rel {e.max_rel:.3e} abs {e.max_abs:.3e} at {e.worst_index} (trial {e.trial})")
        if self.skipped_kinks:
            lines.append(f"   {self.skipped_kinks} coordinate(s) skipped at ReLU/max kinks")
        return "\n".join(lines)


@dataclass
class Instance:
    inputs: list
    params: dict
    loss: object  # () -> float
    analytic: object  # () -> (list of input grads, dict of param grads)
    threshold: float


def _project(obj, inputs, rng: Rng, bundle: bool, threshold, train=True):
    """Random-projection loss L = sum_k <R_k, out_k> around a layer or node."""
    with precision("float64"):
        outs = obj.forward(inputs if bundle else inputs[0], train)
    outs = outs if bundle else [outs]
    rs = [rng.child(99, k).normal(o.shape, 1.0, np.float64) for k, o in enumerate(outs)]

    def loss():
        o = obj.forward(inputs if bundle else inputs[0], train)
        o = o if bundle else [o]
        return float(sum((r * y).sum() for r, y in zip(rs, o)))

    def analytic():
        obj.forward(inputs if bundle else inputs[0], train)
        g = obj.backward(rs if bundle else rs[0])
        return (g if bundle else [g]), dict(obj.grads)

    return Instance(inputs, obj.params(), loss, analytic, threshold)


class _GateAdapter:
    """gate_fwd/gate_bwd behind the layer interface."""

    def __init__(self, unit):
        self.unit = unit
        self.grads = {}

    def params(self):
        return self.unit.params()

    def forward(self, x, train=True):
        g, self.cache = routing.gate_fwd(x, self.unit)
        return g

    def backward(self, g):
        gx, self.grads = routing.gate_bwd(g, self.cache)
        return gx


class _XentAdapter:
    def __init__(self, labels):
        self.labels = labels
        self.grads = {}

    def params(self):
        return {}

    def forward(self, x, train=True):
        loss, self.cache = ops.softmax_xent_loss(x, self.labels)
        return np.array([loss])

    def backward(self, g):
        return self.cache * g[0]


def _x(rng, *shape, offset=0.0, scale=1.0):
    return rng.normal(shape, scale, np.float64) + offset


def _gate_unit(rng, c, n, sensitive, simplified=False, k=None):
    if simplified:
        return GateUnit.init_simplified(rng, k, n, scale=3.0 if sensitive else 1.0)
    u = GateUnit.init(rng, c, n, hidden=4)
    u.b1 = rng.child(5).normal(u.b1.shape, 0.5, np.float64)
    u.b2 = rng.child(6).normal(u.b2.shape, 0.5, np.float64)
    if sensitive:
        u.w1, u.w2 = u.w1 * 2.0, u.w2 * 2.0
    return u


def _spaced(rng, shape):
    """Values with distinct magnitudes >= 0.05 apart: no ReLU or max ties near a kink."""
    n = int(np.prod(shape))
    vals = (np.arange(n) - n / 2 + 0.5) * (4.0 / n) + np.sign(np.arange(n) - n / 2 + 0.5) * 0.05
    return vals[rng.permutation(n)].reshape(shape)


def _instance(target, rng: Rng, sensitive=False, mask_gate_path=False) -> Instance:
    B = 3
    if target == "gate":
        u = _gate_unit(rng.child(1), 4, 3, sensitive)
        x = _x(rng.child(2), B, 3, 3, 4, offset=1.0 if sensitive else 0.0)
        return _project(_GateAdapter(u), [x], rng, False, NONLINEAR_TOL)
    if target == "gate_dense":
        u = _gate_unit(rng.child(1), 5, 2, sensitive)
        return _project(_GateAdapter(u), [_x(rng.child(2), B, 5)], rng, False, NONLINEAR_TOL)
    if target == "gate_simplified":
        u = _gate_unit(rng.child(1), None, 3, sensitive, simplified=True, k=12)
        return _project(_GateAdapter(u), [_x(rng.child(2), B, 2, 2, 3)], rng, False, NONLINEAR_TOL)
    if target in ("cc_router", "cc_router_3path", "cc_router_frozen", "cc_router_simplified", "connector"):
        m, n, C = {"connector": (1, 3, 3), "cc_router_3path": (3, 3, 2)}.get(target, (2, 2, 3))
        frozen = target == "cc_router_frozen"
        if target == "cc_router_simplified":
            gates = [_gate_unit(rng.child(1, i), None, n, sensitive, True, k=2 * 2 * C) for i in range(m)]
        else:
            gates = [_gate_unit(rng.child(1, i), C, n, sensitive) for i in range(m)]
        node = CCRouterNode(CrossConnectionRouter(gates, n, frozen))
        node.mask_gate_path = mask_gate_path
        off = 1.0 if sensitive else 0.0
        xs = [_x(rng.child(2, i), B, 2, 2, C, offset=off * (i + 1)) for i in range(m)]
        return _project(node, xs, rng, True, FROZEN_TOL if frozen else NONLINEAR_TOL)
    if target in ("cp_router", "cp_router_dense"):
        m, n = 2, 2
        if target == "cp_router":
            r = CrossPredictionRouter.init_conv(rng.child(1), m, n, 2, 3, hidden=4)
            xs = [_x(rng.child(2, i), B, 3, 3, 2, offset=0.5 if sensitive else 0.0) for i in range(m)]
        else:
            r = CrossPredictionRouter.init_dense(rng.child(1), m, n, 4, 3, hidden=4)
            xs = [_x(rng.child(2, i), B, 4, offset=0.5 if sensitive else 0.0) for i in range(m)]
        for row in r.predictions:
            for p in row:
                p.bias = rng.child(3).normal(p.bias.shape, 0.3, np.float64)
        for i, u in enumerate(r.gates):
            r.gates[i] = _gate_unit(rng.child(4, i), u.channels, n, sensitive)
        node = CPRouterNode(r)
        node.mask_gate_path = mask_gate_path
        return _project(node, xs, rng, True, NONLINEAR_TOL)
    if target in ("conv", "conv_strided", "conv_valid"):
        stride = 2 if target == "conv_strided" else 1
        pad = "valid" if target == "conv_valid" else "same"
        p = ConvParams.init(rng.child(1), 2, 3, 3, stride, pad)
        p.bias = rng.child(3).normal((3,), 0.3, np.float64)
        return _project(Conv(p), [_x(rng.child(2), 2, 5, 5, 2)], rng, False, LINEAR_TOL)
    if target == "dense":
        p = DenseParams.init(rng.child(1), 5, 4)
        p.bias = rng.child(3).normal((4,), 0.3, np.float64)
        return _project(Dense(p), [_x(rng.child(2), B, 5)], rng, False, LINEAR_TOL)
    if target == "relu":
        return _project(ReLU(), [_spaced(rng.child(2), (B, 3, 3, 2))], rng, False, LINEAR_TOL)
    if target == "maxpool":
        return _project(MaxPool(), [_spaced(rng.child(2), (2, 4, 5, 2))], rng, False, LINEAR_TOL)
    if target == "flatten":
        return _project(Flatten(), [_x(rng.child(2), B, 2, 2, 3)], rng, False, LINEAR_TOL)
    if target == "gap":
        return _project(GAP(), [_x(rng.child(2), B, 3, 4, 2)], rng, False, LINEAR_TOL)
    if target in ("bn", "bn_eval"):
        p = BatchNormParams.init(3)
        p.gamma = 1.0 + rng.child(1).normal((3,), 0.3, np.float64)
        p.beta = rng.child(3).normal((3,), 0.3, np.float64)
        layer = BatchNorm(p)
        x = _x(rng.child(2), 4, 2, 2, 3, offset=0.5)
        if target == "bn_eval":
            layer.forward(_x(rng.child(4), 4, 2, 2, 3), True)
            return _project(layer, [x], rng, False, LINEAR_TOL, train=False)
        return _project(layer, [x], rng, False, NONLINEAR_TOL)
    if target in ("resblock", "resblock_projection"):
        cout = 3 if target == "resblock_projection" else 2
        stride = 2 if target == "resblock_projection" else 1
        blk = ResBlock(rng.child(1), 2, cout, stride)
        return _project(blk, [_x(rng.child(2), 4, 4, 4, 2)], rng, False, NONLINEAR_TOL)
    if target == "sequential":
        seq = Sequential([Dense(DenseParams.init(rng.child(1), 4, 5)), ReLU(), Dense(DenseParams.init(rng.child(3), 5, 3))])
        return _project(seq, [_x(rng.child(2), B, 4)], rng, False, NONLINEAR_TOL)
    if target == "pathwise":
        node = PathwiseNode([Dense(DenseParams.init(rng.child(1, k), 4, 3)) for k in range(2)], "dense")
        return _project(node, [_x(rng.child(2, k), B, 4) for k in range(2)], rng, True, LINEAR_TOL)
    if target == "merge":
        return _project(MergeNode(3), [_x(rng.child(2, k), B, 4) for k in range(3)], rng, True, LINEAR_TOL)
    if target == "xent":
        labels = rng.integers(0, 4, size=B)
        return _project(_XentAdapter(labels), [_x(rng.child(2), B, 4, scale=2.0)], rng, False, NONLINEAR_TOL)
    if target == "full_micro_net":
        return _micro_net(rng, sensitive, mask_gate_path)
    raise ValueError(f"unknown gradcheck target {target!r}; expected one of {TARGETS}")


def micro_net_spec(seed=0):
    from .model import ArchSpec
    layers = [
        {"kind": "connector", "paths": 2, "hidden": 4},
        {"kind": "conv", "filters": 3},
        {"kind": "cc", "hidden": 4},
        {"kind": "gap"},
        {"kind": "dense", "units": 3, "relu": False},
        {"kind": "merge"},
    ]
    return ArchSpec(family="custom", input=(4, 4, 2), classes=3, seed=seed, layers=layers)


def _micro_net(rng, sensitive, mask_gate_path):
    from .model import build
    with precision("float64"):
        g = build(micro_net_spec(int(rng.integers(0, 2**31))))
    for name, arr in g.named_params().items():
        if name.endswith(".b") or name.endswith(".b1") or name.endswith(".b2"):
            g.set_array(name, rng.child(7).normal(arr.shape, 0.3, np.float64))
        elif sensitive and ".gate" in name:
            g.set_array(name, arr * 2.0)
    for _, node in g.routers():
        node.mask_gate_path = mask_gate_path
    x = _x(rng.child(2), 3, 4, 4, 2, offset=0.5 if sensitive else 0.0)
    labels = rng.integers(0, 3, size=3)

    def loss():
        return ops.softmax_xent_loss(g.forward(x, True), labels)[0]

    def analytic():
        _, grad = ops.softmax_xent_loss(g.forward(x, True), labels)
        gx = g.backward(grad)
        return [gx], g.named_grads()

    return Instance([x], g.named_params(), loss, analytic, NONLINEAR_TOL)


# target -> layer/node kinds it certifies
TARGETS = {
    "gate": {"gate"},
    "gate_dense": {"gate"},
    "gate_simplified": {"gate"},
    "cc_router": {"cc_router"},
    "cc_router_3path": {"cc_router"},
    "cc_router_frozen": {"cc_router"},
    "cc_router_simplified": {"cc_router"},
    "connector": {"cc_router"},
    "cp_router": {"cp_router"},
    "cp_router_dense": {"cp_router"},
    "conv": {"conv"},
    "conv_strided": {"conv"},
    "conv_valid": {"conv"},
    "dense": {"dense"},
    "relu": {"relu"},
    "maxpool": {"maxpool"},
    "flatten": {"flatten"},
    "gap": {"gap"},
    "bn": {"bn"},
    "bn_eval": {"bn"},
    "resblock": {"resblock", "conv", "bn", "relu", "seq"},
    "resblock_projection": {"resblock", "conv", "bn", "relu", "seq"},
    "sequential": {"seq", "dense", "relu"},
    "pathwise": {"pathwise"},
    "merge": {"merge"},
    "xent": {"xent"},
    "full_micro_net": {"cc_router", "pathwise", "conv", "relu", "gap", "dense", "merge", "seq", "xent"},
}


def covered_kinds() -> set:
    return set().union(*TARGETS.values())


def registry_kinds() -> set:
    return set(LAYER_KINDS) | set(NODE_KINDS) | {"seq", "gate", "xent"}


def _compare(report, name, a, f, trial):
    rel = rel_error(a, f)
    idx = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else ()
    err = TensorError(float(rel.max(initial=0.0)), float(np.abs(a - f).max(initial=0.0)), tuple(int(i) for i in idx), trial)
    prev = report.errors.get(name)
    if prev is None or err.max_rel > prev.max_rel:
        report.errors[name] = err
    return err.max_rel


def _kink_filter(inst, theta, a, f, thr, h):
    """Drop coordinates whose central difference is not stable under h -> h/4 (a kink was crossed)."""
    rel = rel_error(a, f)
    bad = np.flatnonzero(rel > thr)
    keep = np.ones(a.size, bool)
    flat = theta.reshape(-1)
    for k in bad:
        old = flat[k]
        vals = []
        for hh in (h / 4,):
            flat[k] = old + hh
            fp = inst.loss()
            flat[k] = old - hh
            fm = inst.loss()
            flat[k] = old
            vals.append((fp - fm) / (2 * hh))
        if rel_error(vals[0], f.reshape(-1)[k]) > thr:
            keep[k] = False
    return keep.reshape(a.shape)


def check_module(target: str, trials: int = 5, seed: int = 0, *, h: float = DEFAULT_H,
                 mask_gate_path: bool = False, sensitive: bool = False) -> GradReport:
    """Randomized analytic-vs-numeric gradient comparison for one target."""
    if target not in TARGETS:
        raise ValueError(f"unknown gradcheck target {target!r}; expected one of {sorted(TARGETS)}")
    report = None
    with precision("float64"):
        for t in range(trials):
            inst = _instance(target, Rng(seed, (t,)), sensitive=sensitive, mask_gate_path=mask_gate_path)
            report = report or GradReport(target, inst.threshold, trials)
            gx, gp = inst.analytic()
            ok = True
            tensors = [(f"input{k}", x, g) for k, (x, g) in enumerate(zip(inst.inputs, gx))]
            tensors += [(name, arr, gp.get(name, np.zeros_like(arr))) for name, arr in inst.params.items()]
            for name, theta, a in tensors:
                f = fd_gradient(lambda _: inst.loss(), theta, h)
                if report.threshold >= NONLINEAR_TOL:
                    keep = _kink_filter(inst, theta, a, f, report.threshold, h)
                    report.skipped_kinks += int((~keep).sum())
                    a, f = np.where(keep, a, 0.0), np.where(keep, f, 0.0)
                ok &= _compare(report, name, a, f, t) <= report.threshold
            report.trial_passed.append(bool(ok))
    return report


def simplified_gate_formula_check(seed: int = 0) -> dict:
    """Recompute the single-FC-gate cross-connection gradients from their closed forms.

    For one sample with flattened inputs x_i (length k), gate logits a_i = W^i x_i
    (W^i is n x k), g_i = softmax(a_i) and outputs y_j = sum_i g_ij x_i:

        dL/dg_ij = <dL/dy_j, x_i>
        dL/dW^i  = J_i^T (dL/dg_i) x_i^T
        dL/dx_i  = sum_j g_ij dL/dy_j + W^i^T J_i^T dL/dg_i

    Returns the max absolute differences against the implementation.
    """
    rng = Rng(seed)
    m, n, shape = 2, 3, (2, 2, 3)
    k = int(np.prod(shape))
    with precision("float64"):
        gates = [GateUnit.init_simplified(rng.child(1, i), k, n, scale=2.0) for i in range(m)]
        r = CrossConnectionRouter(gates, n)
        xs = [rng.child(2, i).normal((1,) + shape, 1.0, np.float64) for i in range(m)]
        gys = [rng.child(3, j).normal((1,) + shape, 1.0, np.float64) for j in range(n)]
        ys, cache = routing.cc_router_fwd(xs, r)
        gxs, ggs = routing.cc_router_bwd(gys, cache)
    diff_w, diff_x, diff_y = 0.0, 0.0, 0.0
    xv = [x.reshape(-1) for x in xs]
    gyv = [g.reshape(-1) for g in gys]
    g_all = []
    for i in range(m):
        W = gates[i].w1.T  # n x k
        a = W @ xv[i]
        e = np.exp(a - a.max())
        g_all.append(e / e.sum())
    for j in range(n):
        y = sum(g_all[i][j] * xv[i] for i in range(m))
        diff_y = max(diff_y, float(np.abs(y - ys[j].reshape(-1)).max()))
    for i in range(m):
        W = gates[i].w1.T
        J = softmax_jacobian(g_all[i])
        dg = np.array([gyv[j] @ xv[i] for j in range(n)])
        dW = np.outer(J.T @ dg, xv[i])
        dx = sum(g_all[i][j] * gyv[j] for j in range(n)) + W.T @ (J.T @ dg)
        diff_w = max(diff_w, float(np.abs(dW - ggs[i]["w1"].T).max()))
        diff_x = max(diff_x, float(np.abs(dx - gxs[i].reshape(-1)).max()))
    return {"forward": diff_y, "grad_W": diff_w, "grad_X": diff_x}
