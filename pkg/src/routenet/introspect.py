"""Routing traces, gate maximization and histograms over a built graph."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from . import routing
from .layers import CCRouterNode, CPRouterNode, PathwiseNode
from .model import NetworkGraph
from .tensor import Rng, precision

GATE_BINS = 20


class DeadGateError(RuntimeError):
    pass


@dataclass(frozen=True)
class GateAddress:
    layer_id: str
    i: int
    j: int

    @classmethod
    def parse(cls, text: str) -> "GateAddress":
        """``layer:i:j`` such as ``cc2:0:1`` or ``04.cc2:0:1``."""
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"gate address must look like layer:i:j, got {text!r}")
        return cls(parts[0], int(parts[1]), int(parts[2]))

    def __str__(self):
        return f"{self.layer_id}:{self.i}:{self.j}"


def resolve_router(graph: NetworkGraph, layer_id: str):
    """(node index, full name, node) for a router given its full name or short label."""
    for k, (name, node) in enumerate(zip(graph.node_names, graph.nodes)):
        if isinstance(node, (CCRouterNode, CPRouterNode)) and layer_id in (name, node.label):
            return k, name, node
    raise KeyError(f"no router {layer_id!r}; routers are {[nm for nm, _ in graph.routers()]}")


def check_address(graph: NetworkGraph, addr: GateAddress):
    k, name, node = resolve_router(graph, addr.layer_id)
    if not (0 <= addr.i < node.m and 0 <= addr.j < node.n):
        raise ValueError(f"gate ({addr.i}, {addr.j}) is outside router {name} of size {node.m} x {node.n}")
    return k, name, node


def _batched(images):
    return images[None] if images.ndim == 3 else images


def collect_gates(graph: NetworkGraph, images, batch_size: int = 256) -> dict:
    """Eval-mode gate matrices: ``{layer_id: [G_i (N x n) for each input i]}``."""
    images = _batched(images)
    out = {name: [[] for _ in range(node.m)] for name, node in graph.routers()}
    with precision(graph.dtype):
        for s in range(0, len(images), batch_size):
            graph.forward(images[s: s + batch_size].astype(graph.dtype, copy=False), train=False)
            for name, node in graph.routers():
                for i, g in enumerate(node.cache["g"]):
                    out[name][i].append(g)
    return {name: [np.concatenate(parts) for parts in gl] for name, gl in out.items()}


# ---------------------------------------------------------------------------
# routing traces


@dataclass
class RoutingTrace:
    layer_id: str
    input_strengths: list
    gate_matrix: list  # row i = gates computed from input i
    output_strengths: list
    sample: int = 0

    def to_dict(self):
        return asdict(self)


def strengths(tensors) -> np.ndarray:
    """Mean absolute activation of each parallel tensor, normalized to sum to 1."""
    means = np.array([float(np.abs(t).mean()) for t in tensors])
    total = means.sum()
    if total == 0:
        return np.full(len(tensors), 1.0 / len(tensors))
    return means / total


def trace_routes(graph: NetworkGraph, image, sample: int = 0) -> list:
    """One ``RoutingTrace`` per router for a single image."""
    x = _batched(np.asarray(image))
    if len(x) != 1:
        raise ValueError("trace_routes takes a single image")
    traces = []
    with precision(graph.dtype):
        xs = [x.astype(graph.dtype, copy=False)]
        for name, node in zip(graph.node_names, graph.nodes):
            ys = node.forward(xs, train=False)
            if isinstance(node, (CCRouterNode, CPRouterNode)):
                gm = [g[0].tolist() for g in node.cache["g"]]
                traces.append(RoutingTrace(name, strengths(xs).tolist(), gm, strengths(ys).tolist(), sample))
            xs = ys
    return traces


# ---------------------------------------------------------------------------
# gate maximization


@dataclass
class MaximizeResult:
    image: np.ndarray  # H x W x C in the network's input coordinates
    history: list  # pre-softmax logit a_ij before each step and after the last
    address: GateAddress

    @property
    def improved(self) -> bool:
        return self.history[-1] > self.history[0]


def gate_logit_and_grad(graph: NetworkGraph, addr: GateAddress, x):
    """a_ij for a 1 x H x W x C input and its gradient w.r.t. that input."""
    k, name, node = check_address(graph, addr)
    if isinstance(node, CCRouterNode) and node.router.frozen:
        raise DeadGateError(f"router {name} has frozen uniform gates; there is no logit to maximize")
    xs = graph.forward(x, train=False, upto=k)
    unit = node.router.gates[addr.i]
    a, cache = routing.gate_logits(xs[addr.i], unit)
    grad_a = np.zeros_like(a)
    grad_a[:, addr.j] = 1.0
    gi, _ = routing.gate_bwd(None, cache, grad_a=grad_a)
    bundle = [np.zeros_like(t) for t in xs]
    bundle[addr.i] = gi
    gx = graph.backward(bundle, start=k) if k > 0 else bundle[0]
    return float(a[0, addr.j]), gx


def maximize_gate(graph: NetworkGraph, addr: GateAddress, steps: int = 256, step_size: float = 0.05,
                  l2: float = 1e-4, rng: Rng | None = None, valid_range=None, init_std: float = 0.1,
                  dead_patience: int = 10) -> MaximizeResult:
    """Gradient ascent on the input to maximize the pre-softmax gate logit a_ij.

    The l2 penalty is applied as a proximal step, x <- (x + step * grad) / (1 + step * l2),
    which agrees with the explicit update to first order and stays stable for
    large penalties. Pixels are clipped to ``valid_range`` (per-channel
    low/high arrays, default [0, 1]) after every step.
    """
    if steps < 0 or step_size <= 0 or l2 < 0:
        raise ValueError("need steps >= 0, step_size > 0 and l2 >= 0")
    rng = rng or Rng(0)
    H, W, C = graph.input_shape
    low, high = (np.zeros(C), np.ones(C)) if valid_range is None else (np.asarray(valid_range[0]), np.asarray(valid_range[1]))
    dt = graph.dtype
    with precision(dt):
        mid = (low + high) / 2
        x = np.clip(mid + rng.normal((1, H, W, C), init_std, np.float64), low, high).astype(dt)
        history = []
        zero_run = 0
        for step in range(steps):
            a, g = gate_logit_and_grad(graph, addr, x)
            history.append(a)
            if not np.any(g):
                zero_run += 1
                if zero_run >= dead_patience and step + 1 == zero_run:
                    raise DeadGateError(f"gate {addr} has zero input gradient for {zero_run} consecutive steps")
            else:
                zero_run = 0
            x = (x + step_size * g) / (1.0 + step_size * l2)
            x = np.clip(x, low, high).astype(dt)
        history.append(gate_logit_and_grad(graph, addr, x)[0])
    return MaximizeResult(x[0], history, addr)


def rank_by_gate(graph: NetworkGraph, images, addr: GateAddress, k: int = 10, batch_size: int = 256):
    """Indices of the ``k`` highest- and lowest-g_ij images."""
    _, name, _ = check_address(graph, addr)
    g = collect_gates(graph, images, batch_size)[name][addr.i][:, addr.j]
    order = np.argsort(-g, kind="stable")
    return order[:k], order[::-1][:k]


# ---------------------------------------------------------------------------
# histograms


@dataclass
class HistogramReport:
    kind: str  # "gate" or "weight"
    key: str  # gate address or layer name
    edges: list
    counts: dict  # class name or path index -> per-bin counts
    means: dict = field(default_factory=dict)

    def total(self, group) -> int:
        return int(sum(self.counts[group]))

    def to_dict(self):
        return asdict(self)


def gate_histograms(graph: NetworkGraph, ds, addrs, bins: int = GATE_BINS, batch_size: int = 256) -> list:
    """Per-class histograms of g_ij over ``ds`` (eval mode), 20 bins on [0, 1] by default."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    gates = collect_gates(graph, ds.images, batch_size)
    reports = []
    for addr in addrs:
        _, name, _ = check_address(graph, addr)
        g = gates[name][addr.i][:, addr.j]
        counts, means = {}, {}
        for c, cname in enumerate(ds.class_names):
            gc = g[ds.labels == c]
            counts[cname] = np.histogram(gc, bins=edges)[0].astype(int).tolist()
            means[cname] = float(gc.mean()) if gc.size else float("nan")
        reports.append(HistogramReport("gate", f"{name}:{addr.i}:{addr.j}", edges.tolist(), counts, means))
    return reports


def path_weights(graph: NetworkGraph) -> dict:
    """``{layer name: [flat weight vector per path]}`` for layers with parallel weighted paths."""
    out = {}
    for name, node in zip(graph.node_names, graph.nodes):
        if isinstance(node, PathwiseNode) and node.m > 1 and node.params():
            per = [np.concatenate([v.ravel() for k, v in sorted(p.params().items()) if k.endswith("w")] or [np.zeros(0)])
                   for p in node.paths]
            if per[0].size:
                out[name] = per
        elif isinstance(node, CPRouterNode) and node.m > 1:
            out[name] = [np.concatenate([p.weights.ravel() for p in row]) for row in node.router.predictions]
    return out


def ks_statistic(a, b):
    """Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value."""
    r = stats.ks_2samp(a, b, method="asymp")
    return float(r.statistic), float(r.pvalue)


def ks_critical(n: int, m: int, alpha: float = 0.01) -> float:
    """Asymptotic two-sample KS critical value c(alpha) * sqrt((n + m) / (n m))."""
    c = np.sqrt(-0.5 * np.log(alpha / 2))
    return float(c * np.sqrt((n + m) / (n * m)))


def weight_histograms(graph: NetworkGraph, layers=None, bins: int = 50) -> list:
    """Per-path weight histograms over a range shared by the paths, symmetric about 0."""
    reports = []
    for name, per in path_weights(graph).items():
        if layers is not None and name not in layers and name.split(".", 1)[1] not in layers:
            continue
        r = max(float(np.abs(w).max()) for w in per) or 1.0
        edges = np.linspace(-r, r, bins + 1)
        counts = {str(p): np.histogram(w, bins=edges)[0].astype(int).tolist() for p, w in enumerate(per)}
        means = {str(p): float(w.mean()) for p, w in enumerate(per)}
        rep = HistogramReport("weight", name, edges.tolist(), counts, means)
        if len(per) >= 2:
            rep.means["ks_0_1"], rep.means["ks_pvalue_0_1"] = ks_statistic(per[0], per[1])
        reports.append(rep)
    return reports


# ---------------------------------------------------------------------------
# output files


def write_records(path, records, fmt: str = "structured"):
    """One record per line (JSON lines) or CSV with nested fields JSON-encoded."""
    rows = [r.to_dict() if hasattr(r, "to_dict") else dict(r) for r in records]
    if fmt in ("structured", "jsonl", "json"):
        with open(path, "w") as fh:
            for r in rows:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
    elif fmt == "csv":
        cols = sorted({k for r in rows for k in r})
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for r in rows:
                w.writerow({k: (json.dumps(v) if isinstance(v, (list, dict)) else v) for k, v in r.items()})
    else:
        raise ValueError(f"unknown format {fmt!r}; use csv or structured")
