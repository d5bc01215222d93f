"""Architecture specs, graph assembly and parameter counting.

Every family is expressed as an ordered layer list (the same grammar the
``custom`` family accepts from config files) and assembled by one routine
that tracks the per-path tensor shape and the bundle width.
"""
from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .layers import (
    GAP, BatchNorm, CCRouterNode, Conv, CPRouterNode, Dense, Flatten, Layer, MaxPool, MergeNode,
    PathwiseNode, ReLU, ResBlock, Sequential,
)
from .ops import BatchNormParams, ConvParams, DenseParams
from .routing import CrossConnectionRouter, CrossPredictionRouter
from .tensor import Rng, get_dtype, resolve_dtype

FAMILIES = ("basecnn", "basecnn_cp", "basecnn_cc", "resnet_cc", "custom")

# Gate hidden widths per family. These reproduce the published parameter
# counts (CIFAR tables) to two decimals in millions.
DEFAULT_GATE_HIDDEN = {"basecnn": 18, "basecnn_cp": 32, "basecnn_cc": 18, "resnet_cc": 18, "custom": "se"}


class ConfigError(ValueError):
    pass


@dataclass
class ArchSpec:
    family: str = "basecnn"
    paths: int = 1
    blocks_per_stack: int = 3
    input: tuple = (32, 32, 3)
    classes: int = 10
    seed: int = 0
    gate_hidden: int | str | None = None
    batchnorm: bool = False
    frozen_gates: bool = False
    duplicate_paths: bool = False
    layers: list | None = None

    def __post_init__(self):
        if isinstance(self.input, dict):
            unknown = set(self.input) - {"h", "w", "c"}
            if unknown:
                raise ConfigError(f"unknown input fields: {sorted(unknown)}")
            self.input = (int(self.input["h"]), int(self.input["w"]), int(self.input["c"]))
        self.input = tuple(int(v) for v in self.input)
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.paths < 1:
            raise ConfigError("paths must be >= 1")
        if self.classes < 2:
            raise ConfigError("classes must be >= 2")
        if len(self.input) != 3 or min(self.input) < 1:
            raise ConfigError(f"input must be h, w, c >= 1, got {self.input}")
        if self.family == "custom" and not self.layers:
            raise ConfigError("custom family needs a non-empty 'layers' list")
        if self.family != "custom" and self.layers:
            raise ConfigError("'layers' is only valid for the custom family")

    @property
    def hidden(self):
        return DEFAULT_GATE_HIDDEN[self.family] if self.gate_hidden is None else self.gate_hidden

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        h, w, c = self.input
        d["input"] = {"h": h, "w": w, "c": c}
        if d["layers"] is None:
            del d["layers"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown architecture fields: {sorted(unknown)}")
        return cls(**copy.deepcopy(d))


class NetworkGraph:
    """Ordered list of bundle-to-bundle nodes ending in a single logits tensor."""

    def __init__(self, nodes, spec: ArchSpec | None = None, input_shape=None):
        self.nodes = list(nodes)
        self.spec = spec
        self.input_shape = tuple(input_shape or (spec.input if spec else ()))
        width = 1
        for k, node in enumerate(self.nodes):
            if node.m != width:
                raise ConfigError(f"node {k} ({node.label}) expects width {node.m}, bundle has {width}")
            width = node.n
        if width != 1:
            raise ConfigError(f"graph ends with bundle width {width}; add a merge")
        merges = sum(isinstance(n_, MergeNode) for n_ in self.nodes)
        widest = max([n_.n for n_ in self.nodes] + [1])
        if widest > 1 and merges != 1:
            raise ConfigError(f"multi-path graph needs exactly one merge, found {merges}")
        self.node_names = [f"{k:02d}.{n_.label}" for k, n_ in enumerate(self.nodes)]

    # -- evaluation ---------------------------------------------------------
    def forward(self, x, train=True, upto=None):
        xs = [x]
        for k, node in enumerate(self.nodes):
            if upto is not None and k == upto:
                return xs
            xs = node.forward(xs, train)
        return xs[0]

    def backward(self, grad, start=None):
        gs = [grad] if not isinstance(grad, list) else grad
        stop = len(self.nodes) if start is None else start
        for node in reversed(self.nodes[:stop]):
            gs = node.backward(gs)
        return gs[0]

    def first_nonfinite(self, x, train=True):
        """Name of the first node whose output contains a non-finite value, or None."""
        if not np.all(np.isfinite(x)):
            return "input"
        xs = [x]
        for name, node in zip(self.node_names, self.nodes):
            try:
                xs = node.forward(xs, train)
            except ValueError:  # gate softmax refuses non-finite logits
                return name
            if not all(np.all(np.isfinite(t)) for t in xs):
                return name
        return None

    # -- parameters ---------------------------------------------------------
    def named_params(self) -> dict:
        return {f"{nm}.{k}": v for nm, n_ in zip(self.node_names, self.nodes) for k, v in n_.params().items()}

    def named_grads(self) -> dict:
        return {f"{nm}.{k}": v for nm, n_ in zip(self.node_names, self.nodes) for k, v in n_.grads.items()}

    def named_buffers(self) -> dict:
        return {f"{nm}.{k}": v for nm, n_ in zip(self.node_names, self.nodes) for k, v in n_.buffers().items()}

    def set_array(self, full_name, value):
        k, label, rest = full_name.split(".", 2)
        self.nodes[int(k)].set_array(rest, value)

    def astype(self, dtype) -> "NetworkGraph":
        dt = resolve_dtype(dtype)
        for name, arr in {**self.named_params(), **self.named_buffers()}.items():
            self.set_array(name, arr.astype(dt))
        return self

    @property
    def dtype(self):
        return next(iter(self.named_params().values())).dtype.type

    def count_params(self) -> int:
        return int(sum(a.size for a in self.named_params().values()))

    def depth(self) -> int:
        """Effective depth: nodes carrying main-task weights (cross-connections excluded)."""
        return sum(n_.weight_layers for n_ in self.nodes)

    def routers(self):
        """(layer_id, node) for each router node, in graph order."""
        return [(nm, n_) for nm, n_ in zip(self.node_names, self.nodes) if isinstance(n_, (CCRouterNode, CPRouterNode))]

    def router(self, layer_id):
        for nm, n_ in self.routers():
            if nm == layer_id:
                return self.nodes.index(n_), n_
        raise KeyError(f"no router named {layer_id!r}; have {[nm for nm, _ in self.routers()]}")

    def gate_param_count(self) -> int:
        return int(sum(u.n_params() for _, n_ in self.routers() for u in n_.gate_units()))


def count_params(g: NetworkGraph) -> int:
    return g.count_params()


# ---------------------------------------------------------------------------
# layer-list grammar

_LAYER_FIELDS = {
    "conv": {"filters", "kernel", "stride", "relu", "bn", "bias"},
    "dense": {"units", "relu", "bias"},
    "pool": set(), "flatten": set(), "gap": set(), "relu": set(), "bn": set(),
    "resblock": {"filters", "stride"},
    "stack": {"filters", "blocks", "stride"},
    "connector": {"paths", "hidden"},
    "cc": {"out", "hidden"},
    "cp_conv": {"filters", "out", "hidden", "stride"},
    "cp_dense": {"units", "out", "hidden"},
    "merge": set(),
}


def _check_entry(entry):
    if not isinstance(entry, dict) or "kind" not in entry:
        raise ConfigError(f"layer entries need a 'kind' field: {entry!r}")
    kind = entry["kind"]
    if kind not in _LAYER_FIELDS:
        raise ConfigError(f"unknown layer kind {kind!r}")
    unknown = set(entry) - _LAYER_FIELDS[kind] - {"kind"}
    if unknown:
        raise ConfigError(f"unknown fields for layer {kind!r}: {sorted(unknown)}")
    return kind


def assemble(layers: list, spec: ArchSpec) -> NetworkGraph:
    rng = Rng(spec.seed)
    shape = tuple(spec.input)
    width = 1
    nodes = []
    counters = {}

    def label(kind):
        counters[kind] = counters.get(kind, 0) + 1
        return f"{kind}{counters[kind]}"

    def path_rng(k, p):
        return rng.child(k, 0 if spec.duplicate_paths else p)

    def hidden_for(entry):
        h = entry.get("hidden", spec.hidden)
        return None if h == "se" else int(h)

    def spatial(kind):
        if len(shape) != 3:
            raise ConfigError(f"{kind} needs a spatial H x W x C input, current shape is {shape}")

    for k, entry in enumerate(layers):
        kind = _check_entry(entry)
        if kind == "conv":
            spatial(kind)
            stride = int(entry.get("stride", 1))
            bn = bool(entry.get("bn", False))
            bias = bool(entry.get("bias", not bn))
            cout = int(entry["filters"])
            paths = []
            for p in range(width):
                seq = [Conv(ConvParams.init(path_rng(k, p), shape[2], cout, int(entry.get("kernel", 3)), stride, bias=bias))]
                if bn:
                    seq.append(BatchNorm(BatchNormParams.init(cout)))
                if entry.get("relu", True):
                    seq.append(ReLU())
                paths.append(Sequential(seq))
            nodes.append(PathwiseNode(paths, label("conv")))
            shape = (-(-shape[0] // stride), -(-shape[1] // stride), cout)
        elif kind == "dense":
            if len(shape) != 1:
                raise ConfigError(f"dense needs a flat input, current shape is {shape}; add flatten or gap")
            units = int(entry["units"])
            paths = []
            for p in range(width):
                seq = [Dense(DenseParams.init(path_rng(k, p), shape[0], units, bias=entry.get("bias", True)))]
                if entry.get("relu", True):
                    seq.append(ReLU())
                paths.append(Sequential(seq))
            nodes.append(PathwiseNode(paths, label("dense")))
            shape = (units,)
        elif kind in ("pool", "flatten", "gap", "relu", "bn"):
            if kind in ("pool", "gap"):
                spatial(kind)
            if kind == "bn":
                paths = [BatchNorm(BatchNormParams.init(shape[-1])) for _ in range(width)]
            else:
                cls = {"pool": MaxPool, "flatten": Flatten, "gap": GAP, "relu": ReLU}[kind]
                paths = [cls() for _ in range(width)]
            nodes.append(PathwiseNode(paths, label(kind)))
            if kind == "pool":
                shape = (shape[0] // 2, shape[1] // 2, shape[2])
            elif kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif kind == "gap":
                shape = (shape[2],)
        elif kind in ("resblock", "stack"):
            spatial(kind)
            cout = int(entry["filters"])
            blocks = int(entry.get("blocks", 1))
            for b in range(blocks):
                stride = int(entry.get("stride", 1)) if b == 0 else 1
                paths = [ResBlock(path_rng(k, p).child(b), shape[2], cout, stride) for p in range(width)]
                nodes.append(PathwiseNode(paths, label("res")))
                shape = (-(-shape[0] // stride), -(-shape[1] // stride), cout)
        elif kind == "connector":
            if width != 1:
                raise ConfigError(f"connector needs a single input tensor, bundle has {width}")
            n = int(entry.get("paths", spec.paths))
            r = CrossConnectionRouter.init(rng.child(k), 1, n, shape[-1], hidden_for(entry), spec.frozen_gates)
            nodes.append(CCRouterNode(r, label("cc")))
            width = n
        elif kind == "cc":
            n = int(entry.get("out", width))
            r = CrossConnectionRouter.init(rng.child(k), width, n, shape[-1], hidden_for(entry), spec.frozen_gates)
            nodes.append(CCRouterNode(r, label("cc")))
            width = n
        elif kind == "cp_conv":
            spatial(kind)
            n = int(entry.get("out", spec.paths if width == 1 else width))
            cout = int(entry["filters"])
            stride = int(entry.get("stride", 1))
            r = CrossPredictionRouter.init_conv(rng.child(k), width, n, shape[2], cout, hidden_for(entry), stride)
            nodes.append(CPRouterNode(r, label("cp")))
            width = n
            shape = (-(-shape[0] // stride), -(-shape[1] // stride), cout)
        elif kind == "cp_dense":
            if len(shape) != 1:
                raise ConfigError("cp_dense needs a flat input")
            n = int(entry.get("out", spec.paths if width == 1 else width))
            units = int(entry["units"])
            r = CrossPredictionRouter.init_dense(rng.child(k), width, n, shape[0], units, hidden_for(entry))
            nodes.append(CPRouterNode(r, label("cp")))
            width = n
            shape = (units,)
        elif kind == "merge":
            nodes.append(MergeNode(width))
            width = 1
    if shape != (spec.classes,):
        raise ConfigError(f"network output shape {shape} does not match classes={spec.classes}")
    return NetworkGraph(nodes, spec, spec.input)


def _require_canonical_input(spec):
    if spec.input != (32, 32, 3):
        raise ConfigError(f"{spec.family} is defined for 32x32x3 input; use the custom family for {spec.input}")


def basecnn_layers(spec: ArchSpec) -> list:
    bn = spec.batchnorm
    c = lambda f: {"kind": "conv", "filters": f, "bn": bn}
    return [c(32), c(32), {"kind": "pool"}, c(64), c(64), {"kind": "pool"}, c(128), c(128),
            {"kind": "flatten"}, {"kind": "dense", "units": 32}, {"kind": "dense", "units": 32},
            {"kind": "dense", "units": spec.classes, "relu": False}]


def basecnn_cc_layers(spec: ArchSpec) -> list:
    bn = spec.batchnorm
    c = lambda f: {"kind": "conv", "filters": f, "bn": bn}
    cc = {"kind": "cc"}
    return [{"kind": "connector", "paths": spec.paths},
            c(32), c(32), cc, {"kind": "pool"}, c(64), c(64), cc, {"kind": "pool"}, c(128), c(128), cc,
            {"kind": "flatten"}, {"kind": "dense", "units": 32}, cc, {"kind": "dense", "units": 32},
            {"kind": "dense", "units": spec.classes, "relu": False}, {"kind": "merge"}]


def basecnn_cp_layers(spec: ArchSpec) -> list:
    bn = spec.batchnorm
    c = lambda f: {"kind": "conv", "filters": f, "bn": bn}
    return [{"kind": "cp_conv", "filters": 32, "out": spec.paths}, c(32), {"kind": "pool"},
            {"kind": "cp_conv", "filters": 64}, c(64), {"kind": "pool"},
            {"kind": "cp_conv", "filters": 128}, c(128), {"kind": "flatten"},
            {"kind": "dense", "units": 32}, {"kind": "cp_dense", "units": 32},
            {"kind": "dense", "units": spec.classes, "relu": False}, {"kind": "merge"}]


def resnet_cc_layers(spec: ArchSpec) -> list:
    b = spec.blocks_per_stack
    multi = spec.paths > 1
    out = [{"kind": "conv", "filters": 16, "bn": True}]
    if multi:
        out.append({"kind": "connector", "paths": spec.paths})
    for filters, stride in ((16, 1), (32, 2), (64, 2)):
        out.append({"kind": "stack", "filters": filters, "blocks": b, "stride": stride})
        if multi:
            out.append({"kind": "cc"})
    out += [{"kind": "gap"}, {"kind": "dense", "units": spec.classes, "relu": False}]
    if multi:
        out.append({"kind": "merge"})
    return out


def build_basecnn(spec: ArchSpec) -> NetworkGraph:
    if spec.paths != 1:
        raise ConfigError("basecnn is single-path; use basecnn_cc / basecnn_cp for paths > 1")
    _require_canonical_input(spec)
    return assemble(basecnn_layers(spec), spec)


def build_basecnn_cp(spec: ArchSpec) -> NetworkGraph:
    if spec.paths < 2:
        raise ConfigError("basecnn_cp needs paths >= 2")
    _require_canonical_input(spec)
    return assemble(basecnn_cp_layers(spec), spec)


def build_basecnn_cc(spec: ArchSpec) -> NetworkGraph:
    if spec.paths < 2:
        raise ConfigError("basecnn_cc needs paths >= 2")
    _require_canonical_input(spec)
    return assemble(basecnn_cc_layers(spec), spec)


def build_resnet_cc(spec: ArchSpec) -> NetworkGraph:
    if spec.blocks_per_stack not in (3, 5):
        raise ConfigError(f"blocks_per_stack must be 3 (ResNet20) or 5 (ResNet32), got {spec.blocks_per_stack}")
    h, w, _ = spec.input
    if h % 4 or w % 4:
        raise ConfigError("resnet input extents must be divisible by 4")
    return assemble(resnet_cc_layers(spec), spec)


def build_custom(spec: ArchSpec) -> NetworkGraph:
    return assemble(spec.layers, spec)


BUILDERS = {
    "basecnn": build_basecnn,
    "basecnn_cp": build_basecnn_cp,
    "basecnn_cc": build_basecnn_cc,
    "resnet_cc": build_resnet_cc,
    "custom": build_custom,
}


def build(spec: ArchSpec | dict, dtype=None) -> NetworkGraph:
    if isinstance(spec, dict):
        spec = ArchSpec.from_dict(spec)
    g = BUILDERS[spec.family](spec)
    if dtype is not None and resolve_dtype(dtype) != get_dtype():
        g.astype(dtype)
    return g
