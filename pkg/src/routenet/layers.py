"""Stateful layer wrappers and graph nodes.

Single-tensor layers keep their forward cache on the instance and expose
``params()`` / ``grads`` with matching keys. Graph nodes map a bundle of m
tensors to a bundle of n tensors.
"""
from __future__ import annotations

import numpy as np

from . import ops, routing
from .ops import BatchNormParams, ConvParams, DenseParams
from .routing import CrossConnectionRouter, CrossPredictionRouter, GateUnit


class Layer:
    kind = "layer"
    weight_layers = 0  # contribution to effective depth

    def __init__(self):
        self.cache = None
        self.grads = {}

    def params(self) -> dict:
        return {}

    def buffers(self) -> dict:
        return {}

    def set_array(self, name, value):
        raise KeyError(name)

    def forward(self, x, train=True):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError


class Conv(Layer):
    kind = "conv"
    weight_layers = 1

    def __init__(self, p: ConvParams):
        super().__init__()
        self.p = p

    def params(self):
        out = {"w": self.p.weights}
        if self.p.bias is not None:
            out["b"] = self.p.bias
        return out

    def set_array(self, name, value):
        setattr(self.p, {"w": "weights", "b": "bias"}[name], value)

    def forward(self, x, train=True):
        y, self.cache = ops.conv2d_fwd(x, self.p)
        return y

    def backward(self, g):
        gx, gw, gb = ops.conv2d_bwd(g, self.cache)
        self.grads = {"w": gw} if gb is None else {"w": gw, "b": gb}
        return gx


class Dense(Layer):
    kind = "dense"
    weight_layers = 1

    def __init__(self, p: DenseParams):
        super().__init__()
        self.p = p

    def params(self):
        out = {"w": self.p.weights}
        if self.p.bias is not None:
            out["b"] = self.p.bias
        return out

    def set_array(self, name, value):
        setattr(self.p, {"w": "weights", "b": "bias"}[name], value)

    def forward(self, x, train=True):
        y, self.cache = ops.dense_fwd(x, self.p)
        return y

    def backward(self, g):
        gx, gw, gb = ops.dense_bwd(g, self.cache)
        self.grads = {"w": gw} if gb is None else {"w": gw, "b": gb}
        return gx


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=True):
        y, self.cache = ops.relu_fwd(x)
        return y

    def backward(self, g):
        return ops.relu_bwd(g, self.cache)


class MaxPool(Layer):
    kind = "maxpool"

    def forward(self, x, train=True):
        y, self.cache = ops.maxpool2x2_fwd(x)
        return y

    def backward(self, g):
        return ops.maxpool2x2_bwd(g, self.cache)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, train=True):
        self.cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g):
        return g.reshape(self.cache)


class GAP(Layer):
    kind = "gap"

    def forward(self, x, train=True):
        y, self.cache = ops.global_avg_pool(x)
        return y

    def backward(self, g):
        return ops.global_avg_pool_bwd(g, self.cache)


class BatchNorm(Layer):
    kind = "bn"

    def __init__(self, p: BatchNormParams):
        super().__init__()
        self.p = p

    def params(self):
        return {"gamma": self.p.gamma, "beta": self.p.beta}

    def buffers(self):
        if self.p.running_mean is None:
            return {}
        return {"running_mean": self.p.running_mean, "running_var": self.p.running_var}

    def set_array(self, name, value):
        setattr(self.p, name, value)

    def forward(self, x, train=True):
        y, self.cache = ops.batchnorm_fwd(x, self.p, "train" if train else "eval")
        return y

    def backward(self, g):
        gx, gg, gb = ops.batchnorm_bwd(g, self.cache)
        self.grads = {"gamma": gg, "beta": gb}
        return gx


class Sequential(Layer):
    kind = "seq"

    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)
        self.weight_layers = sum(l.weight_layers for l in self.layers)

    def _named(self):
        return [(f"{k}.{l.kind}", l) for k, l in enumerate(self.layers)]

    def params(self):
        return {f"{pre}.{n}": v for pre, l in self._named() for n, v in l.params().items()}

    def buffers(self):
        return {f"{pre}.{n}": v for pre, l in self._named() for n, v in l.buffers().items()}

    def set_array(self, name, value):
        pre, kind, rest = name.split(".", 2)
        self.layers[int(pre)].set_array(rest, value)

    def forward(self, x, train=True):
        for l in self.layers:
            x = l.forward(x, train)
        return x

    def backward(self, g):
        for l in reversed(self.layers):
            g = l.backward(g)
        self.grads = {f"{pre}.{n}": v for pre, l in self._named() for n, v in l.grads.items()}
        return g


class ResBlock(Layer):
    """conv-bn-relu-conv-bn plus shortcut, then relu. 1x1 conv-bn projection on shape change."""

    kind = "resblock"
    weight_layers = 2  # projection shortcuts are not counted, as in the usual 6b+2 naming

    def __init__(self, rng, cin, cout, stride=1):
        super().__init__()
        self.main = Sequential([
            Conv(ConvParams.init(rng.child(0), cin, cout, 3, stride, bias=False)),
            BatchNorm(BatchNormParams.init(cout)),
            ReLU(),
            Conv(ConvParams.init(rng.child(1), cout, cout, 3, 1, bias=False)),
            BatchNorm(BatchNormParams.init(cout)),
        ])
        self.short = None
        if stride != 1 or cin != cout:
            self.short = Sequential([
                Conv(ConvParams.init(rng.child(2), cin, cout, 1, stride, bias=False)),
                BatchNorm(BatchNormParams.init(cout)),
            ])
        self.out_relu = ReLU()

    def _parts(self):
        return [("main", self.main)] + ([("short", self.short)] if self.short else [])

    def params(self):
        return {f"{nm}.{k}": v for nm, part in self._parts() for k, v in part.params().items()}

    def buffers(self):
        return {f"{nm}.{k}": v for nm, part in self._parts() for k, v in part.buffers().items()}

    def set_array(self, name, value):
        part, rest = name.split(".", 1)
        getattr(self, part).set_array(rest, value)

    def forward(self, x, train=True):
        s = self.short.forward(x, train) if self.short else x
        return self.out_relu.forward(self.main.forward(x, train) + s, train)

    def backward(self, g):
        g = self.out_relu.backward(g)
        gx = self.main.backward(g)
        gx = gx + (self.short.backward(g) if self.short else g)
        self.grads = {f"{nm}.{k}": v for nm, part in self._parts() for k, v in part.grads.items()}
        return gx


# ---------------------------------------------------------------------------
# graph nodes (bundle -> bundle)


class Node:
    kind = "node"
    weight_layers = 0  # contribution to effective depth

    def __init__(self, m, n):
        self.m, self.n = m, n
        self.grads = {}

    def params(self) -> dict:
        return {}

    def buffers(self) -> dict:
        return {}

    def set_array(self, name, value):
        raise KeyError(name)


class PathwiseNode(Node):
    """The same layer type applied independently on each path."""

    kind = "pathwise"

    def __init__(self, paths: list[Layer], label: str):
        super().__init__(len(paths), len(paths))
        self.paths = paths
        self.label = label
        self.weight_layers = paths[0].weight_layers

    def params(self):
        return {f"p{k}.{n}": v for k, l in enumerate(self.paths) for n, v in l.params().items()}

    def buffers(self):
        return {f"p{k}.{n}": v for k, l in enumerate(self.paths) for n, v in l.buffers().items()}

    def set_array(self, name, value):
        pk, rest = name.split(".", 1)
        self.paths[int(pk[1:])].set_array(rest, value)

    def forward(self, xs, train=True):
        if len(xs) != self.m:
            raise ValueError(f"{self.label}: expected bundle of {self.m}, got {len(xs)}")
        return [l.forward(x, train) for l, x in zip(self.paths, xs)]

    def backward(self, gs):
        out = [l.backward(g) for l, g in zip(self.paths, gs)]
        self.grads = {f"p{k}.{n}": v for k, l in enumerate(self.paths) for n, v in l.grads.items()}
        return out


def _gate_set(gates, name, value):
    head, slot = name.split(".")
    setattr(gates[int(head[4:])], slot, value)


class CCRouterNode(Node):
    """Cross-connection router (m=1 makes it a one-to-many connector)."""

    kind = "cc_router"

    def __init__(self, router: CrossConnectionRouter, label="cc"):
        super().__init__(router.m, router.n)
        self.router = router
        self.label = label
        self.cache = None
        self.mask_gate_path = False

    def params(self):
        return self.router.params()

    def set_array(self, name, value):
        _gate_set(self.router.gates, name, value)

    def forward(self, xs, train=True):
        ys, self.cache = routing.cc_router_fwd(xs, self.router)
        return ys

    def backward(self, gs):
        gx, gg = routing.cc_router_bwd(gs, self.cache, mask_gate_path=self.mask_gate_path)
        self.grads = {f"gate{i}.{k}": v for i, d in enumerate(gg) for k, v in d.items()}
        return gx

    def gate_units(self) -> list[GateUnit]:
        return [] if self.router.frozen else self.router.gates


class CPRouterNode(Node):
    kind = "cp_router"
    weight_layers = 1

    def __init__(self, router: CrossPredictionRouter, label="cp"):
        super().__init__(router.m, router.n)
        self.router = router
        self.label = label
        self.cache = None
        self.mask_gate_path = False

    def params(self):
        return self.router.params()

    def set_array(self, name, value):
        head, slot = name.split(".")
        if head.startswith("gate"):
            _gate_set(self.router.gates, name, value)
            return
        i, j = (int(t) for t in head[4:].split("_"))
        setattr(self.router.predictions[i][j], {"w": "weights", "b": "bias"}[slot], value)

    def forward(self, xs, train=True):
        ys, self.cache = routing.cp_router_fwd(xs, self.router)
        return ys

    def backward(self, gs):
        gx, gp, gg = routing.cp_router_bwd(gs, self.cache, mask_gate_path=self.mask_gate_path)
        grads = {}
        for i, row in enumerate(gp):
            for j, (gw, gb) in enumerate(row):
                grads[f"pred{i}_{j}.w"] = gw
                if gb is not None:
                    grads[f"pred{i}_{j}.b"] = gb
        for i, d in enumerate(gg):
            for k, v in d.items():
                grads[f"gate{i}.{k}"] = v
        self.grads = grads
        return gx

    def gate_units(self) -> list[GateUnit]:
        return self.router.gates


class MergeNode(Node):
    kind = "merge"

    def __init__(self, m):
        super().__init__(m, 1)
        self.label = "merge"

    def forward(self, xs, train=True):
        if len(xs) != self.m:
            raise ValueError(f"merge: expected bundle of {self.m}, got {len(xs)}")
        return [routing.merge_average(xs)]

    def backward(self, gs):
        return routing.merge_average_bwd(gs[0], self.m)


LAYER_KINDS = {c.kind: c for c in (Conv, Dense, ReLU, MaxPool, Flatten, GAP, BatchNorm, ResBlock)}
NODE_KINDS = {c.kind: c for c in (PathwiseNode, CCRouterNode, CPRouterNode, MergeNode)}
