"""Tensor primitives shared by every layer.

Tensors are plain ``numpy.ndarray`` objects in row-major order. Images use
B, H, W, C axis order. The working precision is float32 for training and can
be switched to float64 globally (gradient checks need the headroom).
"""
from __future__ import annotations

import contextlib
from typing import Iterator, Sequence

import numpy as np

_DTYPES = {"real32": np.float32, "float32": np.float32, "real64": np.float64, "float64": np.float64}
_current = np.float32


def get_dtype() -> type:
    return _current


def set_dtype(name) -> None:
    global _current
    _current = resolve_dtype(name)


def resolve_dtype(name) -> type:
    if isinstance(name, str):
        try:
            return _DTYPES[name]
        except KeyError:
            raise ValueError(f"unknown dtype {name!r}; expected one of {sorted(_DTYPES)}") from None
    dt = np.dtype(name).type
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {name!r}")
    return dt


@contextlib.contextmanager
def precision(name) -> Iterator[None]:
    """Temporarily switch the global working dtype."""
    global _current
    prev = _current
    _current = resolve_dtype(name)
    try:
        yield
    finally:
        _current = prev


def tensor(data, dtype=None) -> np.ndarray:
    """Build a tensor of the working dtype, enforcing rank 1-4 and positive extents."""
    arr = np.array(data, dtype=dtype or _current)
    if arr.ndim < 1 or arr.ndim > 4:
        raise ValueError(f"tensor rank must be 1..4, got {arr.ndim}")
    if any(s < 1 for s in arr.shape):
        raise ValueError(f"tensor extents must be >= 1, got {arr.shape}")
    return arr


def elementwise_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a * b


def weighted_sum(tensors: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """Return ``sum_i weights[i] * tensors[i]``, accumulated in list order."""
    if len(tensors) == 0:
        raise ValueError("weighted_sum of an empty list")
    if len(tensors) != len(weights):
        raise ValueError(f"{len(tensors)} tensors but {len(weights)} weights")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ValueError(f"shape mismatch: {shape} vs {t.shape}")
    out = weights[0] * tensors[0]
    for w, t in zip(weights[1:], tensors[1:]):
        out = out + w * t
    return out


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-shifted softmax. Works row-wise on batched logits as well."""
    logits = np.asarray(logits)
    if logits.size == 0:
        raise ValueError("softmax of an empty tensor")
    if not np.all(np.isfinite(logits)):
        raise ValueError("softmax input contains non-finite values")
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_jacobian(g: np.ndarray) -> np.ndarray:
    """d softmax / d logits evaluated at output ``g``: ``J[j, k] = g_j (delta_jk - g_k)``."""
    g = np.asarray(g)
    if g.ndim != 1:
        raise ValueError("softmax_jacobian expects a rank-1 gate vector")
    return np.diag(g) - np.outer(g, g)


class Rng:
    """Seeded counter-based generator (Philox) that can be split into independent streams.

    ``child(key)`` derives a stream from (seed, key path) only, so the stream a
    layer receives does not depend on how many draws other layers made.
    """

    def __init__(self, seed: int = 0, _key: tuple = ()):
        self.seed = int(seed)
        self.key = tuple(_key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *key: int) -> "Rng":
        return Rng(self.seed, self.key + tuple(int(k) for k in key))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, shape, std: float = 1.0, dtype=None) -> np.ndarray:
        # draws are always float64 then cast, so float32/float64 runs share values
        return (self._gen.standard_normal(shape) * std).astype(dtype or _current)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0, dtype=None) -> np.ndarray:
        return self._gen.uniform(low, high, shape).astype(dtype or _current)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def random(self, size=None):
        return self._gen.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def get_state(self) -> dict:
        return {"seed": self.seed, "key": list(self.key), "bit_generator": self._gen.bit_generator.state}

    def set_state(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self.key = tuple(state["key"])
        self._gen.bit_generator.state = state["bit_generator"]

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(state["seed"], tuple(state["key"]))
        rng.set_state(state)
        return rng
