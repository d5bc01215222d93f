"""Forward/backward kernels for the standard layers (NHWC layout).

Every ``*_fwd`` returns ``(out, cache)``; the matching ``*_bwd`` takes the
upstream gradient and that cache. Caches are plain dicts.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .tensor import Rng, get_dtype


class MissingCacheError(RuntimeError):
    pass


def _need(cache, op):
    if cache is None:
        raise MissingCacheError(f"{op} backward called without a forward cache")
    return cache


@dataclass
class ConvParams:
    weights: np.ndarray  # kh, kw, cin, cout
    bias: np.ndarray | None
    stride: int = 1
    padding: str = "same"

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ValueError("conv weights must be kh x kw x cin x cout")
        if self.bias is not None and self.bias.shape != (self.weights.shape[3],):
            raise ValueError("conv bias length must equal cout")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {self.padding!r}")
        if self.stride < 1:
            raise ValueError("stride must be positive")

    @classmethod
    def init(cls, rng: Rng, cin, cout, k=3, stride=1, padding="same", bias=True):
        fan_in = k * k * cin
        w = rng.normal((k, k, cin, cout), math.sqrt(2.0 / fan_in))
        b = np.zeros(cout, dtype=get_dtype()) if bias else None
        return cls(w, b, stride, padding)

    @property
    def cout(self):
        return self.weights.shape[3]

    def n_params(self):
        return self.weights.size + (0 if self.bias is None else self.bias.size)


@dataclass
class DenseParams:
    weights: np.ndarray  # in x out
    bias: np.ndarray | None

    def __post_init__(self):
        if self.weights.ndim != 2:
            raise ValueError("dense weights must be rank-2 (in x out)")
        if self.bias is not None and self.bias.shape != (self.weights.shape[1],):
            raise ValueError("dense bias length must equal out extent")

    @classmethod
    def init(cls, rng: Rng, n_in, n_out, bias=True):
        w = rng.normal((n_in, n_out), math.sqrt(2.0 / n_in))
        b = np.zeros(n_out, dtype=get_dtype()) if bias else None
        return cls(w, b)

    def n_params(self):
        return self.weights.size + (0 if self.bias is None else self.bias.size)


def _conv_geometry(H, W, k, stride, padding):
    if padding == "same":
        ho, wo = -(-H // stride), -(-W // stride)
        ph = max((ho - 1) * stride + k - H, 0)
        pw = max((wo - 1) * stride + k - W, 0)
        return ho, wo, (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)
    ho, wo = (H - k) // stride + 1, (W - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"valid conv with kernel {k} does not fit input {H}x{W}")
    return ho, wo, (0, 0), (0, 0)


def conv2d_fwd(x: np.ndarray, p: ConvParams):
    if x.ndim != 4:
        raise ValueError(f"conv2d expects B x H x W x C input, got shape {x.shape}")
    kh, kw, cin, cout = p.weights.shape
    if x.shape[3] != cin:
        raise ValueError(f"conv2d channel mismatch: input has {x.shape[3]}, weights expect {cin}")
    B, H, W, _ = x.shape
    ho, wo, (pt, pb), (pl, pr) = _conv_geometry(H, W, kh, p.stride, p.padding)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else x
    cols = kernels.im2col(xp, kh, kw, p.stride, ho, wo)
    out = cols @ p.weights.reshape(-1, cout)
    if p.bias is not None:
        out += p.bias
    cache = {"cols": cols, "xshape": x.shape, "xpshape": xp.shape, "pad": (pt, pl), "geom": (ho, wo), "p": p}
    return out.reshape(B, ho, wo, cout), cache


def conv2d_bwd(grad_out: np.ndarray, cache):
    c = _need(cache, "conv2d")
    p: ConvParams = c["p"]
    kh, kw, cin, cout = p.weights.shape
    B, H, W, _ = c["xshape"]
    ho, wo = c["geom"]
    g = grad_out.reshape(-1, cout)
    grad_w = (c["cols"].T @ g).reshape(p.weights.shape)
    grad_b = g.sum(axis=0) if p.bias is not None else None
    gcols = g @ p.weights.reshape(-1, cout).T
    _, hp, wp, _ = c["xpshape"]
    gxp = kernels.col2im(gcols, B, hp, wp, cin, kh, kw, p.stride, ho, wo)
    pt, pl = c["pad"]
    grad_x = gxp[:, pt : pt + H, pl : pl + W, :]
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def dense_fwd(x: np.ndarray, p: DenseParams):
    if x.ndim != 2 or x.shape[1] != p.weights.shape[0]:
        raise ValueError(f"dense expects B x {p.weights.shape[0]} input, got {x.shape}")
    out = x @ p.weights
    if p.bias is not None:
        out = out + p.bias
    return out, {"x": x, "p": p}


def dense_bwd(grad_out, cache):
    c = _need(cache, "dense")
    p = c["p"]
    if grad_out.shape != (c["x"].shape[0], p.weights.shape[1]):
        raise ValueError(f"dense grad shape mismatch: {grad_out.shape}")
    grad_w = c["x"].T @ grad_out
    grad_b = grad_out.sum(axis=0) if p.bias is not None else None
    return grad_out @ p.weights.T, grad_w, grad_b


def relu_fwd(x):
    mask = x > 0
    return np.maximum(x, 0), {"mask": mask}


def relu_bwd(grad_out, cache):
    c = _need(cache, "relu")
    if grad_out.shape != c["mask"].shape:
        raise ValueError("relu grad shape mismatch")
    return grad_out * c["mask"]


def maxpool2x2_fwd(x):
    if x.ndim != 4:
        raise ValueError("maxpool2x2 expects B x H x W x C")
    if x.shape[1] < 2 or x.shape[2] < 2:
        raise ValueError(f"maxpool2x2 needs spatial extents >= 2, got {x.shape}")
    out, arg = kernels.maxpool2x2_fwd(x)
    return out, {"arg": arg, "hw": x.shape[1:3]}


def maxpool2x2_bwd(grad_out, cache):
    c = _need(cache, "maxpool2x2")
    if grad_out.shape != c["arg"].shape:
        raise ValueError("maxpool grad shape mismatch")
    h, w = c["hw"]
    return kernels.maxpool2x2_bwd(grad_out, c["arg"], h, w)


def global_avg_pool(x):
    if x.ndim != 4:
        raise ValueError("global_avg_pool expects B x H x W x C")
    return x.mean(axis=(1, 2)), {"shape": x.shape}


def global_avg_pool_bwd(grad_out, cache):
    B, H, W, C = _need(cache, "global_avg_pool")["shape"]
    g = grad_out / (H * W)
    return np.ascontiguousarray(np.broadcast_to(g[:, None, None, :], (B, H, W, C)))


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5
    running_mean: np.ndarray | None = field(default=None)
    running_var: np.ndarray | None = field(default=None)

    @classmethod
    def init(cls, channels, momentum=0.9, eps=1e-5):
        dt = get_dtype()
        return cls(np.ones(channels, dtype=dt), np.zeros(channels, dtype=dt), momentum, eps)

    def n_params(self):
        return self.gamma.size + self.beta.size


def batchnorm_fwd(x, p: BatchNormParams, mode="train"):
    """Per-channel batch norm over every axis but the last.

    ``mode='train'`` normalizes with batch statistics and updates the running
    estimates; ``mode='eval'`` uses the running estimates.
    """
    axes = tuple(range(x.ndim - 1))
    if x.shape[-1] != p.gamma.shape[0]:
        raise ValueError(f"batchnorm channel mismatch: {x.shape[-1]} vs {p.gamma.shape[0]}")
    if mode == "train":
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        m = p.momentum
        if p.running_mean is None:
            p.running_mean, p.running_var = mean.copy(), var.copy()
        else:
            p.running_mean = (m * p.running_mean + (1 - m) * mean).astype(x.dtype)
            p.running_var = (m * p.running_var + (1 - m) * var).astype(x.dtype)
    elif mode == "eval":
        if p.running_mean is None:
            raise RuntimeError("batchnorm in eval mode before any training step")
        mean, var = p.running_mean, p.running_var
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    inv = 1.0 / np.sqrt(var + p.eps)
    xhat = (x - mean) * inv
    out = p.gamma * xhat + p.beta
    return out, {"xhat": xhat, "inv": inv, "mode": mode, "p": p}


def batchnorm_bwd(grad_out, cache):
    c = _need(cache, "batchnorm")
    p, xhat, inv = c["p"], c["xhat"], c["inv"]
    axes = tuple(range(grad_out.ndim - 1))
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    gxhat = grad_out * p.gamma
    if c["mode"] == "eval":
        return gxhat * inv, grad_gamma, grad_beta
    n = xhat.size // xhat.shape[-1]
    grad_x = inv / n * (n * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes))
    return grad_x, grad_gamma, grad_beta


def softmax_xent_loss(logits: np.ndarray, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    B, K = logits.shape
    if labels.shape != (B,):
        raise ValueError(f"expected {B} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"labels must lie in [0, {K})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    loss = float(-logp[np.arange(B), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(B), labels] -= 1.0
    return loss, grad / B
