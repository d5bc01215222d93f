"""Pure-numpy versions of the compiled kernels (same signatures and results)."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, kh, kw, stride, ho, wo):
    B, _, _, C = xp.shape
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (B, ho, wo, C, kh, kw) -> (B, ho, wo, kh, kw, C)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B * ho * wo, kh * kw * C)


def col2im(cols, B, hp, wp, C, kh, kw, stride, ho, wo):
    out = np.zeros((B, hp, wp, C), dtype=cols.dtype)
    c6 = cols.reshape(B, ho, wo, kh, kw, C)
    # reversed offsets reproduce the compiled kernel's accumulation order bit-for-bit
    for ki in reversed(range(kh)):
        for kj in reversed(range(kw)):
            out[:, ki : ki + stride * (ho - 1) + 1 : stride, kj : kj + stride * (wo - 1) + 1 : stride, :] += c6[:, :, :, ki, kj, :]
    return out


def maxpool2x2_fwd(x):
    B, H, W, C = x.shape
    h, w = H // 2, W // 2
    win = x[:, : 2 * h, : 2 * w].reshape(B, h, 2, w, 2, C).transpose(0, 1, 3, 2, 4, 5).reshape(B, h, w, 4, C)
    arg = win.argmax(axis=3).astype(np.int8)  # argmax keeps the first maximum in row-major window order
    out = np.take_along_axis(win, arg[:, :, :, None, :].astype(np.intp), axis=3)[:, :, :, 0, :]
    return np.ascontiguousarray(out), arg


def maxpool2x2_bwd(grad, arg, h, w):
    B, H, W, C = grad.shape
    win = np.zeros((B, H, W, 4, C), dtype=grad.dtype)
    np.put_along_axis(win, arg[:, :, :, None, :].astype(np.intp), grad[:, :, :, None, :], axis=3)
    out = np.zeros((B, h, w, C), dtype=grad.dtype)
    out[:, : 2 * H, : 2 * W] = win.reshape(B, H, W, 2, 2, C).transpose(0, 1, 3, 2, 4, 5).reshape(B, 2 * H, 2 * W, C)
    return out
