"""Hot-loop kernels, compiled when available.

The Cython extension ``routenet._ckernels`` is used if it was built; otherwise
the numpy fallback in ``routenet._pykernels`` is used. Set
``ROUTENET_KERNELS=python`` to force the fallback.
"""
import os

import numpy as np

from . import _pykernels

BACKEND = "python"
if os.environ.get("ROUTENET_KERNELS", "").lower() not in ("python", "numpy", "py"):
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
else:
    _impl = _pykernels

_contig = np.ascontiguousarray


def im2col(xp, kh, kw, stride, ho, wo):
    return _impl.im2col(_contig(xp), kh, kw, stride, ho, wo)


def col2im(cols, B, hp, wp, C, kh, kw, stride, ho, wo):
    return _impl.col2im(_contig(cols), B, hp, wp, C, kh, kw, stride, ho, wo)


def maxpool2x2_fwd(x):
    return _impl.maxpool2x2_fwd(_contig(x))


def maxpool2x2_bwd(grad, arg, h, w):
    return _impl.maxpool2x2_bwd(_contig(grad), _contig(arg), h, w)
