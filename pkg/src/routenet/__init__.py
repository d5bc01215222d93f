"""Multi-path networks with data-dependent cross-prediction and cross-connection routing."""

__version__ = "0.1.0"

from .model import ArchSpec, NetworkGraph, build, count_params  # noqa: E402
from .tensor import Rng, get_dtype, precision, set_dtype  # noqa: E402

__all__ = ["ArchSpec", "NetworkGraph", "Rng", "build", "count_params", "get_dtype", "precision", "set_dtype"]
