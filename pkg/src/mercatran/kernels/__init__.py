"""Hot row kernels with a compiled backend and a NumPy fallback.

The Cython extension is used when it was built; otherwise, or when
``MERCATRAN_KERNELS=python`` is set, the pure NumPy versions are used.
Both expose the same five functions.
"""
import os

from . import _pykernels

_ext = None
if os.environ.get("MERCATRAN_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels as _ext
    except ImportError:  # extension not built
        _ext = None

_impl = _ext if _ext is not None else _pykernels
BACKEND = "cython" if _ext is not None else "python"

softmax_rows_fwd = _impl.softmax_rows_fwd
softmax_rows_bwd = _impl.softmax_rows_bwd
layer_norm_fwd = _impl.layer_norm_fwd
layer_norm_bwd = _impl.layer_norm_bwd
topk_scan = _impl.topk_scan


def compiled():
    """The compiled module, or None when only the fallback is available."""
    return _ext


__all__ = [
    "BACKEND",
    "compiled",
    "layer_norm_bwd",
    "layer_norm_fwd",
    "softmax_rows_bwd",
    "softmax_rows_fwd",
    "topk_scan",
]
