"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``IMCONNECT_PURE_PYTHON=1`` to force the fallback.

``benchmarks/bench_kernels.py`` times both.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("IMCONNECT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        _impl = _compiled
        BACKEND = "cython"

gelu = _impl.gelu
gelu_grad = _impl.gelu_grad
gelu_grad2 = _impl.gelu_grad2
explicit_errors = _impl.explicit_errors
implicit_errors = _impl.implicit_errors
scan_final_errors = _impl.scan_final_errors

__all__ = [
    "BACKEND",
    "gelu",
    "gelu_grad",
    "gelu_grad2",
    "explicit_errors",
    "implicit_errors",
    "scan_final_errors",
]
