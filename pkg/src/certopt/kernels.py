"""Kernel dispatch: compiled extension when importable, numpy otherwise.

Set ``CERTOPT_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
if os.environ.get("CERTOPT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
else:
    _impl = _kernels_py

scatter_add = _impl.scatter_add
combine_rows = _impl.combine_rows
