"""Nearest-neighbor search kernels.

The compiled Cython extension is preferred; the pure-numpy fallback is
selected when the extension is missing or when MQPRIOR_PURE_PYTHON=1.
Both backends are exact (no approximation) and bit-identical.
"""

import os

if os.environ.get("MQPRIOR_PURE_PYTHON") == "1":
    from . import _kernels_py as _impl
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        from . import _kernels_py as _impl

BACKEND = _impl.BACKEND
nearest_code = _impl.nearest_code

__all__ = ["BACKEND", "nearest_code"]
