"""Kernel dispatch: compiled Cython core when built, pure Python otherwise.

Set ``CTIRULES_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

if os.environ.get("CTIRULES_PURE_PYTHON"):
    from . import _kernels_py as _impl
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
        BACKEND = "cython"
    except ImportError:
        from . import _kernels_py as _impl
        BACKEND = "python"

wildcard_match = _impl.wildcard_match
vector_norm = _impl.vector_norm
row_norms = _impl.row_norms
cosine_scan = _impl.cosine_scan

__all__ = ["BACKEND", "wildcard_match", "vector_norm", "row_norms", "cosine_scan"]
