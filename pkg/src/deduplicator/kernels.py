"""Kernel selection.

The compiled extension is used when it imports; setting
``DEDUPLICATOR_PURE_PYTHON=1`` forces the numpy fallback.
"""

from __future__ import annotations

import os
from types import ModuleType

from deduplicator import _fallback


def _load() -> tuple[ModuleType, str]:
    if os.environ.get("DEDUPLICATOR_PURE_PYTHON", "") not in ("", "0"):
        return _fallback, "python"
    try:
        from deduplicator import _kernels
    except ImportError:
        return _fallback, "python"
    return _kernels, "cython"


_impl, BACKEND = _load()

signature = _impl.signature
nearest = _impl.nearest
argmax_rows = _impl.argmax_rows
find_slice = _impl.find_slice

BACKENDS: dict[str, ModuleType] = {"python": _fallback}
if BACKEND == "cython":
    BACKENDS["cython"] = _impl
else:
    try:
        from deduplicator import _kernels as _compiled

        BACKENDS["cython"] = _compiled
    except ImportError:
        pass
