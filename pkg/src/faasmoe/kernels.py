"""Kernel backend selection.

The compiled extension is used when it was built; set
``FAASMOE_PURE_PYTHON=1`` to force the numpy fallback.
"""
from __future__ import annotations

import os

from . import _kernels_py

BACKEND = "python"
pipelined_cost_floor = _kernels_py.pipelined_cost_floor

if os.environ.get("FAASMOE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        _compiled = None
    if _compiled is not None:
        BACKEND = "cython"
        pipelined_cost_floor = _compiled.pipelined_cost_floor


def backends() -> dict:
    """Every importable backend, keyed by name (used by the benchmark and tests)."""
    out = {"python": _kernels_py.pipelined_cost_floor}
    try:
        from . import _kernels as compiled
        out["cython"] = compiled.pipelined_cost_floor
    except ImportError:
        pass
    return out
