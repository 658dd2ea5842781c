"""Backend selection for the geometry kernels.

The compiled ``_geom`` extension is used when it imports; otherwise, or when
``VTANIM_PURE_PYTHON`` is set to a non-empty value other than ``0``, the
pure-Python ``_geom_py`` module is used. Both expose the same functions.
"""

from __future__ import annotations

import os
from types import ModuleType

from vtanim import _geom_py


def _load() -> tuple[ModuleType, str]:
    if os.environ.get("VTANIM_PURE_PYTHON", "") not in ("", "0"):
        return _geom_py, "python"
    try:
        from vtanim import _geom
    except ImportError:
        return _geom_py, "python"
    return _geom, "cython"


impl, BACKEND = _load()


def available_backends() -> dict[str, ModuleType]:
    out = {"python": _geom_py}
    try:
        from vtanim import _geom

        out["cython"] = _geom
    except ImportError:
        pass
    return out
