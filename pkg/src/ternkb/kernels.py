"""Selects the compiled kernels when built, else the pure-Python ones.

Set ``TERNKB_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import os

from . import _kernels_py as python_backend
from .errors import ConfigError

compiled_backend = None
if not os.environ.get("TERNKB_PURE_PYTHON"):
    try:
        from . import _kernels as compiled_backend  # type: ignore[no-redef]
    except ImportError:  # extension not built
        compiled_backend = None

active = compiled_backend if compiled_backend is not None else python_backend
BACKEND = active.BACKEND


def get_backend(name: str | None = None):
    """``"compiled"``, ``"python"`` or None for the import-time choice."""
    if name is None:
        return active
    if name == "python":
        return python_backend
    if name == "compiled":
        if compiled_backend is None:
            raise ConfigError("compiled kernels are not built; run `pip install -e .`")
        return compiled_backend
    raise ConfigError(f"unknown kernel backend {name!r}")
