"""Kernel backend chosen at import: the compiled extension when importable, else NumPy.

Set COUETTE_KINETICS_BACKEND=python to force the fallback.
"""

from __future__ import annotations

import os

from . import _fallback

NAME = "python"
kernels = _fallback

if os.environ.get("COUETTE_KINETICS_BACKEND", "").lower() != "python":
    try:
        from . import _kernels as _compiled
    except ImportError:  # pragma: no cover - depends on the build
        _compiled = None
    if _compiled is not None:
        kernels = _compiled
        NAME = "compiled"


def get(name: str | None = None):
    """Kernel module by name ("compiled" or "python"); default is the import-time choice."""
    if name is None:
        return kernels
    if name == "python":
        return _fallback
    if name == "compiled":
        from . import _kernels

        return _kernels
    raise ValueError(f"unknown backend {name!r}")


def default_threads() -> int:
    raw = os.environ.get("KINETICS_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1
