"""Kernel backend selection.

The compiled extension is used when it imports; ``BEVSPLAT_BACKEND=python``
forces the numpy fallback. ``BEVSPLAT_THREADS`` caps worker threads.
"""

from __future__ import annotations

import logging
import os
from types import ModuleType

from . import _splat_py

log = logging.getLogger(__name__)


def _load() -> tuple[str, ModuleType]:
    if os.environ.get("BEVSPLAT_BACKEND", "").lower() == "python":
        return "python", _splat_py
    try:
        from . import _splat_ext
    except ImportError as exc:  # pragma: no cover - depends on the build
        log.warning("compiled splat kernels unavailable (%s); using numpy fallback", exc)
        return "python", _splat_py
    return "cython", _splat_ext


BACKEND_NAME, kernels = _load()

BACKENDS: dict[str, ModuleType] = {"python": _splat_py}
if BACKEND_NAME == "cython":
    BACKENDS["cython"] = kernels


def get_kernels(name: str | None = None) -> ModuleType:
    if name is None:
        return kernels
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"backend {name!r} not available; have {sorted(BACKENDS)}") from None


def thread_count(requested: int | None = None) -> int:
    """Resolve the worker count: explicit request, else ``BEVSPLAT_THREADS``, else all cores."""
    if requested is not None:
        n = int(requested)
    else:
        env = os.environ.get("BEVSPLAT_THREADS")
        n = int(env) if env else (os.cpu_count() or 1)
    return max(1, n)
