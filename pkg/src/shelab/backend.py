"""Selection between the compiled stepping kernel and the numpy fallback.

The compiled extension is preferred when importable.  SHELAB_BACKEND forces
the choice: ``compiled``, ``python`` or ``auto`` (default).  Both kernels
implement the identical update, so results do not depend on the choice for
the polynomial sigma kinds; see benchmarks/bench_backends.py for the speed
comparison.
"""

from __future__ import annotations

import os

from . import _fallback

try:
    from . import _core
except ImportError:  # pure-Python install or failed build
    _core = None

HAVE_COMPILED = _core is not None

_VALID = ("auto", "compiled", "python")


def available_backends() -> tuple[str, ...]:
    return ("compiled", "python") if HAVE_COMPILED else ("python",)


def default_backend() -> str:
    choice = os.environ.get("SHELAB_BACKEND", "auto").strip().lower()
    if choice not in _VALID:
        raise ValueError(f"SHELAB_BACKEND must be one of {_VALID}, got {choice!r}")
    if choice == "auto":
        return "compiled" if HAVE_COMPILED else "python"
    return choice


def resolve(name: str | None = None):
    """Return the step_field callable for the requested backend."""
    choice = name if name is not None else default_backend()
    if choice == "auto":
        choice = "compiled" if HAVE_COMPILED else "python"
    if choice == "compiled":
        if not HAVE_COMPILED:
            raise RuntimeError("compiled backend requested but shelab._core is not built")
        return _core.step_field
    if choice == "python":
        return _fallback.step_field
    raise ValueError(f"unknown backend {choice!r}; expected one of {_VALID}")
