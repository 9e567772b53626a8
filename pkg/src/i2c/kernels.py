"""Backend selection for the chain forward/backward pass.

The compiled kernel is used when it imports; set ``I2C_PURE_PYTHON=1`` to force the
numpy implementation. Both backends return a :class:`ChainResult`.
"""

from __future__ import annotations

import os

from . import _kernel_py
from ._kernel_py import ChainResult

try:
    from . import _kernel as _kernel_c
except ImportError:  # extension not built
    _kernel_c = None

HAVE_COMPILED = _kernel_c is not None
_backend = "python" if (_kernel_c is None or os.environ.get("I2C_PURE_PYTHON")) else "compiled"


def backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    """Select ``"compiled"`` or ``"python"``."""
    global _backend
    if name not in ("compiled", "python"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "compiled" and _kernel_c is None:
        raise RuntimeError("compiled kernel is not available; build the extension first")
    _backend = name


def forward_backward(*args, backend: str | None = None) -> ChainResult:
    which = backend or _backend
    if which == "compiled":
        out = _kernel_c.forward_backward(*args)
        if not out[-1]:
            return ChainResult(*out[:-1], degenerate=False)
    return _kernel_py.forward_backward(*args)
