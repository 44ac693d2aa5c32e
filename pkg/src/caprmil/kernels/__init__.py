"""Attention-head kernels with a compiled backend and a NumPy fallback.

The compiled extension is picked at import when it was built; otherwise the
NumPy implementation is used. :func:`use_backend` switches explicitly (the
benchmark and tests compare both).
"""

from __future__ import annotations

import contextlib

import numpy as np

from . import _reference

try:
    from . import _fused
except ImportError:  # extension not built
    _fused = None

_BACKENDS = {"python": _reference}
if _fused is not None:
    _BACKENDS["compiled"] = _fused

_active = "compiled" if _fused is not None else "python"


def available() -> list[str]:
    return sorted(_BACKENDS)


def backend() -> str:
    return _active


def use_backend(name: str) -> None:
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"kernel backend {name!r} is not available (have {available()})")
    _active = name


@contextlib.contextmanager
def backend_scope(name: str):
    prev = _active
    use_backend(name)
    try:
        yield
    finally:
        use_backend(prev)


def _c(a, dtype):
    return np.ascontiguousarray(a, dtype=dtype)


def assign_aggregate(x, f, w_cluster, b_cluster, tau, n_heads: int, eps: float):
    dt = x.dtype
    return _BACKENDS[_active].assign_aggregate(
        _c(x, dt), _c(f, dt), _c(w_cluster, dt), _c(b_cluster, dt), _c(tau, dt), int(n_heads), float(eps)
    )


def broadcast(w, tokens):
    dt = w.dtype
    return _BACKENDS[_active].broadcast(_c(w, dt), _c(tokens, dt))
