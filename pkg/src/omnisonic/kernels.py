"""Hot loops with a compiled backend selected at import.

The Cython extension ``_ckernels`` is used when it was built; otherwise (or
when ``OMNISONIC_PURE_PYTHON=1``) the pure-Python versions run. Both produce
identical results.
"""
from __future__ import annotations

import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels
if os.environ.get("OMNISONIC_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels


def levenshtein(a, b, backend: str | None = None) -> int:
    """Edit distance between two integer token sequences (unit costs)."""
    impl = _pick(backend)
    a = np.ascontiguousarray(a, dtype=np.int64)
    b = np.ascontiguousarray(b, dtype=np.int64)
    if impl is _pykernels:
        return _pykernels.levenshtein(a.tolist(), b.tolist())
    return impl.levenshtein(a, b)


def resonator_coefficients(freq_hz, bandwidth_hz, rate: int):
    """Per-sample two-pole resonator coefficients, unity gain at DC-ish scale."""
    freq = np.asarray(freq_hz, dtype=np.float64)
    bw = np.asarray(bandwidth_hz, dtype=np.float64)
    r = np.exp(-np.pi * bw / rate)
    theta = 2.0 * np.pi * freq / rate
    a1 = 2.0 * r * np.cos(theta)
    a2 = -r * r
    gain = 1.0 - r
    return gain, a1, a2


def resonator(x, freq_hz, bandwidth_hz, rate: int, backend: str | None = None) -> np.ndarray:
    """Time-varying two-pole resonator: y[k] = g x[k] + a1 y[k-1] + a2 y[k-2]."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    n = x.shape[0]
    gain, a1, a2 = (
        np.ascontiguousarray(np.broadcast_to(c, (n,)), dtype=np.float64)
        for c in resonator_coefficients(freq_hz, bandwidth_hz, rate)
    )
    return _pick(backend).resonator(x, gain, a1, a2)


def _pick(backend):
    if backend is None:
        return _impl
    if backend == "python":
        return _pykernels
    if backend == "cython":
        if BACKEND != "cython":
            raise RuntimeError("compiled kernels are not available")
        return _impl
    raise ValueError(f"unknown backend {backend!r}")
