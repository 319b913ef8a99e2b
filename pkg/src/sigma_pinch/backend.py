"""Backend selection: numba-compiled kernels with a pure-numpy fallback.

SIGMA_PINCH_BACKEND = auto | numba | numpy   (default auto)
SIGMA_PINCH_THREADS = positive integer        (default 1)

auto picks numba when it imports cleanly. Each backend is individually
bit-reproducible: node-parallel maps carry no cross-node reductions, and
integral folds run in one fixed order. The two backends may differ from
each other in the last bits (fsum vs sequential adds).
"""
from __future__ import annotations

import math
import os

import numpy as np

_VALID = ("auto", "numba", "numpy")
_state: dict = {"name": None, "threads": None}


def _requested() -> str:
    val = os.environ.get("SIGMA_PINCH_BACKEND", "auto").strip().lower()
    if val not in _VALID:
        raise ValueError(
            f"SIGMA_PINCH_BACKEND must be one of {_VALID}, got {val!r}"
        )
    return val


def _requested_threads() -> int:
    raw = os.environ.get("SIGMA_PINCH_THREADS", "1").strip()
    try:
        t = int(raw)
    except ValueError:
        raise ValueError(f"SIGMA_PINCH_THREADS must be an integer, got {raw!r}")
    if t < 1:
        raise ValueError("SIGMA_PINCH_THREADS must be positive")
    return t


def active_backend(refresh: bool = False) -> str:
    """Resolve and cache the backend name ('numba' or 'numpy')."""
    if _state["name"] is not None and not refresh:
        return _state["name"]
    req = _requested()
    name = "numpy"
    if req in ("auto", "numba"):
        try:
            import numba  # noqa: F401

            name = "numba"
        except Exception:
            if req == "numba":
                raise RuntimeError("SIGMA_PINCH_BACKEND=numba but numba failed to import")
            name = "numpy"
    _state["name"] = name
    if name == "numba":
        import numba

        threads = min(_requested_threads(), numba.config.NUMBA_NUM_THREADS)
        numba.set_num_threads(threads)
        _state["threads"] = threads
    else:
        _state["threads"] = 1
    return name


def fold_sum(values: np.ndarray) -> float:
    """Deterministic full-array sum used by every quadrature.

    numpy backend: math.fsum (exactly rounded). numba backend: strict
    sequential fold inside the compiled kernel.
    """
    flat = np.ascontiguousarray(values, dtype=np.float64).ravel()
    if active_backend() == "numba":
        from . import _kernels_numba as K

        return float(K.fold_sum(flat))
    return math.fsum(flat.tolist())


def kernels():
    """The active kernel module (shared function signatures)."""
    if active_backend() == "numba":
        from . import _kernels_numba as K
    else:
        from . import _kernels_numpy as K
    return K


def curvature_nodes(n: int, g: np.ndarray, dg: np.ndarray, ddg: np.ndarray,
                    want_rank4: bool) -> dict:
    """Pointwise curvature bundle from metric jets, flattened over nodes.

    g: (p, m) packed metric, dg: (p, n, m), ddg: (p, m, m) with
    m = n(n+1)/2; the first ddg slot runs over axis pairs in the same
    upper-triangle order as the component slot.
    Returns packed arrays keyed gamma, ric, scal, e_tf, schouten,
    riem_norm2, weyl_norm2, and riem/weyl when want_rank4.
    """
    K = kernels()
    return K.curvature_nodes(n, g, dg, ddg, want_rank4)


def pencil_eigenvalues(n: int, a: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Eigenvalues of a relative to g (descending), per node.

    a, g: (p, m) packed symmetric; g positive definite.
    """
    K = kernels()
    return K.pencil_eigenvalues(n, a, g)
