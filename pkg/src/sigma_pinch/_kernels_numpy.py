"""Pure-numpy kernels: vectorized reference implementations.

Shared contract with the numba twin:
  fold_sum(flat) -> float
  curvature_nodes(n, g, dg, ddg, want_rank4) -> dict
  pencil_eigenvalues(n, a, g) -> (p, n) descending

Packed symmetric layout: component k of sym_pairs(n), lexicographic upper
triangle. Second metric derivatives arrive packed over axis pairs in the
same order: ddg has shape (p, m, m). Node arrays are flat (p, ...); large
inputs are processed in chunks to bound peak memory (rank-4 intermediates
are chunk-local).
"""
from __future__ import annotations

import math

import numpy as np

CHUNK = 1 << 15


def fold_sum(flat: np.ndarray) -> float:
    return math.fsum(flat.tolist())


def _pairs(n: int):
    return [(i, j) for i in range(n) for j in range(i, n)]


def _index_table(n: int) -> np.ndarray:
    t = np.zeros((n, n), dtype=np.int64)
    for k, (i, j) in enumerate(_pairs(n)):
        t[i, j] = k
        t[j, i] = k
    return t


def _unpack(packed: np.ndarray, n: int) -> np.ndarray:
    """(p, m) -> (p, n, n)."""
    p = packed.shape[0]
    out = np.empty((p, n, n))
    for k, (i, j) in enumerate(_pairs(n)):
        out[:, i, j] = packed[:, k]
        out[:, j, i] = packed[:, k]
    return out


def _pack(full: np.ndarray, n: int) -> np.ndarray:
    m = n * (n + 1) // 2
    p = full.shape[0]
    out = np.empty((p, m))
    for k, (i, j) in enumerate(_pairs(n)):
        out[:, k] = full[:, i, j]
    return out


def _kn_product(h: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Kulkarni-Nomizu product of two (p, n, n) symmetric tensors."""
    t1 = np.einsum("pac,pbd->pabcd", h, k)
    t2 = np.einsum("pbd,pac->pabcd", h, k)
    t3 = np.einsum("pad,pbc->pabcd", h, k)
    t4 = np.einsum("pbc,pad->pabcd", h, k)
    return t1 + t2 - t3 - t4


def _rank4_norm2(t: np.ndarray, ginv: np.ndarray) -> np.ndarray:
    up = np.einsum("pae,pebcd->pabcd", ginv, t)
    up = np.einsum("pbe,paecd->pabcd", ginv, up)
    up = np.einsum("pce,pabed->pabcd", ginv, up)
    up = np.einsum("pde,pabce->pabcd", ginv, up)
    return np.einsum("pabcd,pabcd->p", t, up)


def _curvature_chunk(n: int, g: np.ndarray, dg: np.ndarray, ddg: np.ndarray,
                     want_rank4: bool) -> dict:
    p = g.shape[0]
    idx = _index_table(n)
    G = _unpack(g, n)
    Ginv = np.linalg.inv(G)

    # lowered Christoffel gl[p, f, b, c] = (dg[b,(f,c)] + dg[c,(f,b)] - dg[f,(b,c)])/2
    gl = np.empty((p, n, n, n))
    for f in range(n):
        for b in range(n):
            for c in range(b, n):
                v = 0.5 * (dg[:, b, idx[f, c]] + dg[:, c, idx[f, b]] - dg[:, f, idx[b, c]])
                gl[:, f, b, c] = v
                gl[:, f, c, b] = v
    gu = np.einsum("pef,pfbc->pebc", Ginv, gl)

    # second-derivative block of the curvature; ddg is packed over axis
    # pairs in the same upper-triangle order as the component slot
    D2 = ddg[:, idx.ravel(), :][:, :, idx.ravel()].reshape(p, n, n, n, n)  # [p, x1, x2, y1, y2]
    riem = 0.5 * (
        np.transpose(D2, (0, 1, 3, 4, 2))       # d_a d_d g_bc
        + np.transpose(D2, (0, 3, 1, 2, 4))     # d_b d_c g_ad
        - np.transpose(D2, (0, 1, 3, 2, 4))     # d_a d_c g_bd
        - np.transpose(D2, (0, 3, 1, 4, 2))     # d_b d_d g_ac
    )
    riem = riem + np.einsum("pead,pebc->pabcd", gu, gl) - np.einsum("peac,pebd->pabcd", gu, gl)

    ric = np.einsum("pac,pabcd->pbd", Ginv, riem)
    scal = np.einsum("pbd,pbd->p", Ginv, ric)

    e_tf = ric - (scal / n)[:, None, None] * G
    schouten = (ric - (scal / (2.0 * (n - 1)))[:, None, None] * G) / (n - 2)

    riem2 = _rank4_norm2(riem, Ginv)
    weyl = riem - _kn_product(schouten, G)
    weyl2 = _rank4_norm2(weyl, Ginv)

    out = {
        "gamma": gu,  # repacked by caller
        "gl": gl,
        "ric": _pack(ric, n),
        "scal": scal,
        "e_tf": _pack(e_tf, n),
        "schouten": _pack(schouten, n),
        "riem_norm2": riem2,
        "weyl_norm2": weyl2,
    }
    if want_rank4:
        out["riem"] = riem
        out["weyl"] = weyl
    return out


def curvature_nodes(n: int, g: np.ndarray, dg: np.ndarray, ddg: np.ndarray,
                    want_rank4: bool) -> dict:
    p = g.shape[0]
    m = n * (n + 1) // 2
    pairs = _pairs(n)
    gamma = np.empty((p, n, m))
    ric = np.empty((p, m))
    scal = np.empty(p)
    e_tf = np.empty((p, m))
    schouten = np.empty((p, m))
    riem2 = np.empty(p)
    weyl2 = np.empty(p)
    riem = np.empty((p, n, n, n, n)) if want_rank4 else None
    weyl = np.empty((p, n, n, n, n)) if want_rank4 else None

    for start in range(0, p, CHUNK):
        sl = slice(start, min(start + CHUNK, p))
        res = _curvature_chunk(n, g[sl], dg[sl], ddg[sl], want_rank4)
        for k, (i, j) in enumerate(pairs):
            gamma[sl, :, k] = res["gamma"][:, :, i, j]
        ric[sl] = res["ric"]
        scal[sl] = res["scal"]
        e_tf[sl] = res["e_tf"]
        schouten[sl] = res["schouten"]
        riem2[sl] = res["riem_norm2"]
        weyl2[sl] = res["weyl_norm2"]
        if want_rank4:
            riem[sl] = res["riem"]
            weyl[sl] = res["weyl"]

    out = {
        "gamma": gamma,
        "ric": ric,
        "scal": scal,
        "e_tf": e_tf,
        "schouten": schouten,
        "riem_norm2": riem2,
        "weyl_norm2": weyl2,
    }
    if want_rank4:
        out["riem"] = riem
        out["weyl"] = weyl
    return out


def pencil_eigenvalues(n: int, a: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Eigenvalues of a w.r.t. g, per node, descending."""
    p = a.shape[0]
    out = np.empty((p, n))
    for start in range(0, p, CHUNK):
        sl = slice(start, min(start + CHUNK, p))
        A = _unpack(a[sl], n)
        G = _unpack(g[sl], n)
        L = np.linalg.cholesky(G)
        # B = L^{-1} A L^{-T}, same spectrum as the pencil
        tmp = np.linalg.solve(L, A)
        B = np.linalg.solve(L, np.transpose(tmp, (0, 2, 1)))
        B = 0.5 * (B + np.transpose(B, (0, 2, 1)))
        vals = np.linalg.eigvalsh(B)
        out[sl] = vals[:, ::-1]
    return out
