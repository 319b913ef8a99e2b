"""Numba kernels: per-node compiled loops, parallel over nodes.

Same contract as the numpy twin. Node maps are embarrassingly parallel
(prange carries no cross-node reductions); fold_sum is a strict sequential
left fold, so results do not depend on the thread count.
"""
from __future__ import annotations

import numpy as np
from numba import njit, prange


@njit(cache=True)
def fold_sum(flat):
    s = 0.0
    for i in range(flat.shape[0]):
        s += flat[i]
    return s


@njit(cache=True)
def _invert(G, out):
    """Gauss-Jordan inverse with partial pivoting, small n."""
    n = G.shape[0]
    a = G.copy()
    for i in range(n):
        for j in range(n):
            out[i, j] = 1.0 if i == j else 0.0
    for col in range(n):
        piv = col
        best = abs(a[col, col])
        for r in range(col + 1, n):
            if abs(a[r, col]) > best:
                best = abs(a[r, col])
                piv = r
        if piv != col:
            for j in range(n):
                t = a[col, j]
                a[col, j] = a[piv, j]
                a[piv, j] = t
                t = out[col, j]
                out[col, j] = out[piv, j]
                out[piv, j] = t
        d = a[col, col]
        inv_d = 1.0 / d
        for j in range(n):
            a[col, j] *= inv_d
            out[col, j] *= inv_d
        for r in range(n):
            if r != col:
                f = a[r, col]
                if f != 0.0:
                    for j in range(n):
                        a[r, j] -= f * a[col, j]
                        out[r, j] -= f * out[col, j]


@njit(cache=True)
def _rank4_norm2(t, Gi, n, t1, t2):
    # raise each index in turn, then contract against the lowered tensor
    for a in range(n):
        for b in range(n):
            for c in range(n):
                for d in range(n):
                    s = 0.0
                    for e in range(n):
                        s += Gi[a, e] * t[e, b, c, d]
                    t1[a, b, c, d] = s
    for a in range(n):
        for b in range(n):
            for c in range(n):
                for d in range(n):
                    s = 0.0
                    for e in range(n):
                        s += Gi[b, e] * t1[a, e, c, d]
                    t2[a, b, c, d] = s
    for a in range(n):
        for b in range(n):
            for c in range(n):
                for d in range(n):
                    s = 0.0
                    for e in range(n):
                        s += Gi[c, e] * t2[a, b, e, d]
                    t1[a, b, c, d] = s
    total = 0.0
    for a in range(n):
        for b in range(n):
            for c in range(n):
                for d in range(n):
                    s = 0.0
                    for e in range(n):
                        s += Gi[d, e] * t1[a, b, c, e]
                    total += s * t[a, b, c, d]
    return total


@njit(cache=True, parallel=True)
def _curv_core(n, m, g, dg, ddg, idx, pi, pj, store_rank4,
               gamma, ric, scal, e_tf, schouten, riem2, weyl2, riem4, weyl4):
    p = g.shape[0]
    for node in prange(p):
        G = np.empty((n, n))
        for k in range(m):
            G[pi[k], pj[k]] = g[node, k]
            G[pj[k], pi[k]] = g[node, k]
        Gi = np.empty((n, n))
        _invert(G, Gi)

        gl = np.empty((n, n, n))
        for f in range(n):
            for b in range(n):
                for c in range(b, n):
                    v = 0.5 * (dg[node, b, idx[f, c]] + dg[node, c, idx[f, b]]
                               - dg[node, f, idx[b, c]])
                    gl[f, b, c] = v
                    gl[f, c, b] = v
        gu = np.empty((n, n, n))
        for e in range(n):
            for b in range(n):
                for c in range(n):
                    s = 0.0
                    for f in range(n):
                        s += Gi[e, f] * gl[f, b, c]
                    gu[e, b, c] = s

        riem = np.empty((n, n, n, n))
        for a in range(n):
            for b in range(n):
                for c in range(n):
                    for d in range(n):
                        v = 0.5 * (ddg[node, idx[a, d], idx[b, c]] + ddg[node, idx[b, c], idx[a, d]]
                                   - ddg[node, idx[a, c], idx[b, d]] - ddg[node, idx[b, d], idx[a, c]])
                        s = 0.0
                        for e in range(n):
                            s += gu[e, a, d] * gl[e, b, c] - gu[e, a, c] * gl[e, b, d]
                        riem[a, b, c, d] = v + s

        Rc = np.empty((n, n))
        for b in range(n):
            for d in range(n):
                s = 0.0
                for a in range(n):
                    for c in range(n):
                        s += Gi[a, c] * riem[a, b, c, d]
                Rc[b, d] = s
        R = 0.0
        for b in range(n):
            for d in range(n):
                R += Gi[b, d] * Rc[b, d]

        A = np.empty((n, n))
        cA = R / (2.0 * (n - 1))
        for i in range(n):
            for j in range(n):
                A[i, j] = (Rc[i, j] - cA * G[i, j]) / (n - 2)

        t1 = np.empty((n, n, n, n))
        t2 = np.empty((n, n, n, n))
        riem2[node] = _rank4_norm2(riem, Gi, n, t1, t2)

        W = np.empty((n, n, n, n))
        for a in range(n):
            for b in range(n):
                for c in range(n):
                    for d in range(n):
                        kn = (A[a, c] * G[b, d] + A[b, d] * G[a, c]
                              - A[a, d] * G[b, c] - A[b, c] * G[a, d])
                        W[a, b, c, d] = riem[a, b, c, d] - kn
        weyl2[node] = _rank4_norm2(W, Gi, n, t1, t2)

        scal[node] = R
        for k in range(m):
            i = pi[k]
            j = pj[k]
            ric[node, k] = Rc[i, j]
            e_tf[node, k] = Rc[i, j] - (R / n) * G[i, j]
            schouten[node, k] = A[i, j]
            for e in range(n):
                gamma[node, e, k] = gu[e, i, j]
        if store_rank4:
            for a in range(n):
                for b in range(n):
                    for c in range(n):
                        for d in range(n):
                            riem4[node, a, b, c, d] = riem[a, b, c, d]
                            weyl4[node, a, b, c, d] = W[a, b, c, d]


def curvature_nodes(n: int, g: np.ndarray, dg: np.ndarray, ddg: np.ndarray,
                    want_rank4: bool) -> dict:
    p = g.shape[0]
    m = n * (n + 1) // 2
    pairs = [(i, j) for i in range(n) for j in range(i, n)]
    idx = np.zeros((n, n), dtype=np.int64)
    pi = np.empty(m, dtype=np.int64)
    pj = np.empty(m, dtype=np.int64)
    for k, (i, j) in enumerate(pairs):
        idx[i, j] = k
        idx[j, i] = k
        pi[k] = i
        pj[k] = j
    gamma = np.empty((p, n, m))
    ric = np.empty((p, m))
    scal = np.empty(p)
    e_tf = np.empty((p, m))
    schouten = np.empty((p, m))
    riem2 = np.empty(p)
    weyl2 = np.empty(p)
    q = p if want_rank4 else 1
    riem4 = np.empty((q, n, n, n, n))
    weyl4 = np.empty((q, n, n, n, n))
    _curv_core(n, m,
               np.ascontiguousarray(g, dtype=np.float64),
               np.ascontiguousarray(dg, dtype=np.float64),
               np.ascontiguousarray(ddg, dtype=np.float64),
               idx, pi, pj, want_rank4,
               gamma, ric, scal, e_tf, schouten, riem2, weyl2, riem4, weyl4)
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
        out["riem"] = riem4
        out["weyl"] = weyl4
    return out


@njit(cache=True)
def _cholesky(G, L):
    n = G.shape[0]
    for i in range(n):
        for j in range(n):
            L[i, j] = 0.0
    for i in range(n):
        for j in range(i + 1):
            s = G[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            if i == j:
                if s <= 0.0:
                    return False
                L[i, i] = np.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
    return True


@njit(cache=True)
def _jacobi_eigenvalues(B, n, vals):
    a = B.copy()
    scale2 = 1e-300
    for i in range(n):
        for j in range(n):
            scale2 += a[i, j] * a[i, j]
    for _ in range(60):
        off = 0.0
        for i in range(n):
            for j in range(i + 1, n):
                off += a[i, j] * a[i, j]
        if off <= 1e-30 * scale2:
            break
        for pq in range(n):
            for q in range(pq + 1, n):
                if a[pq, q] == 0.0:
                    continue
                theta = 0.5 * (a[q, q] - a[pq, pq]) / a[pq, q]
                t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta < 0.0:
                    t = -t
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    akp = a[k, pq]
                    akq = a[k, q]
                    a[k, pq] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(n):
                    apk = a[pq, k]
                    aqk = a[q, k]
                    a[pq, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
    for i in range(n):
        vals[i] = a[i, i]
    # insertion sort, descending
    for i in range(1, n):
        v = vals[i]
        j = i - 1
        while j >= 0 and vals[j] < v:
            vals[j + 1] = vals[j]
            j -= 1
        vals[j + 1] = v


@njit(cache=True, parallel=True)
def _pencil_core(n, m, a, g, pi, pj, out):
    p = a.shape[0]
    for node in prange(p):
        G = np.empty((n, n))
        A = np.empty((n, n))
        for k in range(m):
            G[pi[k], pj[k]] = g[node, k]
            G[pj[k], pi[k]] = g[node, k]
            A[pi[k], pj[k]] = a[node, k]
            A[pj[k], pi[k]] = a[node, k]
        L = np.empty((n, n))
        ok = _cholesky(G, L)
        if not ok:
            for i in range(n):
                out[node, i] = np.nan
        else:
            # W = L^{-1} A  (forward substitution per column)
            W = np.empty((n, n))
            for col in range(n):
                for i in range(n):
                    s = A[i, col]
                    for k in range(i):
                        s -= L[i, k] * W[k, col]
                    W[i, col] = s / L[i, i]
            # B^T = L^{-1} W^T
            B = np.empty((n, n))
            for col in range(n):
                for i in range(n):
                    s = W[col, i]
                    for k in range(i):
                        s -= L[i, k] * B[col, k]
                    B[col, i] = s / L[i, i]
            for i in range(n):
                for j in range(i + 1, n):
                    v = 0.5 * (B[i, j] + B[j, i])
                    B[i, j] = v
                    B[j, i] = v
            vals = np.empty(n)
            _jacobi_eigenvalues(B, n, vals)
            for i in range(n):
                out[node, i] = vals[i]


def pencil_eigenvalues(n: int, a: np.ndarray, g: np.ndarray) -> np.ndarray:
    p = a.shape[0]
    m = n * (n + 1) // 2
    pairs = [(i, j) for i in range(n) for j in range(i, n)]
    pi = np.empty(m, dtype=np.int64)
    pj = np.empty(m, dtype=np.int64)
    for k, (i, j) in enumerate(pairs):
        pi[k] = i
        pj[k] = j
    out = np.empty((p, n))
    _pencil_core(n, m,
                 np.ascontiguousarray(a, dtype=np.float64),
                 np.ascontiguousarray(g, dtype=np.float64),
                 pi, pj, out)
    return out
