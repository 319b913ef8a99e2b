"""Elementary symmetric functions of a metric pencil and their cone algebra.

Everything here is pointwise linear algebra: spectra of a symmetric
tensor relative to the metric, sigma_k of those spectra, Newton
transformations, and the open cones where sigma_1 .. sigma_k stay
positive. Field-level entry points flatten over grid nodes and call the
active backend kernel for the eigenvalue sweep.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend
from .grid import MetricField, SymTensor2Field

# strict open-cone margin: boundary spectra must fail membership
CONE_MARGIN = 1e-10


def sigma_all(eigs: np.ndarray) -> np.ndarray:
    """All elementary symmetric polynomials of the trailing axis.

    eigs: (..., n) -> (..., n+1) with slot k holding sigma_k; slot 0 is 1.
    Stable Horner-style recurrence building characteristic-polynomial
    coefficients one eigenvalue at a time.
    """
    eigs = np.asarray(eigs, dtype=np.float64)
    n = eigs.shape[-1]
    out = np.zeros(eigs.shape[:-1] + (n + 1,))
    out[..., 0] = 1.0
    for i in range(n):
        lam = eigs[..., i]
        for k in range(i + 1, 0, -1):
            out[..., k] = out[..., k] + lam * out[..., k - 1]
    return out


def sigma_k(eigs: np.ndarray, k: int) -> np.ndarray:
    n = np.asarray(eigs).shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"sigma_{k} undefined for {n} eigenvalues")
    return sigma_all(eigs)[..., k]


def sigma_from_matrix(m: np.ndarray) -> np.ndarray:
    """sigma_0 .. sigma_n of a symmetric matrix via power-trace recursion.

    Same values as sigma_all over the spectrum, but with no eigenvalue
    factorization; keeps randomized sweeps off the LAPACK dispatch path.
    """
    m = np.asarray(m, dtype=np.float64)
    n = m.shape[-1]
    p = np.empty(n + 1)
    mp = m
    for i in range(1, n + 1):
        p[i] = np.trace(mp)
        if i < n:
            mp = mp @ m
    e = np.empty(n + 1)
    e[0] = 1.0
    for k in range(1, n + 1):
        acc = 0.0
        for j in range(1, k + 1):
            acc += (-1.0) ** (j - 1) * e[k - j] * p[j]
        e[k] = acc / k
    return e


def pencil_spectrum(a_mat: np.ndarray, g_mat: np.ndarray) -> np.ndarray:
    """Eigenvalues of a relative to g, descending; both (n, n) symmetric."""
    d, q = np.linalg.eigh(g_mat)
    if d.min() <= 0:
        raise ValueError("metric block not positive definite")
    w = q * (1.0 / np.sqrt(d))
    b = w.T @ a_mat @ w
    return np.linalg.eigvalsh(0.5 * (b + b.T))[::-1]


@dataclass
class NewtonPair:
    """Newton transformation and its t-shifted companion at one node.

    Lower-index symmetric matrices; positivity is meant relative to g.
    """
    newton: np.ndarray
    shifted: np.ndarray
    sigma: np.ndarray          # sigma_0 .. sigma_n of the pencil

    def contraction(self, a_mat: np.ndarray, g_mat: np.ndarray) -> float:
        """T^{ij} A_{ij} (indices raised with g)."""
        gi = np.linalg.inv(g_mat)
        return float(np.trace(gi @ self.newton @ gi @ a_mat))

    def trace(self, g_mat: np.ndarray) -> float:
        return float(np.trace(np.linalg.inv(g_mat) @ self.newton))


def newton_and_lt(a_mat: np.ndarray, g_mat: np.ndarray, k: int, t: float) -> NewtonPair:
    """(k-1)-th Newton transformation of a relative to g, plus the
    t-interpolated tensor used by the linearized operator.

    T_{k-1} = sum_{j=0..k-1} (-1)^j sigma_{k-1-j} B^j in the orthonormal
    frame of g (B the symmetrized pencil), mapped back to lower indices.
    """
    a_mat = np.asarray(a_mat, dtype=np.float64)
    g_mat = np.asarray(g_mat, dtype=np.float64)
    n = a_mat.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"newton transform needs 1 <= k <= {n}, got {k}")
    d, q = np.linalg.eigh(g_mat)
    if d.min() <= 0:
        raise ValueError("metric block not positive definite")
    w = q * (1.0 / np.sqrt(d))          # g^{-1/2}
    wi = q * np.sqrt(d)                 # g^{1/2}
    b = w.T @ a_mat @ w
    b = 0.5 * (b + b.T)
    sig = sigma_all(np.linalg.eigvalsh(b))
    t_frame = np.zeros_like(b)
    b_pow = np.eye(n)
    for j in range(k):
        t_frame = t_frame + (-1.0) ** j * sig[k - 1 - j] * b_pow
        b_pow = b_pow @ b
    shift = (1.0 - t) / (n - 2) * np.trace(t_frame)
    l_frame = t_frame + shift * np.eye(n)
    return NewtonPair(
        newton=wi @ t_frame @ wi.T,
        shifted=wi @ l_frame @ wi.T,
        sigma=sig,
    )


# ---------------------------------------------------------------------------
# field-level sweeps
# ---------------------------------------------------------------------------

def spectrum_field(a: SymTensor2Field, g: MetricField) -> np.ndarray:
    """Per-node pencil eigenvalues, descending: (*shape, n)."""
    if not a.grid.same_layout(g.grid):
        raise ValueError("tensor and metric live on different grids")
    n = g.dim
    shape = g.grid.shape
    flat_a = np.ascontiguousarray(a.comps.reshape(-1, a.comps.shape[-1]))
    flat_g = np.ascontiguousarray(g.tensor.comps.reshape(-1, flat_a.shape[-1]))
    eigs = backend.pencil_eigenvalues(n, flat_a, flat_g)
    return eigs.reshape(shape + (n,))


def sigma_field(a: SymTensor2Field, g: MetricField, k: int) -> np.ndarray:
    """sigma_k(g^{-1} a) at every node."""
    return sigma_k(spectrum_field(a, g), k)


@dataclass
class ConeReport:
    """Membership of a tensor field in the nested positivity cones."""
    dim: int
    member: list            # member[k-1]: field lies in the k-th cone
    margin: list            # min over nodes of min_{j<=k} sigma_j
    worst_node: list        # flat node index attaining the margin

    def in_cone(self, k: int) -> bool:
        return bool(self.member[k - 1])


def cone_check(a: SymTensor2Field, g: MetricField, k: int) -> ConeReport:
    """Evaluate cone membership for every level up to k."""
    n = g.dim
    if not 1 <= k <= n:
        raise ValueError(f"cone level must be in 1..{n}")
    sig = sigma_all(spectrum_field(a, g)).reshape(-1, n + 1)
    member, margin, worst = [], [], []
    running = np.full(sig.shape[0], np.inf)
    for j in range(1, k + 1):
        running = np.minimum(running, sig[:, j])
        node = int(np.argmin(running))
        member.append(bool(running[node] > CONE_MARGIN))
        margin.append(float(running[node]))
        worst.append(node)
    # the nested-cone inclusion is structural: the running minimum can
    # only shrink, so membership is monotone down the chain
    for lo, hi in zip(member, member[1:]):
        assert lo or not hi
    return ConeReport(dim=n, member=member, margin=margin, worst_node=worst)


# ---------------------------------------------------------------------------
# randomized lemma suite
# ---------------------------------------------------------------------------

def _draw_cone2(rng: np.random.Generator, n: int) -> np.ndarray:
    """Random symmetric matrix rejected into the level-2 cone.

    Membership needs only sigma_1 and sigma_2, so the rejection test
    runs on traces over a whole batch of candidates at once.
    """
    for _ in range(64):
        m = rng.normal(size=(8, n, n))
        a = 0.5 * (m + np.swapaxes(m, -1, -2))
        p1 = np.einsum("kii->k", a)
        p2 = np.einsum("kij,kij->k", a, a)
        ok = (p1 > CONE_MARGIN) & (0.5 * (p1 * p1 - p2) > CONE_MARGIN)
        hits = np.flatnonzero(ok)
        if hits.size:
            return a[hits[0]]
    raise RuntimeError("rejection sampler starved; widen the distribution")


def _sigma_and_powers(a: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """sigma vector plus the stacked matrix powers I, a, .., a^n."""
    pows = np.empty((n + 1, n, n))
    pows[0] = np.eye(n)
    for i in range(1, n + 1):
        pows[i] = pows[i - 1] @ a
    p = np.einsum("kii->k", pows)
    e = np.empty(n + 1)
    e[0] = 1.0
    for k in range(1, n + 1):
        acc = 0.0
        for j in range(1, k + 1):
            acc += (-1.0) ** (j - 1) * e[k - j] * p[j]
        e[k] = acc / k
    return e, pows


MACLAURIN_K2 = {3: np.sqrt(3.0), 4: 4.0 / np.sqrt(6.0)}


def cone_lemma_suite(seed: int, trials: int, n: int) -> dict:
    """Property sweep over random level-2-cone samples.

    Checks, per sample: the Newton contraction and trace identities for
    every k, the k=2 Maclaurin bound, concavity of sqrt(sigma_2) along a
    random chord, and positive definiteness of the two pinching matrices
    -A + sigma_1 I and A + (n-2)/n sigma_1 I.
    Returns violation counts (all zero on a healthy build) and worst
    margins; deterministic for fixed (seed, trials, n).
    """
    if n not in (3, 4):
        raise ValueError("suite covers dimensions 3 and 4")
    if trials < 1:
        raise ValueError("trials must be positive")
    eye = np.eye(n)
    viol = {"identity_contraction": 0, "identity_trace": 0,
            "maclaurin": 0, "concavity": 0,
            "pinch_lower": 0, "pinch_upper": 0}
    worst = {"identity": 0.0, "maclaurin": np.inf,
             "concavity": np.inf, "pinch_eig": np.inf}
    c_mac = MACLAURIN_K2[n]
    k_rng = np.arange(1, n + 1, dtype=np.float64)
    for i in range(trials):
        rng = np.random.default_rng([seed, i])
        a = _draw_cone2(rng, n)
        b = _draw_cone2(rng, n)
        sig, pows = _sigma_and_powers(a, n)
        # Newton transforms for every level in one shot:
        # T_{k-1} = sum_j (-1)^j sigma_{k-1-j} a^j
        coef = np.zeros((n, n))
        for k in range(1, n + 1):
            for j in range(k):
                coef[k - 1, j] = (-1.0) ** j * sig[k - 1 - j]
        t_mats = np.einsum("kj,jab->kab", coef, pows[:n])
        contr = np.einsum("kab,ba->k", t_mats, a)
        trc = np.einsum("kaa->k", t_mats)
        scale = np.maximum(1.0, np.abs(k_rng * sig[1:]))
        r1 = np.abs(contr - k_rng * sig[1:]) / scale
        r2 = np.abs(trc - (n - k_rng + 1) * sig[:n]) / scale
        worst["identity"] = max(worst["identity"], r1.max(), r2.max())
        viol["identity_contraction"] += int((r1 > 1e-12).sum())
        viol["identity_trace"] += int((r2 > 1e-12).sum())
        mac = sig[1] - c_mac * np.sqrt(sig[2])
        worst["maclaurin"] = min(worst["maclaurin"], mac)
        if mac < -1e-12:
            viol["maclaurin"] += 1
        rho = rng.uniform()
        mix = rho * a + (1.0 - rho) * b
        s2_mix = 0.5 * (np.trace(mix) ** 2 - float(np.einsum("ij,ij->", mix, mix)))
        s2_b = 0.5 * (np.trace(b) ** 2 - float(np.einsum("ij,ij->", b, b)))
        gap = np.sqrt(max(s2_mix, 0.0)) - (
            rho * np.sqrt(sig[2]) + (1.0 - rho) * np.sqrt(s2_b))
        worst["concavity"] = min(worst["concavity"], gap)
        if gap < -1e-12:
            viol["concavity"] += 1
        # -a + sigma_1 I and a + (n-2)/n sigma_1 I share a's eigenbasis,
        # so their smallest eigenvalues come straight from a's extremes
        lam = np.linalg.eigvalsh(a)
        lo = sig[1] - lam[-1]
        hi = lam[0] + (n - 2) / n * sig[1]
        worst["pinch_eig"] = min(worst["pinch_eig"], lo, hi)
        if lo <= 0:
            viol["pinch_lower"] += 1
        if hi <= 0:
            viol["pinch_upper"] += 1
    return {
        "dim": n, "seed": seed, "trials": trials,
        "violations": viol,
        "worst": {k: float(v) for k, v in worst.items()},
        "passed": not any(viol.values()),
    }
