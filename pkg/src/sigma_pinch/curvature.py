"""Curvature of a gridded metric, interior and boundary.

All pointwise tensor algebra runs in the active backend kernel; this module
assembles metric jets (first and second coordinate derivatives with the
correct pole frame signs), reshapes, and exposes covariant differential
operators built from the returned Christoffel symbols.

Index conventions: packed symmetric storage in the last slot, lexicographic
upper triangle. The boundary face normal is the inward unit normal; the
second fundamental form is L_ab = +d_r g_ab / (2 sqrt(g_rr)) at the face
(r the bounded coordinate), which makes a shrinking cap positively curved.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend
from .grid import ChartGrid, MetricField, ScalarField, SymTensor2Field, sym_index, sym_pairs


def _closure_signs(grid: ChartGrid, axis: int, end: int) -> tuple[int, ...]:
    return grid.closure(axis, end).signs or tuple(1 for _ in range(grid.dim))


def _tensor2_sign(grid: ChartGrid, axis: int, end: int) -> np.ndarray:
    eps = _closure_signs(grid, axis, end)
    return np.array([eps[i] * eps[j] for i, j in sym_pairs(grid.dim)], dtype=np.float64)


def metric_jets(metric: MetricField, extended: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """First and second coordinate derivatives of the packed metric.

    dg: (*shape, n, m); ddg: (*shape, ma, m) over axis pairs (a<=d), with
    the mixed entries taken as single derivatives of dg so every ghost
    crossing uses its own axis's closure exactly once.

    extended=True differences in long double, reading the metric's
    long-double component copy when the builder attached one.  Curvature
    amplifies jet noise near chart poles by inverse-metric factors, and
    with plain double samples that noise dominates the curvature error
    on fine grids.
    """
    grid = metric.grid
    n, m = grid.dim, metric.tensor.ncomp
    if extended and metric.comps_extended is not None:
        comps = metric.comps_extended
    else:
        comps = metric.tensor.comps
    work = np.longdouble if extended else np.float64
    d1 = np.empty(grid.shape + (n, m), dtype=work)
    pairs = sym_pairs(n)
    for d in range(n):
        eps_lo = _closure_signs(grid, d, 0)
        eps_hi = _closure_signs(grid, d, 1)
        lo = np.array([eps_lo[i] * eps_lo[j] for i, j in pairs])
        hi = np.array([eps_hi[i] * eps_hi[j] for i, j in pairs])
        d1[..., d, :] = grid.apply_diff(comps, d, 1, lo_sign=lo, hi_sign=hi,
                                        extended=extended)
    ddg = np.empty(grid.shape + (len(pairs), m))
    for k, (a, d) in enumerate(pairs):
        if a == d:
            eps_lo = _closure_signs(grid, a, 0)
            eps_hi = _closure_signs(grid, a, 1)
            lo = np.array([eps_lo[i] * eps_lo[j] for i, j in pairs])
            hi = np.array([eps_hi[i] * eps_hi[j] for i, j in pairs])
            ddg[..., k, :] = grid.apply_diff(comps, a, 2, lo_sign=lo, hi_sign=hi,
                                             extended=extended)
        else:
            eps_lo = _closure_signs(grid, d, 0)
            eps_hi = _closure_signs(grid, d, 1)
            lo = np.array([eps_lo[i] * eps_lo[j] * eps_lo[a] for i, j in pairs])
            hi = np.array([eps_hi[i] * eps_hi[j] * eps_hi[a] for i, j in pairs])
            ddg[..., k, :] = grid.apply_diff(d1[..., a, :], d, 1, lo_sign=lo, hi_sign=hi,
                                             extended=extended)
    dg = d1.astype(np.float64)
    return dg, ddg


@dataclass
class BoundaryBundle:
    bgrid: ChartGrid
    face_metric: MetricField          # induced metric on the face grid
    second_form: SymTensor2Field      # L, inward normal, face-grid indices
    mean_curvature: np.ndarray        # H = tr L / (n-1)
    normal_ricci: np.ndarray          # Ric(nu, nu) at the face
    curv_dot_l: np.ndarray            # R_{a nu b nu} L^{ab}
    face_scal: np.ndarray             # ambient R restricted to the face
    normal_d_scal: np.ndarray         # d_nu R (inward)
    sqrt_g_rr: np.ndarray             # normal coordinate length at the face
    face_gamma: np.ndarray            # ambient Christoffels at the face
    face_riem: np.ndarray             # ambient rank-4 curvature at the face
    face_ginv: np.ndarray             # ambient inverse metric at the face
    hat: "CurvatureBundle | None"     # intrinsic curvature of the face metric


@dataclass
class CurvatureBundle:
    metric: MetricField
    gamma: np.ndarray        # (*shape, n, m): Gamma^e_(ij)
    ric: np.ndarray          # (*shape, m)
    scal: np.ndarray         # (*shape,)
    e_tf: np.ndarray         # traceless Ricci
    schouten: np.ndarray
    riem_norm2: np.ndarray
    weyl_norm2: np.ndarray
    riem: np.ndarray | None = None
    weyl: np.ndarray | None = None
    boundary: BoundaryBundle | None = None

    @property
    def grid(self) -> ChartGrid:
        return self.metric.grid

    def sym_norm2(self, packed: np.ndarray) -> np.ndarray:
        """|T|^2 = T_ab T_cd g^ac g^bd for packed symmetric T."""
        n = self.grid.dim
        ginv = self.metric.inverse().unpack()
        up = np.einsum("...ac,...cd->...ad", ginv, _unpack_like(packed, n))
        return np.einsum("...ad,...da->...", up, up)

    def ric_norm2(self) -> np.ndarray:
        return self.sym_norm2(self.ric)

    def e_norm2(self) -> np.ndarray:
        return self.sym_norm2(self.e_tf)

    def schouten_trace(self) -> np.ndarray:
        return self.scal / (2.0 * (self.grid.dim - 1))

    def schouten_generalized(self, t: float) -> np.ndarray:
        """A^t = A + (1-t)/(n-2) tr(A) g, packed."""
        n = self.grid.dim
        shift = (1.0 - t) / (n - 2) * self.schouten_trace()
        return self.schouten + shift[..., None] * self.metric.tensor.comps

    def sigma2_schouten(self) -> np.ndarray:
        """sigma_2 of the Schouten eigenvalues, from trace identities."""
        tr = self.schouten_trace()
        return 0.5 * (tr**2 - self.sym_norm2(self.schouten))


def _unpack_like(packed: np.ndarray, n: int) -> np.ndarray:
    out = np.empty(packed.shape[:-1] + (n, n))
    for k, (i, j) in enumerate(sym_pairs(n)):
        out[..., i, j] = packed[..., k]
        out[..., j, i] = packed[..., k]
    return out


def _flat(a: np.ndarray, grid_shape: tuple) -> np.ndarray:
    return np.ascontiguousarray(a).reshape((-1,) + a.shape[len(grid_shape):])


def compute_curvature(metric: MetricField, want_rank4: bool = False,
                      with_boundary: bool = True) -> CurvatureBundle:
    """Full curvature bundle of a metric; boundary data when a face exists."""
    grid = metric.grid
    n = grid.dim
    metric.check_positive_definite()
    dg, ddg = metric_jets(metric)
    g_flat = _flat(metric.tensor.comps, grid.shape)
    res = backend.curvature_nodes(n, g_flat, _flat(dg, grid.shape), _flat(ddg, grid.shape), want_rank4)

    def rs(a, suffix=()):
        return a.reshape(grid.shape + suffix)

    m = metric.tensor.ncomp
    bundle = CurvatureBundle(
        metric=metric,
        gamma=rs(res["gamma"], (n, m)),
        ric=rs(res["ric"], (m,)),
        scal=rs(res["scal"]),
        e_tf=rs(res["e_tf"], (m,)),
        schouten=rs(res["schouten"], (m,)),
        riem_norm2=rs(res["riem_norm2"]),
        weyl_norm2=rs(res["weyl_norm2"]),
        riem=rs(res["riem"], (n, n, n, n)) if want_rank4 else None,
        weyl=rs(res["weyl"], (n, n, n, n)) if want_rank4 else None,
    )
    if with_boundary and grid.boundary_axis is not None:
        bundle.boundary = _boundary_bundle(metric, dg, ddg, bundle)
    return bundle


def _boundary_bundle(metric: MetricField, dg: np.ndarray, ddg: np.ndarray,
                     bundle: CurvatureBundle) -> BoundaryBundle:
    grid = metric.grid
    n = grid.dim
    k = grid.boundary_axis
    keep = [i for i in range(n) if i != k]
    bgrid = grid.boundary_grid()

    face_g = grid.restrict_to_face(metric.tensor.comps)
    face_dg = grid.restrict_to_face(dg)
    face_ddg = grid.restrict_to_face(ddg)

    face_shape = bgrid.shape
    res = backend.curvature_nodes(
        n, _flat(face_g, face_shape), _flat(face_dg, face_shape),
        _flat(face_ddg, face_shape), True,
    )
    m = metric.tensor.ncomp
    face_riem = res["riem"].reshape(face_shape + (n, n, n, n))
    face_gamma = res["gamma"].reshape(face_shape + (n, m))
    face_scal = res["scal"].reshape(face_shape)
    face_ric = _unpack_like(res["ric"].reshape(face_shape + (m,)), n)

    gfull = _unpack_like(face_g, n)
    face_ginv = np.linalg.inv(gfull)
    g_rr = gfull[..., k, k]
    sqrt_g_rr = np.sqrt(g_rr)

    # induced metric and inward second fundamental form on the face grid
    idx = sym_index(n)
    nb = n - 1
    bpairs = sym_pairs(nb)
    induced = np.empty(face_shape + (len(bpairs),))
    second = np.empty_like(induced)
    for kk, (i, j) in enumerate(bpairs):
        I, J = keep[i], keep[j]
        induced[..., kk] = face_g[..., idx[I, J]]
        second[..., kk] = 0.5 * face_dg[..., k, idx[I, J]] / sqrt_g_rr
    face_metric = MetricField(SymTensor2Field(bgrid, induced), metric.catalog_id + "-face",
                              dict(metric.params))
    second_form = SymTensor2Field(bgrid, second)

    ghat_inv = face_metric.inverse().unpack()
    L_full = _unpack_like(second, nb)
    mean_h = np.einsum("...ab,...ab->...", ghat_inv, L_full) / (nb)

    normal_ricci = face_ric[..., k, k] / g_rr

    # R_{a nu b nu} L^{ab}: nu = -d_r / sqrt(g_rr), the sign squares away
    L_up = np.einsum("...ac,...cd,...db->...ab", ghat_inv, L_full, ghat_inv)
    riem_tt = face_riem[..., :, k, :, k][..., keep, :][..., :, keep] / g_rr[..., None, None]
    curv_dot_l = np.einsum("...ab,...ab->...", riem_tt, L_up)

    scal_face_d = grid.face_normal_derivative(bundle.scal)
    normal_d_scal = -scal_face_d / sqrt_g_rr

    hat = None
    if nb >= 3:
        hat = compute_curvature(face_metric, want_rank4=False, with_boundary=False)

    return BoundaryBundle(
        bgrid=bgrid,
        face_metric=face_metric,
        second_form=second_form,
        mean_curvature=mean_h,
        normal_ricci=normal_ricci,
        curv_dot_l=curv_dot_l,
        face_scal=face_scal,
        normal_d_scal=normal_d_scal,
        sqrt_g_rr=sqrt_g_rr,
        face_gamma=face_gamma,
        face_riem=face_riem,
        face_ginv=face_ginv,
        hat=hat,
    )


# ---------------------------------------------------------------------------
# covariant differential operators (from the bundle's Christoffels)
# ---------------------------------------------------------------------------

def scalar_gradient(grid: ChartGrid, u: np.ndarray) -> np.ndarray:
    """du: (*shape, n). Scalar ghosts carry no frame signs."""
    n = grid.dim
    du = np.empty(grid.shape + (n,))
    for d in range(n):
        du[..., d] = grid.apply_diff(u, d, 1)
    return du


def hessian(bundle: CurvatureBundle, u: np.ndarray, du: np.ndarray | None = None) -> np.ndarray:
    """Covariant Hessian of a scalar, packed (*shape, m)."""
    grid = bundle.grid
    n = grid.dim
    if du is None:
        du = scalar_gradient(grid, u)
    pairs = sym_pairs(n)
    out = np.empty(grid.shape + (len(pairs),))
    for kk, (a, d) in enumerate(pairs):
        if a == d:
            dd = grid.apply_diff(u, a, 2)
        else:
            lo = _closure_signs(grid, d, 0)[a]
            hi = _closure_signs(grid, d, 1)[a]
            dd = grid.apply_diff(du[..., a], d, 1, lo_sign=lo, hi_sign=hi)
        out[..., kk] = dd - np.einsum("...e,...e->...", bundle.gamma[..., :, kk], du)
    return out


def laplacian(bundle: CurvatureBundle, u: np.ndarray, du: np.ndarray | None = None,
              hess: np.ndarray | None = None) -> np.ndarray:
    if hess is None:
        hess = hessian(bundle, u, du)
    ginv = bundle.metric.inverse().unpack()
    return np.einsum("...ab,...ab->...", ginv, _unpack_like(hess, bundle.grid.dim))


def gradient_pair(bundle: CurvatureBundle, du: np.ndarray, dv: np.ndarray) -> np.ndarray:
    """g^{ab} d_a u d_b v."""
    ginv = bundle.metric.inverse().unpack()
    return np.einsum("...ab,...a,...b->...", ginv, du, dv)


def divergence(bundle: CurvatureBundle, x_up: np.ndarray) -> np.ndarray:
    """div X for a vector field X^a (upper index), (*shape, n) -> (*shape,)."""
    grid = bundle.grid
    n = grid.dim
    idx = sym_index(n)
    out = np.zeros(grid.shape)
    for a in range(n):
        lo = _closure_signs(grid, a, 0)[a]
        hi = _closure_signs(grid, a, 1)[a]
        out += grid.apply_diff(x_up[..., a], a, 1, lo_sign=lo, hi_sign=hi)
    # Gamma^a_{a e} X^e
    for e in range(n):
        tr = np.zeros(grid.shape)
        for a in range(n):
            tr += bundle.gamma[..., a, idx[a, e]]
        out += tr * x_up[..., e]
    return out


def divergence_of_tensor_times_grad(bundle: CurvatureBundle, s_packed: np.ndarray,
                                    du: np.ndarray) -> np.ndarray:
    """div( S(grad u, .) ) for symmetric S (lower indices, packed)."""
    n = bundle.grid.dim
    ginv = bundle.metric.inverse().unpack()
    S = _unpack_like(s_packed, n)
    s_up = np.einsum("...ac,...cd,...db->...ab", ginv, S, ginv)
    x_up = np.einsum("...ab,...b->...a", s_up, du)
    return divergence(bundle, x_up)


def ricci_divergence(bundle: CurvatureBundle) -> np.ndarray:
    """(div Ric)_i = g^{jk} nabla_k Ric_ij, (*shape, n)."""
    grid = bundle.grid
    n = grid.dim
    idx = sym_index(n)
    ginv = bundle.metric.inverse().unpack()
    ric_field = SymTensor2Field(grid, bundle.ric)
    ric_full = ric_field.unpack()
    gam = np.empty(grid.shape + (n, n, n))
    for i in range(n):
        for j in range(n):
            gam[..., :, i, j] = bundle.gamma[..., :, idx[i, j]]
    dric = np.stack([ric_field.d(k).unpack() for k in range(n)], axis=-3)
    cov = (dric
           - np.einsum("...lki,...lj->...kij", gam, ric_full)
           - np.einsum("...lkj,...il->...kij", gam, ric_full))
    return np.einsum("...jk,...kij->...i", ginv, cov)


def schur_residual(bundle: CurvatureBundle) -> float:
    """max |2 div Ric - dR|: the contracted second Bianchi identity."""
    div = ricci_divergence(bundle)
    dscal = scalar_gradient(bundle.grid, bundle.scal)
    return float(np.abs(2.0 * div - dscal).max())


def codazzi_residual(bundle: CurvatureBundle) -> float:
    """max | hat-nabla_a L_bc - hat-nabla_b L_ac - Riem(e_a, e_b, nu, e_c) |.

    Face indices a,b,c; nu the inward unit normal. Needs the intrinsic
    face bundle (hat) for the tangential covariant derivative.
    """
    b = bundle.boundary
    if b is None:
        raise ValueError("codazzi check needs a boundary")
    bgrid = b.bgrid
    nb = bgrid.dim
    idx = sym_index(nb)
    L_full = b.second_form.unpack()
    gam_hat = np.empty(bgrid.shape + (nb, nb, nb))
    if b.hat is not None:
        for i in range(nb):
            for j in range(nb):
                gam_hat[..., :, i, j] = b.hat.gamma[..., :, idx[i, j]]
    else:
        # 2-dimensional face: no full intrinsic bundle, assemble the
        # Christoffels directly from the induced-metric jets
        dg, _ = metric_jets(b.face_metric, extended=False)
        g_full = b.face_metric.tensor.unpack()
        ginv_hat = np.linalg.inv(g_full)
        for i in range(nb):
            for j in range(nb):
                half = 0.5 * (dg[..., i, :] [..., [idx[k_, j] for k_ in range(nb)]]
                              + dg[..., j, :][..., [idx[k_, i] for k_ in range(nb)]]
                              - np.stack([dg[..., k_, idx[i, j]] for k_ in range(nb)], axis=-1))
                gam_hat[..., :, i, j] = np.einsum("...ek,...k->...e", ginv_hat, half)
    dL = np.stack([b.second_form.d(k).unpack() for k in range(nb)], axis=-3)
    covL = (dL
            - np.einsum("...dab,...dc->...abc", gam_hat, L_full)
            - np.einsum("...dac,...bd->...abc", gam_hat, L_full))
    lhs = covL - np.swapaxes(covL, -3, -2)
    # ambient chart: normal axis is 0, face axes are 1..n-1; inward nu
    # points along -d/dr so nu^r = -1/sqrt(g_rr)
    tang = slice(1, nb + 1)
    rhs = -b.face_riem[..., tang, tang, 0, tang] / b.sqrt_g_rr[..., None, None, None]
    return float(np.abs(lhs - rhs).max())
