"""Conformal rebuilds, the fourth-order operator pair, and global invariants.

Everything here works on top of a CurvatureBundle.  Identities that relate
a metric to its conformal rebuild are always checked through two independent
paths: formulas written in base-metric quantities against the curvature
engine run on the rebuilt metric.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .catalog import _extended_coords, conformal_radial_field
from .curvature import (
    CurvatureBundle,
    _unpack_like,
    compute_curvature,
    gradient_pair,
    hessian,
    laplacian,
    divergence_of_tensor_times_grad,
    scalar_gradient,
)
from .grid import (
    ChartGrid,
    MetricField,
    ScalarField,
    SymTensor2Field,
    integrate_boundary,
    integrate_volume,
    sym_pairs,
)

EXPAND = "expand"   # rebuilt metric is e^{+2w} g
SHRINK = "shrink"   # rebuilt metric is e^{-2w} g

NEUMANN_TOL = 1e-8
GEODESIC_TOL = 1e-6


@dataclass
class ConformalFactor:
    """A scalar conformal exponent with an explicit sign convention.

    The two sign conventions coexist in the literature and silently mixing
    them is the classic bug; the tag makes every call site say which one it
    means.  `values_extended` optionally carries long-double samples (for
    closed-form factors) so rebuilt metrics keep extended-precision jets.
    """

    field: ScalarField
    convention: str = EXPAND
    neumann: bool = False
    values_extended: np.ndarray | None = None

    def __post_init__(self):
        if self.convention not in (EXPAND, SHRINK):
            raise ValueError(f"unknown conformal convention {self.convention!r}")
        if self.neumann and self.grid.boundary_axis is not None:
            slope = float(np.abs(self.grid.face_normal_derivative(self.field.values)).max())
            if slope > NEUMANN_TOL:
                raise ValueError(
                    f"factor flagged Neumann but max |dw/dn| = {slope:.3e} at the face")

    @property
    def grid(self) -> ChartGrid:
        return self.field.grid

    def expand_exponent(self) -> np.ndarray:
        """s with rebuilt = e^{2s} g."""
        v = self.field.values
        return v if self.convention == EXPAND else -v

    def shrink_exponent(self) -> np.ndarray:
        """u with rebuilt = e^{-2u} g."""
        return -self.expand_exponent()


def radial_conformal_factor(grid: ChartGrid, coeffs, convention: str = EXPAND) -> ConformalFactor:
    """Factor w(theta) = sum_k c_k cos^k(theta) with long-double samples.

    The Neumann flag is set automatically: the equatorial slope is -c_1, so
    the factor is Neumann exactly when the linear coefficient vanishes.
    """
    fld = conformal_radial_field(grid, coeffs)
    th = _extended_coords(grid)[0]
    w_ext = np.zeros_like(th)
    c = np.cos(th)
    for k, ck in enumerate(coeffs):
        if float(ck) != 0.0:
            w_ext = w_ext + np.longdouble(repr(float(ck))) * c**k
    neumann = len(coeffs) < 2 or float(coeffs[1]) == 0.0
    return ConformalFactor(fld, convention, neumann=neumann, values_extended=w_ext)


# ---------------------------------------------------------------------------
# small tensor helpers
# ---------------------------------------------------------------------------

def packed_outer(grid: ChartGrid, da: np.ndarray, db: np.ndarray) -> np.ndarray:
    """Symmetrized outer product of two covectors, packed storage."""
    pairs = sym_pairs(grid.dim)
    out = np.empty(grid.shape + (len(pairs),))
    for kk, (a, b) in enumerate(pairs):
        out[..., kk] = 0.5 * (da[..., a] * db[..., b] + da[..., b] * db[..., a])
    return out


def tensor_grad_pair(bundle: CurvatureBundle, packed: np.ndarray,
                     du: np.ndarray, dv: np.ndarray) -> np.ndarray:
    """T(grad u, grad v) = T_ab g^{ac} g^{bd} d_c u d_d v."""
    n = bundle.grid.dim
    ginv = bundle.metric.inverse().unpack()
    t_full = _unpack_like(packed, n)
    up_u = np.einsum("...ab,...b->...a", ginv, du)
    up_v = np.einsum("...ab,...b->...a", ginv, dv)
    return np.einsum("...ab,...a,...b->...", t_full, up_u, up_v)


def _inward_normal_derivative(bundle: CurvatureBundle, values: np.ndarray) -> np.ndarray:
    """d/dn at the face for the inward unit normal, as a face array."""
    b = bundle.boundary
    return -bundle.grid.face_normal_derivative(values) / b.sqrt_g_rr


def _schouten_normal_grad_face(bundle: CurvatureBundle, du: np.ndarray) -> np.ndarray:
    """A(nu, grad u) restricted to the face, inward unit normal."""
    grid = bundle.grid
    n = grid.dim
    k = grid.boundary_axis
    ginv = bundle.metric.inverse().unpack()
    a_full = _unpack_like(bundle.schouten, n)
    # covector (A du)_a = A_ab g^{bc} d_c u; the normal picks its k-slot
    vec = np.einsum("...ab,...bc,...c->...a", a_full, ginv, du)
    return -grid.restrict_to_face(vec[..., k]) / bundle.boundary.sqrt_g_rr


# ---------------------------------------------------------------------------
# rebuild and the Schouten transform
# ---------------------------------------------------------------------------

def conformal_rebuild(g: MetricField, w: ConformalFactor) -> MetricField:
    """The metric e^{+-2w} g on the same grid."""
    if not g.grid.same_layout(w.grid):
        raise ValueError("conformal factor lives on a different grid")
    s = w.expand_exponent()
    comps = g.tensor.comps * np.exp(2.0 * s)[..., None]
    ext = None
    if g.comps_extended is not None and w.values_extended is not None:
        s_ext = w.values_extended if w.convention == EXPAND else -w.values_extended
        ext = g.comps_extended * np.exp(np.longdouble(2.0) * s_ext)[..., None]
    return MetricField(
        SymTensor2Field(g.grid, comps),
        catalog_id="derived",
        params={"rebuild_of": g.catalog_id, "convention": w.convention},
        euler_characteristic=g.euler_characteristic,
        comps_extended=ext,
    )


def schouten_transform(base: CurvatureBundle, u: np.ndarray, t: float) -> np.ndarray:
    """Shifted Schouten tensor of e^{-2u} g from base-metric data, packed.

    A^t(rebuild) = A^t + Hess u + (1-t)/(n-2) (Lap u) g + du (x) du
                 - (2-t)/2 |grad u|^2 g,
    every derivative taken in the base metric.
    """
    grid = base.grid
    n = grid.dim
    du = scalar_gradient(grid, u)
    hess = hessian(base, u, du)
    lap = laplacian(base, u, hess=hess)
    grad2 = gradient_pair(base, du, du)
    g_packed = base.metric.tensor.comps
    out = base.schouten_generalized(t) + hess + packed_outer(grid, du, du)
    out += ((1.0 - t) / (n - 2) * lap - 0.5 * (2.0 - t) * grad2)[..., None] * g_packed
    return out


def schouten_transform_residual(g: MetricField, w: ConformalFactor, t: float = 1.0,
                                base: CurvatureBundle | None = None) -> float:
    """Dual-path check of the transform law.

    Path one runs the curvature engine on the rebuilt metric; path two
    evaluates the closed-form transform in base-metric quantities.  Returns
    the max-norm discrepancy over all nodes and components.
    """
    rebuilt = conformal_rebuild(g, w)
    direct = compute_curvature(rebuilt, with_boundary=False).schouten_generalized(t)
    if base is None:
        base = compute_curvature(g, with_boundary=False)
    formula = schouten_transform(base, w.shrink_exponent(), t)
    return float(np.abs(direct - formula).max())


# ---------------------------------------------------------------------------
# the operator pair and its curvatures
# ---------------------------------------------------------------------------

@dataclass
class QTBundle:
    """Interior Q, boundary T, and optional operator values for one test function."""

    q: np.ndarray | None = None
    t: np.ndarray | None = None
    p4_phi: np.ndarray | None = None
    p3_phi: np.ndarray | None = None


def paneitz_q(g: MetricField, phi: ScalarField | None = None,
              bundle: CurvatureBundle | None = None) -> QTBundle:
    """Fourth-order interior operator and its Q-curvature (dimension four).

    Q = -1/12 (Lap R - R^2 + 3 |Ric|^2).  The operator is
    P4 phi = Lap^2 phi - div((2/3 R g - 2 Ric) d phi); the divergence term
    carries the sign under which the Green pairing of P4 reproduces the
    quadratic form p43_form, which pins first-harmonic values on the unit
    round four-sphere at 24 phi.
    """
    if g.dim != 4:
        raise ValueError("the fourth-order operator pair needs a four-manifold")
    b = bundle if bundle is not None else compute_curvature(g, with_boundary=False)
    lap_r = laplacian(b, b.scal)
    q = -(lap_r - b.scal**2 + 3.0 * b.ric_norm2()) / 12.0
    p4 = None
    if phi is not None:
        du = scalar_gradient(g.grid, phi.values)
        lap_phi = laplacian(b, phi.values, du=du)
        lap2 = laplacian(b, lap_phi)
        s_packed = (2.0 / 3.0) * b.scal[..., None] * g.tensor.comps - 2.0 * b.ric
        p4 = lap2 - divergence_of_tensor_times_grad(b, s_packed, du)
    return QTBundle(q=q, p4_phi=p4)


def p3_t_boundary(g: MetricField, phi: ScalarField | None = None,
                  bundle: CurvatureBundle | None = None,
                  geodesic_tol: float = GEODESIC_TOL) -> QTBundle:
    """Third-order boundary operator and its T-curvature (dimension four).

    T = -1/12 dR/dn + 1/2 R H - <G,L> + 3 H^3 - 1/3 tr(L^3) + Lap_hat H,
    P3 phi = 1/2 d(Lap phi)/dn + Lap_hat(d phi/dn) - 2 H Lap_hat phi
             + grad_hat H . grad_hat phi + (F - R/3) d phi/dn,
    with n the inward unit normal and hats for face-intrinsic operators.

    Evaluation is restricted to totally geodesic boundaries: the second
    fundamental form enters one published term in a form quadratic in phi,
    so rather than guess a linearization the operator refuses |L| beyond
    `geodesic_tol` (where the term vanishes identically).
    """
    if g.dim != 4:
        raise ValueError("the fourth-order operator pair needs a four-manifold")
    b = bundle if bundle is not None else compute_curvature(g, with_boundary=True)
    if b.boundary is None:
        raise ValueError("T lives on the boundary; this chart is closed")
    bd = b.boundary
    l_max = float(np.abs(bd.second_form.comps).max())
    if l_max > geodesic_tol:
        raise ValueError(
            f"boundary is not totally geodesic (max |L| = {l_max:.3e}); "
            "the third-order operator is only evaluated at L = 0")

    hat = bd.hat
    h = bd.mean_curvature
    ginv_hat = bd.face_metric.inverse().unpack()
    l_full = _unpack_like(bd.second_form.comps, 3)
    l_mix = np.einsum("...ab,...bc->...ac", ginv_hat, l_full)
    tr_l3 = np.einsum("...ab,...bc,...ca->...", l_mix, l_mix, l_mix)
    t = (-bd.normal_d_scal / 12.0
         + 0.5 * bd.face_scal * h
         - bd.curv_dot_l
         + 3.0 * h**3
         - tr_l3 / 3.0
         + laplacian(hat, h))

    p3 = None
    if phi is not None:
        vals = phi.values
        grid = g.grid
        lap_phi = laplacian(b, vals)
        dn_lap = _inward_normal_derivative(b, lap_phi)
        dn_phi = _inward_normal_derivative(b, vals)
        phi_face = grid.restrict_to_face(vals)
        dphi_hat = scalar_gradient(bd.bgrid, phi_face)
        dh_hat = scalar_gradient(bd.bgrid, h)
        p3 = (0.5 * dn_lap
              + laplacian(hat, dn_phi)
              - 2.0 * h * laplacian(hat, phi_face, du=dphi_hat)
              + gradient_pair(hat, dh_hat, dphi_hat)
              + (bd.normal_ricci - bd.face_scal / 3.0) * dn_phi)
    return QTBundle(t=t, p3_phi=p3)


def conformal_laws_check(g: MetricField, w: ConformalFactor, phi: ScalarField,
                         base: CurvatureBundle | None = None) -> dict:
    """Residuals of the four transformation laws tying (P4, P3) to (Q, T).

    For the rebuild by e^{2u} g the laws are
        P4' phi = e^{-4u} P4 phi            (interior covariance)
        P4 u + 2 Q = 2 Q' e^{4u}            (Q law)
        P3' phi = e^{-3u} P3 phi            (boundary covariance)
        P3 u + T = T' e^{3u}                (T law)
    primes for rebuilt-metric operators.  Each law is evaluated through the
    curvature engine on both metrics; residuals are max-norm, scaled by the
    sup of the law's right side (floored at one).
    """
    if w.convention != EXPAND:
        raise ValueError("the transformation laws are stated for the expand convention")
    grid = g.grid
    u = w.field.values
    ub = ScalarField(grid, u)
    if base is None:
        base = compute_curvature(g, with_boundary=grid.boundary_axis is not None)
    rebuilt = conformal_rebuild(g, w)
    bu = compute_curvature(rebuilt, with_boundary=grid.boundary_axis is not None)

    qt_of_phi = paneitz_q(g, phi, bundle=base)
    qt_of_u = paneitz_q(g, ub, bundle=base)
    qt_new = paneitz_q(rebuilt, phi, bundle=bu)

    def rel(delta: np.ndarray, ref: np.ndarray) -> float:
        return float(np.abs(delta).max() / max(1.0, np.abs(ref).max()))

    rhs1 = np.exp(-4.0 * u) * qt_of_phi.p4_phi
    rhs2 = 2.0 * qt_new.q * np.exp(4.0 * u)
    report = {
        "p4_covariance": rel(qt_new.p4_phi - rhs1, rhs1),
        "q_law": rel(qt_of_u.p4_phi + 2.0 * qt_of_phi.q - rhs2, rhs2),
    }
    if grid.boundary_axis is not None:
        u_face = grid.restrict_to_face(u)
        p3_of_phi = p3_t_boundary(g, phi, bundle=base)
        p3_of_u = p3_t_boundary(g, ub, bundle=base)
        p3_new = p3_t_boundary(rebuilt, phi, bundle=bu)
        rhs3 = np.exp(-3.0 * u_face) * p3_of_phi.p3_phi
        rhs4 = p3_new.t * np.exp(3.0 * u_face)
        report["p3_covariance"] = rel(p3_new.p3_phi - rhs3, rhs3)
        report["t_law"] = rel(p3_of_u.p3_phi + p3_of_phi.t - rhs4, rhs4)
    return report


# ---------------------------------------------------------------------------
# the quadratic form
# ---------------------------------------------------------------------------

def p43_form(g: MetricField, u: ScalarField, v: ScalarField,
             bundle: CurvatureBundle | None = None) -> float:
    """The Neumann quadratic form of the operator pair.

    <P u, v> = int (Lap u Lap v + 2/3 R grad u . grad v) dV
               - 2 int Ric(grad u, grad v) dV
               - 2 oint L(grad_hat u, grad_hat v) dS.
    """
    if g.dim != 4:
        raise ValueError("the quadratic form needs a four-manifold")
    b = bundle if bundle is not None else compute_curvature(g, with_boundary=True)
    grid = g.grid
    for name, fld in (("u", u), ("v", v)):
        if grid.boundary_axis is not None:
            slope = float(np.abs(grid.face_normal_derivative(fld.values)).max())
            if slope > 1e-6:
                raise ValueError(f"{name} violates the Neumann condition: |d{name}/dn| = {slope:.3e}")
    du = scalar_gradient(grid, u.values)
    dv = scalar_gradient(grid, v.values)
    lap_u = laplacian(b, u.values, du=du)
    lap_v = laplacian(b, v.values, du=dv)
    integrand = (lap_u * lap_v
                 + (2.0 / 3.0) * b.scal * gradient_pair(b, du, dv)
                 - 2.0 * tensor_grad_pair(b, b.ric, du, dv))
    val = integrate_volume(integrand, g)
    if grid.boundary_axis is not None:
        bd = b.boundary
        u_face = grid.restrict_to_face(u.values)
        v_face = grid.restrict_to_face(v.values)
        du_hat = scalar_gradient(bd.bgrid, u_face)
        dv_hat = scalar_gradient(bd.bgrid, v_face)
        ginv_hat = bd.face_metric.inverse().unpack()
        l_full = _unpack_like(bd.second_form.comps, 3)
        pair = np.einsum("...ab,...ac,...bd,...c,...d->...", l_full, ginv_hat, ginv_hat, du_hat, dv_hat)
        val -= 2.0 * integrate_boundary(pair, g)
    return float(val)


# ---------------------------------------------------------------------------
# global invariants
# ---------------------------------------------------------------------------

@dataclass
class InvariantReport:
    """Integrated conformal invariants of one chart."""

    kappa_p4: float | None
    kappa_p3: float | None
    kappa_total: float | None
    gbc_residual: float | None
    chi: int | None
    yamabe_quotient: float
    sigma2_kappa_residual: float | None

    def to_json(self) -> str:
        from . import serialize
        return serialize.dumps({
            "kappa_p4": self.kappa_p4,
            "kappa_p3": self.kappa_p3,
            "kappa_total": self.kappa_total,
            "gbc_residual": self.gbc_residual,
            "yamabe_quotient": self.yamabe_quotient,
            "sigma2_kappa_residual": self.sigma2_kappa_residual,
        })


def invariants(g: MetricField, chi: int | None = None,
               bundle: CurvatureBundle | None = None) -> InvariantReport:
    """Integrated invariants: the kappa pair, a Gauss-Bonnet residual, the
    scale-invariant Yamabe quotient, and the sigma2-kappa identity residual.

    The quotient (int R dV + oint H dS) / Vol^{(n-2)/n} generalizes the
    unit-volume normalization of the Yamabe functional; evaluated on a single
    metric it upper-bounds the conformal-class infimum.
    """
    b = bundle if bundle is not None else compute_curvature(g, with_boundary=True)
    grid = g.grid
    n = g.dim
    if chi is None:
        chi = g.euler_characteristic

    vol = integrate_volume(np.ones(grid.shape), g)
    total_r = integrate_volume(b.scal, g)
    total_h = 0.0
    if b.boundary is not None:
        total_h = integrate_boundary(b.boundary.mean_curvature, g)
    yamabe = (total_r + total_h) / vol ** ((n - 2) / n)

    if n != 4:
        return InvariantReport(None, None, None, None, chi, yamabe, None)

    kappa_p4 = integrate_volume(paneitz_q(g, bundle=b).q, g)
    kappa_p3 = 0.0
    if b.boundary is not None:
        kappa_p3 = integrate_boundary(p3_t_boundary(g, bundle=b).t, g)
    kappa_total = kappa_p4 + kappa_p3

    gbc = None
    if chi is not None:
        weyl_term = integrate_volume(b.weyl_norm2 / 8.0, g)
        gbc = kappa_p4 + weyl_term + kappa_p3 - 4.0 * math.pi**2 * chi

    sigma2_total = integrate_volume(b.sigma2_schouten(), g)
    sigma2_res = abs(sigma2_total - 0.5 * kappa_total)
    return InvariantReport(kappa_p4, kappa_p3, kappa_total, gbc, chi, yamabe, sigma2_res)


# ---------------------------------------------------------------------------
# the integral transformation of sigma_2 (dimension three)
# ---------------------------------------------------------------------------

def lemma_change_check(g: MetricField, u: ScalarField,
                       base: CurvatureBundle | None = None) -> dict:
    """Dual-path check of the sigma_2 integral transformation in dimension three.

    Left side: int sigma_2 of the rebuilt metric e^{-2u} g, weighted by
    e^{-4u}, against the base volume element, with the rebuilt curvature
    computed directly by the engine.  Right side: the base-metric integrals

        int sigma_2 dV + 1/8 int R |grad u|^2 - 1/4 int |grad u|^4
        + 1/2 int (Lap u) |grad u|^2 - 1/2 int A(grad u, grad u)

    plus, on charts with boundary, the three face integrals

        1/4 oint du/dn (R + 2 Lap u - 2 |grad u|^2)
        - oint A(nu, grad u) - 1/4 oint d|grad u|^2/dn.

    Reports both the general residual and the totally-geodesic
    specialization that drops the face terms.
    """
    if g.dim != 3:
        raise ValueError("the integral transformation is three-dimensional")
    grid = g.grid
    b = base if base is not None else compute_curvature(g, with_boundary=True)
    uv = u.values

    factor = ConformalFactor(u, SHRINK)
    rebuilt = conformal_rebuild(g, factor)
    bt = compute_curvature(rebuilt, with_boundary=False)
    lhs = integrate_volume(bt.sigma2_schouten() * np.exp(-4.0 * uv), g)

    du = scalar_gradient(grid, uv)
    lap = laplacian(b, uv, du=du)
    grad2 = gradient_pair(b, du, du)
    a_pair = tensor_grad_pair(b, b.schouten, du, du)
    interior = (integrate_volume(b.sigma2_schouten(), g)
                + 0.125 * integrate_volume(b.scal * grad2, g)
                - 0.25 * integrate_volume(grad2**2, g)
                + 0.5 * integrate_volume(lap * grad2, g)
                - 0.5 * integrate_volume(a_pair, g))

    boundary = 0.0
    if grid.boundary_axis is not None:
        dn_u = _inward_normal_derivative(b, uv)
        r_face = b.boundary.face_scal
        lap_face = grid.restrict_to_face(lap)
        grad2_face = grid.restrict_to_face(grad2)
        dn_grad2 = _inward_normal_derivative(b, grad2)
        a_nu = _schouten_normal_grad_face(b, du)
        boundary = (0.25 * integrate_boundary(dn_u * (r_face + 2.0 * lap_face - 2.0 * grad2_face), g)
                    - integrate_boundary(a_nu, g)
                    - 0.25 * integrate_boundary(dn_grad2, g))

    scale = max(1.0, abs(lhs))
    return {
        "lhs": lhs,
        "rhs_interior": interior,
        "rhs_boundary": boundary,
        "residual": abs(lhs - (interior + boundary)) / scale,
        "residual_geodesic": abs(lhs - interior) / scale,
    }


# ---------------------------------------------------------------------------
# boundary identities
# ---------------------------------------------------------------------------

def boundary_identities(g: MetricField, u: ScalarField,
                        base: CurvatureBundle | None = None) -> dict:
    """Face quantities that must vanish for Neumann data on geodesic
    boundaries, plus the integrated Bochner identity.

    The Bochner balance is arranged for the inward normal:
    1/2 oint d|grad u|^2/dn + int (|Hess u|^2 - (Lap u)^2 + Ric(grad u, grad u))
    - oint du/dn Lap u = 0.
    """
    grid = g.grid
    if grid.boundary_axis is None:
        raise ValueError("boundary identities need a chart with boundary")
    b = base if base is not None else compute_curvature(g, with_boundary=True)
    l_max = float(np.abs(b.boundary.second_form.comps).max())
    if l_max > GEODESIC_TOL:
        raise ValueError(f"boundary is not totally geodesic (max |L| = {l_max:.3e})")
    slope = float(np.abs(grid.face_normal_derivative(u.values)).max())
    if slope > 1e-6:
        raise ValueError(f"u violates the Neumann condition: |du/dn| = {slope:.3e}")

    uv = u.values
    du = scalar_gradient(grid, uv)
    hess = hessian(b, uv, du=du)
    lap = laplacian(b, uv, hess=hess)
    grad2 = gradient_pair(b, du, du)

    dn_grad2 = _inward_normal_derivative(b, grad2)
    a_nu = _schouten_normal_grad_face(b, du)

    ric_pair = tensor_grad_pair(b, b.ric, du, du)
    interior = integrate_volume(b.sym_norm2(hess) - lap**2 + ric_pair, g)
    dn_u = _inward_normal_derivative(b, uv)
    lap_face = grid.restrict_to_face(lap)
    bochner = (0.5 * integrate_boundary(dn_grad2, g)
               + interior
               - integrate_boundary(dn_u * lap_face, g))

    scale = max(1.0, integrate_volume(lap**2, g))
    return {
        "grad_sq_normal_derivative": float(np.abs(dn_grad2).max()),
        "schouten_normal_gradient": float(np.abs(a_nu).max()),
        "bochner_residual": abs(bochner) / scale,
    }
