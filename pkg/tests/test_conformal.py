"""Conformal rebuilds, the operator pair, invariants, and identity checks."""

import math

import numpy as np
import pytest

from sigma_pinch import catalog, conformal
from sigma_pinch.curvature import compute_curvature, laplacian
from sigma_pinch.grid import ScalarField


@pytest.fixture(scope="module")
def random_poly(hemi4_bundle):
    rng = np.random.default_rng(7)
    return catalog.random_ambient_polynomial(hemi4_bundle.grid, rng, degree=2)


@pytest.fixture(scope="module")
def radial_w(hemi4_bundle):
    # 0.1 cos 2theta expressed in the cos-power basis
    return conformal.radial_conformal_factor(hemi4_bundle.grid, [-0.1, 0.0, 0.2])


# ---------------------------------------------------------------------------
# ConformalFactor
# ---------------------------------------------------------------------------

def test_factor_rejects_unknown_convention(hemi4_bundle):
    fld = ScalarField(hemi4_bundle.grid, np.zeros(hemi4_bundle.grid.shape))
    with pytest.raises(ValueError):
        conformal.ConformalFactor(fld, "double")


def test_factor_neumann_flag_checks_face_slope(hemi4_bundle):
    grid = hemi4_bundle.grid
    sloped = catalog.conformal_radial_field(grid, [0.0, 0.3])  # slope -0.3 at equator
    with pytest.raises(ValueError):
        conformal.ConformalFactor(sloped, neumann=True)
    flat = catalog.conformal_radial_field(grid, [0.3, 0.0, 0.1])
    conformal.ConformalFactor(flat, neumann=True)  # passes validation


def test_radial_factor_autodetects_neumann(hemi4_bundle):
    grid = hemi4_bundle.grid
    assert conformal.radial_conformal_factor(grid, [-0.1, 0.0, 0.2]).neumann
    assert not conformal.radial_conformal_factor(grid, [0.0, 0.3]).neumann


def test_factor_exponent_sign_conventions(hemi4_bundle):
    grid = hemi4_bundle.grid
    vals = np.full(grid.shape, 0.4)
    exp_factor = conformal.ConformalFactor(ScalarField(grid, vals), conformal.EXPAND)
    shr_factor = conformal.ConformalFactor(ScalarField(grid, vals), conformal.SHRINK)
    assert np.all(exp_factor.expand_exponent() == 0.4)
    assert np.all(exp_factor.shrink_exponent() == -0.4)
    assert np.all(shr_factor.expand_exponent() == -0.4)


# ---------------------------------------------------------------------------
# rebuild and the Schouten transform
# ---------------------------------------------------------------------------

def test_rebuild_identity_and_constant(hemi4_bundle):
    g = hemi4_bundle.metric
    w0 = conformal.radial_conformal_factor(g.grid, [0.0])
    assert np.array_equal(conformal.conformal_rebuild(g, w0).tensor.comps, g.tensor.comps)
    wc = conformal.ConformalFactor(
        ScalarField(g.grid, np.full(g.grid.shape, 0.3)), conformal.SHRINK)
    rebuilt = conformal.conformal_rebuild(g, wc)
    assert np.allclose(rebuilt.tensor.comps, math.exp(-0.6) * g.tensor.comps,
                       rtol=0.0, atol=1e-15)
    assert rebuilt.euler_characteristic == g.euler_characteristic


def test_rebuild_rejects_foreign_grid(hemi4_bundle, sphere4_bundle):
    w = conformal.radial_conformal_factor(sphere4_bundle.grid, [0.1])
    with pytest.raises(ValueError):
        conformal.conformal_rebuild(hemi4_bundle.metric, w)


def test_rebuild_keeps_extended_samples(hemi4_bundle, radial_w):
    rebuilt = conformal.conformal_rebuild(hemi4_bundle.metric, radial_w)
    assert rebuilt.comps_extended is not None
    assert rebuilt.comps_extended.dtype == np.longdouble


def test_schouten_transform_zero_factor_is_exact(hemi4_bundle):
    g = hemi4_bundle.metric
    w0 = conformal.radial_conformal_factor(g.grid, [0.0])
    assert conformal.schouten_transform_residual(g, w0, 1.0, base=hemi4_bundle) == 0.0


@pytest.mark.parametrize("t", [0.0, 2.0 / 3.0, 1.0])
def test_schouten_transform_dual_path_radial_factor(hemi4_bundle, radial_w, t):
    res = conformal.schouten_transform_residual(
        hemi4_bundle.metric, radial_w, t, base=hemi4_bundle)
    assert res <= 1e-3  # measured ~7e-7 at this resolution


# ---------------------------------------------------------------------------
# the operator pair
# ---------------------------------------------------------------------------

def test_q_constant_on_round_sphere(sphere4_bundle):
    qt = conformal.paneitz_q(sphere4_bundle.metric, bundle=sphere4_bundle)
    assert np.abs(qt.q - 3.0).max() <= 1e-5


def test_q_vanishes_on_flat_torus():
    g = catalog.make_metric("flat-torus4", 12)
    qt = conformal.paneitz_q(g)
    assert np.abs(qt.q).max() <= 1e-12


def test_paneitz_first_harmonic_eigenvalue(sphere4_bundle):
    g = sphere4_bundle.metric
    z = np.broadcast_to(catalog.ambient_coordinates(g.grid)[0], g.grid.shape).copy()
    qt = conformal.paneitz_q(g, ScalarField(g.grid, z), bundle=sphere4_bundle)
    assert np.abs(qt.p4_phi - 24.0 * z).max() <= 1e-4


def test_paneitz_rejects_three_manifolds(sphere3_bundle):
    with pytest.raises(ValueError):
        conformal.paneitz_q(sphere3_bundle.metric, bundle=sphere3_bundle)


def test_q_decomposition_pointwise(bumpy_hemi4_bundle):
    b = bumpy_hemi4_bundle
    q = conformal.paneitz_q(b.metric, bundle=b).q
    decomp = 2.0 * b.sigma2_schouten() - laplacian(b, b.scal) / 12.0
    assert np.abs(q - decomp).max() <= 1e-8


def test_t_vanishes_on_round_hemisphere(hemi4_bundle):
    qt = conformal.p3_t_boundary(hemi4_bundle.metric, bundle=hemi4_bundle)
    assert np.abs(qt.t).max() <= 1e-6


def test_t_reduces_to_normal_scalar_slope(bumpy_hemi4_bundle):
    b = bumpy_hemi4_bundle
    qt = conformal.p3_t_boundary(b.metric, bundle=b)
    assert np.abs(qt.t + b.boundary.normal_d_scal / 12.0).max() <= 1e-6


def test_p3_of_constant_vanishes(hemi4_bundle):
    g = hemi4_bundle.metric
    c = ScalarField(g.grid, np.full(g.grid.shape, 2.5))
    qt = conformal.p3_t_boundary(g, c, bundle=hemi4_bundle)
    assert np.abs(qt.p3_phi).max() <= 1e-8


def test_p3_rejects_closed_charts(sphere4_bundle):
    with pytest.raises(ValueError):
        conformal.p3_t_boundary(sphere4_bundle.metric, bundle=sphere4_bundle)


def test_p3_rejects_three_manifolds(hemi3_bundle):
    with pytest.raises(ValueError):
        conformal.p3_t_boundary(hemi3_bundle.metric, bundle=hemi3_bundle)


# ---------------------------------------------------------------------------
# transformation laws
# ---------------------------------------------------------------------------

def test_laws_zero_factor_exact(hemi4_bundle, random_poly):
    w0 = conformal.radial_conformal_factor(hemi4_bundle.grid, [0.0])
    rep = conformal.conformal_laws_check(hemi4_bundle.metric, w0, random_poly,
                                         base=hemi4_bundle)
    assert set(rep) == {"p4_covariance", "q_law", "p3_covariance", "t_law"}
    assert all(v == 0.0 for v in rep.values())


def test_laws_constant_factor(hemi4_bundle, random_poly):
    wc = conformal.radial_conformal_factor(hemi4_bundle.grid, [0.25])
    rep = conformal.conformal_laws_check(hemi4_bundle.metric, wc, random_poly,
                                         base=hemi4_bundle)
    assert rep["p4_covariance"] <= 1e-8
    assert rep["p3_covariance"] <= 1e-10
    assert rep["t_law"] <= 1e-8
    assert rep["q_law"] <= 1e-4  # limited by differentiating the rebuilt scalar curvature


def test_laws_radial_factor_random_function(hemi4_bundle, radial_w, random_poly):
    rep = conformal.conformal_laws_check(hemi4_bundle.metric, radial_w, random_poly,
                                         base=hemi4_bundle)
    assert max(rep.values()) <= 1e-3


def test_laws_require_expand_convention(hemi4_bundle, random_poly):
    w = conformal.ConformalFactor(
        ScalarField(hemi4_bundle.grid, np.zeros(hemi4_bundle.grid.shape)), conformal.SHRINK)
    with pytest.raises(ValueError):
        conformal.conformal_laws_check(hemi4_bundle.metric, w, random_poly)


# ---------------------------------------------------------------------------
# quadratic form
# ---------------------------------------------------------------------------

def test_form_kernel_contains_constants(hemi4_bundle):
    g = hemi4_bundle.metric
    c = ScalarField(g.grid, np.full(g.grid.shape, 1.7))
    assert abs(conformal.p43_form(g, c, c, bundle=hemi4_bundle)) <= 1e-10


def test_form_symmetry_and_positivity(hemi4_bundle):
    g = hemi4_bundle.metric
    u = catalog.radial_cosine_field(g.grid, 1)
    v = catalog.radial_cosine_field(g.grid, 2)
    fuv = conformal.p43_form(g, u, v, bundle=hemi4_bundle)
    fvu = conformal.p43_form(g, v, u, bundle=hemi4_bundle)
    assert fuv == pytest.approx(fvu, abs=1e-9)
    assert conformal.p43_form(g, u, u, bundle=hemi4_bundle) > 0.0


def test_form_nonnegative_on_neumann_profiles(hemi4_bundle):
    g = hemi4_bundle.metric
    profiles = [[0.0, 0.0, 0.3], [0.2, 0.0, -0.1, 0.05], [0.0, 0.0, 0.0, 0.0, 0.25]]
    for coeffs in profiles:
        u = catalog.conformal_radial_field(g.grid, coeffs)
        assert conformal.p43_form(g, u, u, bundle=hemi4_bundle) >= -1e-8


def test_form_rejects_neumann_violation(hemi4_bundle):
    g = hemi4_bundle.metric
    sloped = catalog.conformal_radial_field(g.grid, [0.0, 0.5])
    with pytest.raises(ValueError):
        conformal.p43_form(g, sloped, sloped, bundle=hemi4_bundle)


# ---------------------------------------------------------------------------
# invariants
# ---------------------------------------------------------------------------

def test_invariants_hemisphere_values(hemi4_bundle):
    inv = conformal.invariants(hemi4_bundle.metric, bundle=hemi4_bundle)
    target = 4.0 * math.pi**2
    assert inv.chi == 1
    assert abs(inv.kappa_total - target) / target <= 5e-3
    assert abs(inv.kappa_p3) <= 1e-6
    target_y = 8.0 * math.sqrt(3.0) * math.pi
    assert abs(inv.yamabe_quotient - target_y) / target_y <= 5e-3
    assert inv.sigma2_kappa_residual <= 1e-6


def test_invariants_closed_sphere(sphere4_bundle):
    inv = conformal.invariants(sphere4_bundle.metric, bundle=sphere4_bundle)
    target = 8.0 * math.pi**2
    assert inv.chi == 2
    assert abs(inv.kappa_p4 - target) / target <= 5e-3
    assert inv.kappa_p3 == 0.0
    assert abs(inv.gbc_residual) <= 5e-3 * 4.0 * math.pi**2 * 2


def test_invariants_flat_torus_zeros():
    inv = conformal.invariants(catalog.make_metric("flat-torus4", 12))
    assert inv.kappa_p4 == 0.0
    assert inv.gbc_residual == 0.0
    assert inv.yamabe_quotient == 0.0


def test_invariants_three_manifold_partial_report(hemi3_bundle):
    inv = conformal.invariants(hemi3_bundle.metric, bundle=hemi3_bundle)
    assert inv.kappa_p4 is None and inv.kappa_total is None
    target = 6.0 * math.pi**2 / (math.pi**2) ** (1.0 / 3.0)
    assert inv.yamabe_quotient == pytest.approx(target, rel=1e-3)


def test_invariants_json_key_order(hemi4_bundle):
    doc = conformal.invariants(hemi4_bundle.metric, bundle=hemi4_bundle).to_json()
    order = ["kappa_p4", "kappa_p3", "kappa_total", "gbc_residual",
             "yamabe_quotient", "sigma2_kappa_residual"]
    positions = [doc.index(f'"{k}"') for k in order]
    assert positions == sorted(positions)


def test_kappa_is_conformally_invariant(hemi4_bundle, radial_w):
    g = hemi4_bundle.metric
    inv0 = conformal.invariants(g, bundle=hemi4_bundle)
    inv1 = conformal.invariants(conformal.conformal_rebuild(g, radial_w))
    rel = abs(inv1.kappa_total - inv0.kappa_total) / abs(inv0.kappa_total)
    assert rel <= 1e-3


# ---------------------------------------------------------------------------
# integral transformation (dimension three)
# ---------------------------------------------------------------------------

def test_lemma_change_zero_factor_exact(sphere3_bundle):
    g = sphere3_bundle.metric
    rep = conformal.lemma_change_check(g, ScalarField(g.grid, np.zeros(g.grid.shape)),
                                       base=sphere3_bundle)
    assert rep["residual"] <= 1e-14


def test_lemma_change_closed_sphere_random_factor(sphere3_bundle):
    g = sphere3_bundle.metric
    rng = np.random.default_rng(11)
    raw = catalog.random_ambient_polynomial(g.grid, rng, degree=2)
    u = ScalarField(g.grid, 0.3 * raw.values / max(1.0, np.abs(raw.values).max()))
    rep = conformal.lemma_change_check(g, u, base=sphere3_bundle)
    assert rep["rhs_boundary"] == 0.0
    assert rep["residual"] <= 1e-3


def test_lemma_change_geodesic_specialization(hemi3_bundle):
    g = hemi3_bundle.metric
    u = catalog.conformal_radial_field(g.grid, [0.15, 0.0, 0.1])
    rep = conformal.lemma_change_check(g, u, base=hemi3_bundle)
    assert abs(rep["rhs_boundary"]) <= 1e-6
    assert rep["residual_geodesic"] <= 1e-3
    assert rep["residual"] <= 1e-3


def test_lemma_change_rejects_four_manifolds(hemi4_bundle):
    g = hemi4_bundle.metric
    with pytest.raises(ValueError):
        conformal.lemma_change_check(g, ScalarField(g.grid, np.zeros(g.grid.shape)),
                                     base=hemi4_bundle)


# ---------------------------------------------------------------------------
# boundary identities
# ---------------------------------------------------------------------------

def test_boundary_identities_radial_neumann(hemi3_bundle):
    g = hemi3_bundle.metric
    rep = conformal.boundary_identities(g, catalog.radial_cosine_field(g.grid, 1),
                                        base=hemi3_bundle)
    assert rep["grad_sq_normal_derivative"] <= 1e-6
    assert rep["schouten_normal_gradient"] <= 1e-6
    assert rep["bochner_residual"] <= 1e-3


def test_boundary_identities_four_manifold(hemi4_bundle):
    g = hemi4_bundle.metric
    u = catalog.conformal_radial_field(g.grid, [0.2, 0.0, -0.15, 0.05])
    rep = conformal.boundary_identities(g, ScalarField(g.grid, u.values),
                                        base=hemi4_bundle)
    assert rep["grad_sq_normal_derivative"] <= 1e-6
    assert rep["bochner_residual"] <= 1e-3


def test_boundary_identities_tangential_gradient(hemi4_bundle):
    # Neumann function with a nonzero face gradient: an equatorial ambient coordinate
    g = hemi4_bundle.metric
    vals = np.broadcast_to(catalog.ambient_coordinates(g.grid)[1], g.grid.shape).copy()
    rep = conformal.boundary_identities(g, ScalarField(g.grid, vals), base=hemi4_bundle)
    assert rep["grad_sq_normal_derivative"] <= 1e-6
    assert rep["schouten_normal_gradient"] <= 1e-6
    assert rep["bochner_residual"] <= 1e-3


def test_boundary_identities_reject_sloped_function(hemi3_bundle):
    g = hemi3_bundle.metric
    sloped = catalog.conformal_radial_field(g.grid, [0.0, 0.5])
    with pytest.raises(ValueError):
        conformal.boundary_identities(g, sloped, base=hemi3_bundle)


def test_boundary_identities_need_boundary(sphere3_bundle):
    g = sphere3_bundle.metric
    with pytest.raises(ValueError):
        conformal.boundary_identities(g, ScalarField(g.grid, np.zeros(g.grid.shape)),
                                      base=sphere3_bundle)
