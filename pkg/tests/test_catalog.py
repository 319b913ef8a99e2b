import numpy as np
import pytest

from sigma_pinch import catalog


def test_catalog_names_and_descriptions():
    names = catalog.manifold_names()
    assert set(names) == {
        "round-sphere3", "round-sphere4",
        "hemisphere3", "hemisphere4",
        "flat-torus3", "flat-torus4",
    }
    for name in names:
        info = catalog.describe(name)
        assert info["dim"] in (3, 4)
        assert isinstance(info["chi"], int)
    with pytest.raises(ValueError):
        catalog.describe("klein-bottle")


def test_euler_characteristics_match_topology():
    chi = {name: catalog.describe(name)["chi"] for name in catalog.manifold_names()}
    assert chi["round-sphere4"] == 2
    assert chi["hemisphere4"] == 1
    assert chi["round-sphere3"] == 0
    assert chi["hemisphere3"] == 1
    assert chi["flat-torus3"] == 0
    assert chi["flat-torus4"] == 0


@pytest.mark.parametrize("name", sorted(catalog.manifold_names()))
def test_metric_positive_definite_everywhere(name):
    g = catalog.make_metric(name, 16, fiber_n=8)
    assert g.check_positive_definite() > 0.0


def test_perturbed_metric_positive_definite():
    g = catalog.make_metric("hemisphere4", 16, fiber_n=8, perturb=[0.2, 0.0, 0.1])
    assert g.check_positive_definite() > 0.0
    assert g.catalog_id.startswith("conformal-radial:")


def test_flat_torus_metric_is_constant():
    g = catalog.make_metric("flat-torus4", 8, radius=2.0)
    comps = g.tensor.comps
    diag = comps[..., [0, 4, 7, 9]]
    assert np.abs(diag - 4.0).max() == 0.0
    off = np.delete(comps, [0, 4, 7, 9], axis=-1)
    assert np.abs(off).max() == 0.0


def test_radius_and_perturb_validation():
    with pytest.raises(ValueError):
        catalog.make_metric("round-sphere3", 16, radius=0.0)
    with pytest.raises(ValueError):
        catalog.make_metric("flat-torus3", 16, perturb=[0.1])
    with pytest.raises(ValueError):
        catalog.make_metric("moebius", 16)


def test_radial_profile_derivatives_match_finite_differences():
    coeffs = [0.3, -0.1, 0.05]
    th = np.linspace(0.1, 1.4, 7)
    w, dw, ddw = catalog.radial_profile_derivatives(coeffs, th)
    assert np.abs(w - catalog.radial_profile(coeffs, th)).max() < 1e-14
    eps1, eps2 = 1e-6, 1e-4
    fd1 = (catalog.radial_profile(coeffs, th + eps1)
           - catalog.radial_profile(coeffs, th - eps1)) / (2 * eps1)
    fd2 = (catalog.radial_profile(coeffs, th + eps2) - 2 * w
           + catalog.radial_profile(coeffs, th - eps2)) / eps2**2
    assert np.abs(dw - fd1).max() < 1e-8
    assert np.abs(ddw - fd2).max() < 1e-6


def test_zero_linear_coefficient_gives_flat_slope_at_equator():
    # w = sum_k c_k cos^k(theta): at theta = pi/2 only the linear term
    # contributes to w', so c_1 = 0 keeps the equatorial face geodesic
    _, dw, _ = catalog.radial_profile_derivatives([0.3, 0.0, 0.05],
                                                  np.array([np.pi / 2]))
    assert abs(dw[0]) < 1e-14
    _, dw_bad, _ = catalog.radial_profile_derivatives([0.3, -0.1, 0.05],
                                                      np.array([np.pi / 2]))
    assert abs(dw_bad[0] - 0.1) < 1e-14


@pytest.mark.parametrize("name", ["round-sphere3", "round-sphere4", "hemisphere4"])
def test_ambient_coordinates_lie_on_the_sphere(name):
    grid = catalog.make_grid(name, 16, fiber_n=8)
    coords = catalog.ambient_coordinates(grid)
    assert len(coords) == grid.dim + 1
    r2 = np.zeros(grid.shape)
    for c in coords:
        r2 = r2 + np.broadcast_to(c, grid.shape) ** 2
    assert np.abs(r2 - 1.0).max() < 1e-12


def test_ambient_polynomial_is_reproducible(rng):
    grid = catalog.make_grid("hemisphere3", 16, fiber_n=8)
    a = catalog.random_ambient_polynomial(grid, np.random.default_rng(5))
    b = catalog.random_ambient_polynomial(grid, np.random.default_rng(5))
    assert np.array_equal(a.values, b.values)


def test_radial_cosine_field_satisfies_neumann():
    grid = catalog.make_grid("hemisphere4", 48, fiber_n=8)
    # one-sided face stencil error grows like (2k)^11 h^10
    for k, bar in ((1, 1e-10), (2, 1e-7)):
        u = catalog.radial_cosine_field(grid, k)
        assert np.abs(grid.face_normal_derivative(u.values)).max() < bar


def test_extended_samples_agree_with_double_components():
    g = catalog.make_metric("round-sphere4", 16, fiber_n=8, fiber_polar_n=16)
    assert g.comps_extended is not None
    assert g.comps_extended.dtype == np.longdouble
    assert np.abs(g.comps_extended.astype(np.float64) - g.tensor.comps).max() == 0.0


def test_default_fiber_resolution_scales_with_radial():
    grid = catalog.make_grid("round-sphere4", 24)
    # polar fiber axis defaults to 2n so that quadrature across the
    # fiber seam keeps up with the radial resolution
    assert grid.shape[1] == 48
    grid2 = catalog.make_grid("round-sphere4", 24, fiber_polar_n=16)
    assert grid2.shape[1] == 16
