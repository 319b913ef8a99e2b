"""Shared fixtures: expensive curvature bundles built once per session."""
import numpy as np
import pytest

from sigma_pinch import catalog
from sigma_pinch.curvature import compute_curvature


@pytest.fixture(scope="session")
def sphere4_bundle():
    g = catalog.make_metric("round-sphere4", 32, fiber_n=8, fiber_polar_n=16)
    return compute_curvature(g, with_boundary=False)


@pytest.fixture(scope="session")
def sphere3_bundle():
    g = catalog.make_metric("round-sphere3", 32, fiber_n=8)
    return compute_curvature(g, with_boundary=False)


@pytest.fixture(scope="session")
def hemi4_bundle():
    g = catalog.make_metric("hemisphere4", 32, fiber_n=8, fiber_polar_n=16)
    return compute_curvature(g)


@pytest.fixture(scope="session")
def hemi3_bundle():
    g = catalog.make_metric("hemisphere3", 32, fiber_n=8)
    return compute_curvature(g)


@pytest.fixture(scope="session")
def bumpy_hemi4_bundle():
    # cos-polynomial conformal factor with zero slope at the equator:
    # curvature is position dependent but the face stays totally geodesic
    g = catalog.make_metric("hemisphere4", 32, fiber_n=8, fiber_polar_n=16,
                            perturb=[0.1, 0.0, 0.05])
    return compute_curvature(g, want_rank4=True)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20260816)
