import json
import math

import numpy as np
import pytest

from sigma_pinch import catalog
from sigma_pinch.grid import ScalarField, SymTensor2Field
from sigma_pinch.conformal import SHRINK, ConformalFactor, conformal_rebuild
from sigma_pinch.curvature import compute_curvature
from sigma_pinch.symfunc import sigma_field
from sigma_pinch.solver import (
    BandedJacobian,
    ConeViolationError,
    ContinuationState,
    RHSField,
    SolverConfig,
    StepUnderflowError,
    _RadialProblem,
    continuity_solve,
    linearize,
    residual,
    select_delta,
    verify_conclusions,
)

T3 = 2.0 / 3.0


@pytest.fixture(scope="module")
def hemi3():
    g = catalog.make_metric("hemisphere3", 64, fiber_polar_n=16)
    p = _RadialProblem(g)
    return g, p


@pytest.fixture(scope="module")
def hemi3_path(hemi3):
    g, p = hemi3
    delta, f = select_delta(g, 0.0, T3, problem=p)
    return g, p, delta, f


# ---------------------------------------------------------------- config


def test_config_fills_target_exponent_by_dimension():
    assert SolverConfig(dimension=3).t_target == pytest.approx(T3)
    assert SolverConfig(dimension=4).t_target == 1.0


@pytest.mark.parametrize(
    "kwargs, match",
    [
        ({"dimension": 5}, "dimension"),
        ({"dimension": 3, "t_target": 0.7}, "cap"),
        ({"dimension": 4, "t_target": 1.2}, "cap"),
        ({"dimension": 4, "alpha": 1.5}, "alpha"),
        ({"dimension": 4, "alpha": -0.1}, "alpha"),
        ({"dimension": 3, "alpha": 0.5}, "Weyl coupling"),
        ({"dimension": 3, "newton_tol": 0.0}, "positive"),
        ({"dimension": 3, "dt_min": 0.1, "dt_initial": 0.05}, "dt_min"),
        ({"dimension": 3, "delta": 0.7}, "delta"),
    ],
)
def test_config_rejects_bad_values(kwargs, match):
    with pytest.raises(ValueError, match=match):
        SolverConfig(**kwargs)


def test_rhs_field_must_be_positive():
    with pytest.raises(ValueError, match="node 1"):
        RHSField(values=np.array([1.0, -0.5, 2.0]), delta=0.0)


def test_radial_problem_rejects_torus_chart():
    g = catalog.make_metric("flat-torus3", 16)
    with pytest.raises(ValueError, match="chart"):
        _RadialProblem(g)


def test_radial_problem_rejects_nonpositive_scalar_curvature():
    # amplitude large enough to push R negative near the face
    g = catalog.make_metric("hemisphere3", 48, fiber_polar_n=12,
                            perturb=[0.0, 0.0, 0.8])
    with pytest.raises(ValueError, match="needs R > 0"):
        _RadialProblem(g)


# ---------------------------------------------------------------- path start


def test_path_start_on_round_hemisphere_is_the_target(hemi3_path):
    # the whole exponent range is admissible, so the search never descends
    _, _, delta, f = hemi3_path
    assert delta == pytest.approx(T3)
    # unit round: A^t = (2 - 3t/2) g, so sigma_2^{1/2} = sqrt(3) (2 - 3t/2)
    want = math.sqrt(3.0) * (2.0 - 1.5 * delta)
    assert np.max(np.abs(f.values - want)) < 1e-8


def test_path_start_bisects_to_the_admissibility_edge():
    g = catalog.make_metric("hemisphere3", 48, fiber_polar_n=12,
                            perturb=[0.0, 0.0, 0.5])
    delta, f = select_delta(g, 0.0, T3)
    assert delta < 0.1
    assert np.min(f.values) > 0.0


def test_zero_factor_at_path_start_solves_exactly(hemi3_path):
    g, p, delta, f = hemi3_path
    res = residual(g, np.zeros(p.size), delta, f, problem=p)
    # f is frozen through the identical assembly, so the defect vanishes
    # to the last bit, not merely to tolerance
    assert float(np.max(np.abs(res.values))) == 0.0


def test_residual_matches_closed_form_on_round_sphere(hemi3_path):
    g, p, delta, f = hemi3_path
    t = 0.4
    res = residual(g, np.zeros(p.size), t, f, problem=p)
    want = math.sqrt(3.0) * 1.5 * (delta - t)
    assert res.values.shape == g.grid.shape
    assert np.max(np.abs(res.values - want)) < 1e-8


def test_residual_shifts_by_scaled_rhs_under_constant_offset(hemi3_path):
    g, p, delta, f = hemi3_path
    th = g.grid.axes[0].nodes()
    u = 0.05 * np.cos(2.0 * th)
    c = 0.1
    t = 0.4
    r0 = residual(g, u, t, f, problem=p).values
    r1 = residual(g, u + c, t, f, problem=p).values
    # A^t ignores constant offsets, so only the right side moves
    law = -f.values[:, None, None] * np.exp(2.0 * u[:, None, None]) * (math.exp(2.0 * c) - 1.0)
    assert np.max(np.abs(r1 - r0 - law)) < 1e-12


def test_residual_agrees_with_full_rebuild(hemi3_path):
    """Column-restricted assembly against the direct curvature of e^{-2u}g."""
    g, p, delta, f = hemi3_path
    t = 0.4
    th = g.grid.axes[0].nodes()[:, None, None]
    u_vals = np.broadcast_to(0.05 * np.cos(2.0 * th), g.grid.shape).copy()
    res = residual(g, ScalarField(g.grid, u_vals), t, f, problem=p)

    w = ConformalFactor(ScalarField(g.grid, u_vals), convention=SHRINK)
    bt = compute_curvature(conformal_rebuild(g, w))
    a_t = SymTensor2Field(g.grid, bt.schouten_generalized(t))
    s2 = sigma_field(a_t, g, 2)
    direct = np.sqrt(np.maximum(s2, 0.0)) - f.values[:, None, None] * np.exp(2.0 * u_vals)
    assert np.max(np.abs(res.values - direct)) < 1e-8


def test_residual_rejects_factor_with_face_slope(hemi3_path):
    g, p, delta, f = hemi3_path
    u = np.cos(g.grid.axes[0].nodes())
    with pytest.raises(ValueError, match="Neumann"):
        residual(g, u, 0.4, f, problem=p)


def test_residual_rejects_fiber_dependent_factor(hemi3_path):
    g, p, delta, f = hemi3_path
    vals = np.zeros(g.grid.shape)
    vals[0, 0, 0] = 1e-3
    with pytest.raises(ValueError, match="radial"):
        residual(g, ScalarField(g.grid, vals), 0.4, f, problem=p)


def test_residual_rejects_wrong_length_vector(hemi3_path):
    g, p, delta, f = hemi3_path
    with pytest.raises(ValueError, match="shape"):
        residual(g, np.zeros(p.size + 1), 0.4, f, problem=p)


def test_cone_violation_names_the_worst_node(hemi3_path):
    g, p, delta, f = hemi3_path
    # A^t = (2 - 3t/2) g turns negative past t = 4/3
    with pytest.raises(ConeViolationError, match="cone violation") as err:
        residual(g, np.zeros(p.size), 1.5, f, problem=p)
    assert isinstance(err.value.node, int)
    assert err.value.value < 0.0


# ---------------------------------------------------------------- jacobian


def test_jacobian_action_on_constants_matches_rhs_derivative(hemi3_path):
    g, p, delta, f = hemi3_path
    jac = linearize(g, np.zeros(p.size), delta, f, problem=p)
    dev = np.abs(jac.matrix @ np.ones(p.size) + 4.0 * f.values**2)
    assert np.max(dev) < 1e-8

    th = g.grid.axes[0].nodes()
    u = 0.05 * np.cos(2.0 * th)
    jac_u = linearize(g, u, 0.4, f, problem=p)
    want = -4.0 * f.values**2 * np.exp(4.0 * u)
    assert np.max(np.abs(jac_u.matrix @ np.ones(p.size) - want)) < 1e-8


def test_jacobian_leading_block_matches_tensor_formula():
    g = catalog.make_metric("hemisphere3", 128, fiber_polar_n=8)
    p = _RadialProblem(g)
    delta, f = select_delta(g, 0.0, T3, problem=p)
    jac = linearize(g, np.zeros(128), 0.3, f, problem=p)
    assert jac.second_order_discrepancy < 1e-2


def test_banded_solve_matches_dense_solve(hemi3_path):
    g, p, delta, f = hemi3_path
    jac = linearize(g, np.zeros(p.size), 0.4, f, problem=p)
    assert jac.band == p.band
    rng = np.random.default_rng(11)
    rhs = rng.standard_normal(p.size)
    x_banded = jac.solve(rhs)
    x_dense = np.linalg.solve(jac.matrix, rhs)
    assert np.max(np.abs(x_banded - x_dense)) < 1e-10 * np.max(np.abs(x_dense))


# ---------------------------------------------------------------- continuation


def test_trivial_path_returns_zero_immediately(hemi3):
    g, p = hemi3
    cfg = SolverConfig(dimension=3)
    state = continuity_solve(g, cfg, problem=p)
    assert state.t == pytest.approx(T3)
    assert np.max(np.abs(state.u)) == 0.0
    assert state.residual_sup <= 1e-12
    assert state.newton_iterations == 0
    assert len(state.trace) == 1


def test_round_path_lands_on_the_constant_solution(hemi3):
    # from t = 0 the endpoint factor is explicit: A^t is shift invariant,
    # so e^{2c} sqrt(sigma_2(A^delta)) = sqrt(sigma_2(A^{t0})) fixes c
    g, p = hemi3
    cfg = SolverConfig(dimension=3, delta=0.0)
    state = continuity_solve(g, cfg, problem=p)
    c_star = 0.5 * math.log((2.0 - 1.5 * T3) / 2.0)
    assert state.t == pytest.approx(T3)
    assert np.max(np.abs(state.u - c_star)) < 1e-6
    assert state.residual_sup < 1e-10
    assert state.max_grad_u < 1e-10
    assert state.newton_iterations <= 6


def test_round_path_constant_in_dimension_four():
    g = catalog.make_metric("hemisphere4", 48, fiber_polar_n=12)
    cfg = SolverConfig(dimension=4, delta=0.0)
    state = continuity_solve(g, cfg)
    # A^t = ((3 - 2t)/2) g on the unit round hemisphere
    c_star = 0.5 * math.log(1.0 / 3.0)
    assert np.max(np.abs(state.u - c_star)) < 1e-6
    assert state.residual_sup < 1e-10


def test_perturbed_path_converges_and_conclusions_hold():
    g = catalog.make_metric("hemisphere3", 48, fiber_polar_n=12,
                            perturb=[0.0, 0.0, 0.05])
    cfg = SolverConfig(dimension=3, delta=0.0)
    state = continuity_solve(g, cfg)
    assert state.t == pytest.approx(T3)
    assert state.residual_sup < 1e-10
    assert state.newton_iterations <= 6

    ts = [row["t"] for row in state.trace]
    assert ts == sorted(ts)
    assert ts[0] == 0.0
    assert ts[-1] == pytest.approx(T3)

    report = verify_conclusions(g, state)
    assert report["passed"]
    for check in report["checks"].values():
        assert check["satisfied"]
    verify_conclusions(g, state, strict=True)


def test_path_from_bisected_start_reaches_the_target():
    g = catalog.make_metric("hemisphere3", 48, fiber_polar_n=12,
                            perturb=[0.0, 0.0, 0.5])
    cfg = SolverConfig(dimension=3)
    state = continuity_solve(g, cfg)
    assert state.trace[0]["t"] < 0.1
    assert state.t == pytest.approx(T3)
    assert verify_conclusions(g, state)["passed"]


def test_weyl_coupled_path_in_dimension_four():
    g = catalog.make_metric("hemisphere4", 48, fiber_polar_n=12,
                            perturb=[0.0, 0.0, 0.05])
    cfg = SolverConfig(dimension=4, alpha=1.0, delta=0.0)
    state = continuity_solve(g, cfg)
    assert state.t == pytest.approx(1.0)
    assert state.residual_sup < 1e-10
    assert state.lambda_margin is not None and state.lambda_margin > 0.0

    report = verify_conclusions(g, state)
    assert report["passed"]
    assert report["checks"]["sigma2-weyl"]["min_margin"] > 0.0
    assert report["checks"]["boundary-mean"]["satisfied"]


def test_config_dimension_must_match_chart(hemi3):
    g, p = hemi3
    with pytest.raises(ValueError, match="does not match"):
        continuity_solve(g, SolverConfig(dimension=4), problem=p)


def test_requested_start_outside_cone_is_rejected():
    g = catalog.make_metric("hemisphere3", 48, fiber_polar_n=12,
                            perturb=[0.0, 0.0, 0.5])
    cfg = SolverConfig(dimension=3, delta=T3)
    with pytest.raises(ValueError, match="not inside the cone"):
        continuity_solve(g, cfg)


def test_step_underflow_reports_last_good_state(hemi3, tmp_path):
    g, p = hemi3
    trace_file = tmp_path / "trace.jsonl"
    # max_newton = 0 makes every correction fail, so the step collapses
    cfg = SolverConfig(dimension=3, delta=0.0, max_newton=0,
                       trace_path=str(trace_file))
    with pytest.raises(StepUnderflowError, match="underflow") as err:
        continuity_solve(g, cfg, problem=p)
    assert err.value.last_state.t == 0.0
    lines = trace_file.read_text().splitlines()
    assert len(lines) == 1


def test_trace_rows_have_fixed_keys(hemi3, tmp_path):
    g, p = hemi3
    trace_file = tmp_path / "trace.jsonl"
    cfg = SolverConfig(dimension=3, delta=0.0, trace_path=str(trace_file))
    state = continuity_solve(g, cfg, problem=p)
    lines = trace_file.read_text().splitlines()
    assert len(lines) == len(state.trace)
    keys = ["t", "residual", "min_cone_margin", "max_u", "min_u", "max_grad_u"]
    for line in lines:
        row = json.loads(line)
        assert list(row) == keys
    assert json.loads(lines[0])["t"] == 0.0
    assert json.loads(lines[-1])["t"] == pytest.approx(T3)


def test_oscillation_grows_with_perturbation_amplitude():
    oscs = []
    for amp in (0.02, 0.05):
        g = catalog.make_metric("hemisphere3", 48, fiber_polar_n=12,
                                perturb=[0.0, 0.0, amp])
        state = continuity_solve(g, SolverConfig(dimension=3, delta=0.0))
        oscs.append(state.max_u - state.min_u)
    assert oscs[0] > 0.0
    assert oscs[1] >= oscs[0]


def test_strict_verification_raises_on_violated_conclusion(hemi3):
    g, p = hemi3
    # an exponent far past the admissible range breaks the lower bound
    fake = ContinuationState(
        t=3.0, u=np.zeros(p.size), residual_sup=0.0, min_cone_margin=1.0,
        max_u=0.0, min_u=0.0, max_grad_u=0.0, newton_iterations=0, alpha=0.0)
    report = verify_conclusions(g, fake)
    assert not report["passed"]
    with pytest.raises(ValueError, match="violated"):
        verify_conclusions(g, fake, strict=True)
