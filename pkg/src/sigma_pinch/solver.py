"""Continuity-path Newton solver for radial conformal deformations.

Solves sigma_2^{1/2}(g^{-1} A^t_u) - (sqrt(alpha)/4)|W_g| = f e^{2u} with a
Neumann condition at the equator face, walking t from a safe start delta
(where u = 0 solves exactly, since f is frozen there) up to the target
exponent. Factors are restricted to radial profiles, which reduces the
unknown to one value per latitude node; the curvature algebra is still the
full tensor transform evaluated on a chart column, never a hand-derived
ODE. First and second radial derivatives come from the dense folded
matrices of the chart, so pole regularity and the Neumann face condition
are built into the discrete operator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from . import serialize
from .conformal import SHRINK, ConformalFactor, conformal_rebuild
from .curvature import CurvatureBundle, _unpack_like, compute_curvature
from .grid import MetricField, ScalarField, SymTensor2Field, fornberg_weights, sym_index
from .symfunc import sigma_field, sigma_k

_DELTA_FLOOR = -1.0e3
_START_RESIDUAL_TOL = 1.0e-12


class ConeViolationError(ValueError):
    """A requested state leaves the positivity cone; carries the worst node."""

    def __init__(self, message: str, node: int, value: float):
        super().__init__(message)
        self.node = node
        self.value = value


class StepUnderflowError(RuntimeError):
    """Continuation step fell below the floor; carries the last good state."""

    def __init__(self, message: str, last_state: "ContinuationState"):
        super().__init__(message)
        self.last_state = last_state


@dataclass
class SolverConfig:
    dimension: int
    t_target: float | None = None
    alpha: float = 0.0
    newton_tol: float = 1.0e-10
    max_newton: int = 30
    dt_initial: float = 0.05
    dt_min: float = 1.0e-4
    cone_margin: float = 1.0e-8
    delta: float | None = None
    trace_path: str | None = None

    def __post_init__(self):
        if self.dimension not in (3, 4):
            raise ValueError(f"dimension must be 3 or 4, got {self.dimension}")
        if self.t_target is None:
            self.t_target = 2.0 / 3.0 if self.dimension == 3 else 1.0
        cap = 2.0 / 3.0 if self.dimension == 3 else 1.0
        if self.t_target > cap + 1e-12:
            raise ValueError(
                f"t_target {self.t_target} exceeds the n={self.dimension} cap {cap}"
            )
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.dimension == 3 and self.alpha != 0.0:
            raise ValueError("the n=3 path has no Weyl coupling; alpha must be 0")
        if self.newton_tol <= 0 or self.dt_initial <= 0 or self.dt_min <= 0:
            raise ValueError("tolerances and steps must be positive")
        if self.dt_min > self.dt_initial:
            raise ValueError("dt_min must not exceed dt_initial")
        if self.delta is not None and self.delta > self.t_target:
            raise ValueError("path start delta must not exceed t_target")


@dataclass
class RHSField:
    """Positive radial right-hand side frozen at the path start."""

    values: np.ndarray
    delta: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("rhs field must be a radial vector")
        if np.min(self.values) <= 0.0:
            j = int(np.argmin(self.values))
            raise ValueError(
                f"rhs field must be positive; min {self.values[j]:.6g} at node {j}"
            )


@dataclass
class ContinuationState:
    t: float
    u: np.ndarray
    residual_sup: float
    min_cone_margin: float
    max_u: float
    min_u: float
    max_grad_u: float
    newton_iterations: int
    alpha: float
    lambda_margin: float | None = None
    trace: list[dict] = field(default_factory=list, repr=False)

    def trace_row(self) -> dict:
        return {
            "t": self.t,
            "residual": self.residual_sup,
            "min_cone_margin": self.min_cone_margin,
            "max_u": self.max_u,
            "min_u": self.min_u,
            "max_grad_u": self.max_grad_u,
        }


@dataclass
class BandedJacobian:
    """Dense-stored banded Jacobian of the squared-form residual."""

    matrix: np.ndarray
    band: int
    second_order_discrepancy: float

    def to_banded(self) -> np.ndarray:
        n = self.matrix.shape[0]
        b = self.band
        ab = np.zeros((2 * b + 1, n))
        for i in range(n):
            lo, hi = max(0, i - b), min(n, i + b + 1)
            ab[b + i - np.arange(lo, hi), np.arange(lo, hi)] = self.matrix[i, lo:hi]
        return ab

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return solve_banded((self.band, self.band), self.to_banded(), rhs)


class _RadialProblem:
    """Chart-column reduction of the conformal Schouten transform.

    Extracts the base tensors along one fiber column (all chart fields are
    latitude-only for the supported metrics) and assembles A^t of
    e^{-2u}g from radial derivative vectors.
    """

    def __init__(self, g: MetricField, bundle: CurvatureBundle | None = None):
        grid = g.grid
        if grid.chart_kind not in ("sphere3", "sphere4") or grid.axes[0].name != "theta":
            raise ValueError("solver needs a latitude-fibered sphere or hemisphere chart")
        self.metric = g
        self.grid = grid
        self.n = grid.dim
        self.bundle = bundle if bundle is not None else compute_curvature(g)
        # mid-fiber column: away from fiber poles the metric block is
        # best conditioned for the pencil eigensolves
        col = (slice(None),) + tuple(ax.n // 2 for ax in grid.axes[1:])
        self.col = col
        n = self.n
        self.g_packed = self.bundle.metric.tensor.comps[col].astype(np.float64)
        self.g_mat = _unpack_like(self.g_packed, n)
        self.ginv_mat = np.linalg.inv(self.g_mat)
        self.gamma_theta = self.bundle.gamma[col][:, 0, :]
        self.schouten = self.bundle.schouten[col]
        self.scal = self.bundle.scal[col]
        self.weyl = np.sqrt(np.maximum(self.bundle.weyl_norm2[col], 0.0))
        self.d1, self.d2 = grid.radial_matrices()
        nz = np.abs(self.d1) + np.abs(self.d2) > 0
        ii, jj = np.nonzero(nz)
        self.band = int(np.max(np.abs(ii - jj)))
        self.size = grid.axes[0].n
        self.pp_slot = int(sym_index(n)[0, 0])
        if np.min(self.scal) <= 0.0:
            j = int(np.argmin(self.scal))
            raise ValueError(
                f"path needs R > 0 on the column; min R = {self.scal[j]:.6g} at node {j}"
            )

    def base_schouten_t(self, t: float) -> np.ndarray:
        shift = (1.0 - t) / (self.n - 2) * self.scal / (2.0 * (self.n - 1))
        return self.schouten + shift[:, None] * self.g_packed

    def derivatives(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.d1 @ u, self.d2 @ u

    def transformed_schouten(
        self, u: np.ndarray, t: float, d1u: np.ndarray | None = None,
        d2u: np.ndarray | None = None,
    ) -> np.ndarray:
        """Packed A^t of e^{-2u}g along the column."""
        if d1u is None or d2u is None:
            d1u, d2u = self.derivatives(u)
        hess = -self.gamma_theta * d1u[:, None]
        hess[:, self.pp_slot] += d2u
        lap = np.einsum("nab,nab->n", self.ginv_mat, _unpack_like(hess, self.n))
        grad2 = self.ginv_mat[:, 0, 0] * d1u**2
        a = self.base_schouten_t(t) + hess
        a[:, self.pp_slot] += d1u**2
        trace_coef = (1.0 - t) / (self.n - 2) * lap - 0.5 * (2.0 - t) * grad2
        return a + trace_coef[:, None] * self.g_packed

    def pencil_eigenvalues(self, a_packed: np.ndarray) -> np.ndarray:
        d, q = np.linalg.eigh(self.g_mat)
        w = q * (1.0 / np.sqrt(d))[:, None, :]
        a = _unpack_like(a_packed, self.n)
        b = w.transpose(0, 2, 1) @ a @ w
        return np.linalg.eigvalsh(0.5 * (b + b.transpose(0, 2, 1)))

    def sigma_pair(self, a_packed: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        eigs = self.pencil_eigenvalues(a_packed)
        return sigma_k(eigs, 1), sigma_k(eigs, 2)

    def rhs_linear(self, u: np.ndarray, f: np.ndarray, alpha: float) -> np.ndarray:
        return f * np.exp(2.0 * u) + (math.sqrt(alpha) / 4.0) * self.weyl

    def grad_sup(self, u: np.ndarray) -> float:
        d1u = self.d1 @ u
        return float(np.max(np.sqrt(self.ginv_mat[:, 0, 0]) * np.abs(d1u)))

    def face_slope(self, u: np.ndarray) -> float:
        """One-sided derivative at the face, without reflection folding."""
        ax = self.grid.axes[0]
        if ax.kind != "bounded":
            return 0.0
        k = min(11, self.size)
        offs = ax.h * np.arange(-k + 1, 1, dtype=np.float64)
        w = fornberg_weights(ax.h / 2.0, offs, 1)[:, 1]
        return float(w @ u[-k:])


def _as_radial(problem: _RadialProblem, u) -> np.ndarray:
    if isinstance(u, ScalarField):
        if u.values.shape != problem.grid.shape:
            raise ValueError("factor lives on a different grid")
        col = u.values[problem.col]
        spread = np.max(np.abs(u.values - col[(slice(None),) + (None,) * (problem.n - 1)]))
        if spread > 1e-12:
            raise ValueError(f"solver is restricted to radial factors; spread {spread:.3g}")
        return np.asarray(col, dtype=np.float64)
    arr = np.asarray(u, dtype=np.float64)
    if arr.shape != (problem.size,):
        raise ValueError(f"radial factor must have shape ({problem.size},)")
    return arr


def _reported_residual(
    problem: _RadialProblem, u: np.ndarray, t: float, f: np.ndarray, alpha: float,
    cone_margin: float = 0.0, check_cone: bool = True,
) -> tuple[np.ndarray, float, float | None]:
    """eq-form residual vector, cone margin, and the n=4 positivity margin."""
    s1, s2 = problem.sigma_pair(problem.transformed_schouten(u, t))
    cone = float(min(np.min(s1), np.min(s2)))
    if check_cone and cone <= cone_margin:
        j = int(np.argmin(np.minimum(s1, s2)))
        raise ConeViolationError(
            f"cone violation: min(sigma_1, sigma_2) = {cone:.6g} at node {j}", j, cone
        )
    root = np.sqrt(np.maximum(s2, 0.0))
    lam = None
    if problem.n == 4:
        lam = float(np.min(root - (math.sqrt(alpha) / 4.0) * problem.weyl))
    res = root - problem.rhs_linear(u, f, alpha)
    return res, cone, lam


def residual(g: MetricField, u, t: float, f: RHSField, alpha: float = 0.0,
             problem: _RadialProblem | None = None) -> ScalarField:
    """Pointwise defect of the path equation at exponent t.

    u may be a radial vector or a fiber-constant ScalarField. Raises
    ConeViolationError when the transformed tensor leaves the cone, and
    ValueError for a factor violating the face Neumann condition.
    """
    p = problem if problem is not None else _RadialProblem(g)
    uu = _as_radial(p, u)
    slope = p.face_slope(uu)
    scale = max(1.0, float(np.max(np.abs(uu))))
    if abs(slope) > 1e-6 * scale:
        raise ValueError(f"Neumann violation at the face: slope {slope:.3g}")
    res, _, _ = _reported_residual(p, uu, t, f.values, alpha, check_cone=True)
    shape = p.grid.shape
    return ScalarField(p.grid, np.broadcast_to(
        res[(slice(None),) + (None,) * (p.n - 1)], shape).copy())


def select_delta(g: MetricField, alpha: float = 0.0, t_target: float | None = None,
                 cone_margin: float = 1.0e-8,
                 problem: _RadialProblem | None = None) -> tuple[float, RHSField]:
    """Largest path start where the base tensor is safely inside the cone.

    Descends from the target in steps of 0.1, then bisects the
    admissibility edge to 1e-3. Admissible means A^t of the background is
    positive definite with the configured margin and, in n=4, the
    root-sigma_2 excess over the Weyl term stays positive.
    """
    p = problem if problem is not None else _RadialProblem(g)
    if t_target is None:
        t_target = 2.0 / 3.0 if p.n == 3 else 1.0

    def admissible(t: float) -> bool:
        eigs = p.pencil_eigenvalues(p.base_schouten_t(t))
        if np.min(eigs) <= cone_margin:
            return False
        if p.n == 4 and alpha > 0.0:
            s2 = sigma_k(eigs, 2)
            excess = np.sqrt(np.maximum(s2, 0.0)) - (math.sqrt(alpha) / 4.0) * p.weyl
            if np.min(excess) <= cone_margin:
                return False
        return True

    lo = t_target
    while not admissible(lo):
        lo -= 0.1
        if lo < _DELTA_FLOOR:
            raise ValueError("no admissible path start above the search floor")
    if lo < t_target:
        # refine the edge between lo (good) and lo + 0.1 (bad)
        hi = min(lo + 0.1, t_target)
        while hi - lo > 1e-3:
            mid = 0.5 * (lo + hi)
            if admissible(mid):
                lo = mid
            else:
                hi = mid
    delta = lo
    _, s2 = p.sigma_pair(p.base_schouten_t(delta))
    froz = np.sqrt(np.maximum(s2, 0.0)) - (math.sqrt(alpha) / 4.0) * p.weyl
    return delta, RHSField(values=froz, delta=delta)


def _squared_form(problem: _RadialProblem, u, d1u, d2u, t, f, alpha) -> np.ndarray:
    """Newton works on sigma_2 minus the squared right side; same zero set
    as the root form while positivity holds, and smooth across it."""
    a = problem.transformed_schouten(u, t, d1u, d2u)
    _, s2 = problem.sigma_pair(a)
    rhs = problem.rhs_linear(u, f, alpha)
    return s2 - rhs**2


def linearize(g: MetricField, u, t: float, f: RHSField, alpha: float = 0.0,
              problem: _RadialProblem | None = None, fd_step: float = 1.0e-7) -> BandedJacobian:
    """One-sided finite-difference Jacobian of the squared-form residual.

    Exploits the banded dependence through the radial derivative matrices.
    The diagnostic compares the coefficient multiplying the second
    derivative against the explicit first Newton transformation of the
    transformed tensor, contracted with the derivative's tensor direction.
    """
    p = problem if problem is not None else _RadialProblem(g)
    uu = _as_radial(p, u)
    size, band = p.size, p.band
    fv = f.values
    d1u, d2u = p.derivatives(uu)
    g0 = _squared_form(p, uu, d1u, d2u, t, fv, alpha)
    mat = np.zeros((size, size))
    stride = 2 * band + 1
    for c in range(min(stride, size)):
        up = uu.copy()
        up[c::stride] += fd_step
        d1p, d2p = p.derivatives(up)
        diff = (_squared_form(p, up, d1p, d2p, t, fv, alpha) - g0) / fd_step
        for j in range(c, size, stride):
            lo, hi = max(0, j - band), min(size, j + band + 1)
            mat[lo:hi, j] = diff[lo:hi]

    # The sigma_2 block is shift invariant (it sees u only through
    # derivatives), so the action on constants is known in closed form;
    # one-sided differencing loses that small response under truncation
    # error that accumulates with one sign across each row. Re-pin the
    # row sums to the analytic value through the diagonal.
    rhs = p.rhs_linear(uu, fv, alpha)
    analytic = -4.0 * rhs * fv * np.exp(2.0 * uu)
    idx = np.arange(size)
    mat[idx, idx] += analytic - mat.sum(axis=1)

    # leading-coefficient diagnostic: finite differences in the second
    # derivative slot against sigma_2's derivative tensor
    dpp = (_squared_form(p, uu, d1u, d2u + fd_step, t, fv, alpha) - g0) / fd_step
    a = _unpack_like(p.transformed_schouten(uu, t, d1u, d2u), p.n)
    a_up = p.ginv_mat @ a @ p.ginv_mat
    s1 = np.einsum("nab,nab->n", p.ginv_mat, a)
    t1_pp = s1 * p.ginv_mat[:, 0, 0] - a_up[:, 0, 0]
    formula = t1_pp + (1.0 - t) / (p.n - 2) * (p.n - 1) * s1 * p.ginv_mat[:, 0, 0]
    disc = float(np.max(np.abs(dpp - formula)) / max(1e-30, np.max(np.abs(formula))))
    return BandedJacobian(matrix=mat, band=band, second_order_discrepancy=disc)


def _newton(problem, u0, t, f, alpha, config) -> tuple[np.ndarray, dict] | None:
    u = u0.copy()
    fv = f.values
    for it in range(1, config.max_newton + 1):
        try:
            res, cone, lam = _reported_residual(
                problem, u, t, fv, alpha, cone_margin=config.cone_margin)
        except ConeViolationError:
            return None
        if lam is not None and lam <= config.cone_margin:
            return None
        sup = float(np.max(np.abs(res)))
        if sup <= config.newton_tol:
            return u, {"iterations": it - 1, "residual": sup,
                       "cone": cone, "lambda": lam}
        jac = linearize(problem.metric, u, t, f, alpha, problem=problem)
        d1u, d2u = problem.derivatives(u)
        g0 = _squared_form(problem, u, d1u, d2u, t, fv, alpha)
        try:
            du = jac.solve(-g0)
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(du)):
            return None
        u = u + du
    return None


def _make_state(problem, u, t, alpha, info, trace) -> ContinuationState:
    return ContinuationState(
        t=t,
        u=u.copy(),
        residual_sup=info["residual"],
        min_cone_margin=info["cone"],
        max_u=float(np.max(u)),
        min_u=float(np.min(u)),
        max_grad_u=problem.grad_sup(u),
        newton_iterations=info["iterations"],
        alpha=alpha,
        lambda_margin=info["lambda"],
        trace=trace,
    )


def continuity_solve(g: MetricField, config: SolverConfig,
                     problem: _RadialProblem | None = None) -> ContinuationState:
    """Walk the exponent from the path start to the target.

    Newton-corrects at each exponent; on failure the step halves, and
    underflow raises StepUnderflowError carrying the last accepted state.
    The trace records one row per accepted state.
    """
    p = problem if problem is not None else _RadialProblem(g)
    if config.dimension != p.n:
        raise ValueError(f"config dimension {config.dimension} does not match chart {p.n}")
    t_target = float(config.t_target)
    if config.delta is not None:
        delta = float(config.delta)
        eigs = p.pencil_eigenvalues(p.base_schouten_t(delta))
        if np.min(eigs) <= config.cone_margin:
            raise ValueError(f"requested path start {delta} is not inside the cone")
        s1, s2 = p.sigma_pair(p.base_schouten_t(delta))
        fvals = np.sqrt(np.maximum(s2, 0.0)) - (math.sqrt(config.alpha) / 4.0) * p.weyl
        f = RHSField(values=fvals, delta=delta)
    else:
        delta, f = select_delta(g, config.alpha, t_target,
                                config.cone_margin, problem=p)

    trace: list[dict] = []
    u = np.zeros(p.size)
    res0, cone0, lam0 = _reported_residual(p, u, delta, f.values, config.alpha,
                                           cone_margin=config.cone_margin)
    start_sup = float(np.max(np.abs(res0)))
    if start_sup > _START_RESIDUAL_TOL:
        raise RuntimeError(f"path start is not a solution: residual {start_sup:.3g}")
    state = _make_state(p, u, delta,
                        config.alpha,
                        {"iterations": 0, "residual": start_sup,
                         "cone": cone0, "lambda": lam0},
                        trace)
    trace.append(state.trace_row())

    t = delta
    dt = config.dt_initial
    while t < t_target - 1e-14:
        t_try = min(t + dt, t_target)
        out = _newton(p, u, t_try, f, config.alpha, config)
        if out is None:
            dt *= 0.5
            if dt < config.dt_min:
                _flush_trace(config, trace)
                raise StepUnderflowError(
                    f"step underflow at t = {t:.6g} (target {t_target:.6g})", state)
            continue
        u, info = out
        t = t_try
        state = _make_state(p, u, t, config.alpha, info, trace)
        trace.append(state.trace_row())
        dt = min(2.0 * dt, config.dt_initial)

    _flush_trace(config, trace)
    return state


def _flush_trace(config: SolverConfig, trace: list[dict]) -> None:
    if config.trace_path:
        with open(config.trace_path, "w") as fh:
            for row in trace:
                fh.write(serialize.dump_line(row))


def verify_conclusions(g: MetricField, state: ContinuationState,
                       strict: bool = False) -> dict:
    """Direct curvature check of the pinching conclusions at the endpoint.

    Rebuilds e^{-2u}g on the full chart, recomputes its curvature, and
    evaluates each pointwise matrix inequality as a pencil margin. With
    strict=True the first violated inequality raises, naming the worst
    node.
    """
    grid = g.grid
    n = grid.dim
    t0 = float(state.t)
    u_full = np.broadcast_to(
        np.asarray(state.u)[(slice(None),) + (None,) * (n - 1)], grid.shape).copy()
    w = ConformalFactor(ScalarField(grid, u_full), convention=SHRINK)
    rebuilt = conformal_rebuild(g, w)
    bt = compute_curvature(rebuilt)

    gt_mat = _unpack_like(rebuilt.tensor.comps, n)
    ric = _unpack_like(bt.ric, n)
    rg = bt.scal[..., None, None] * gt_mat

    d_g, q_g = np.linalg.eigh(gt_mat)
    white = q_g * (1.0 / np.sqrt(d_g))[..., None, :]
    white_t = np.swapaxes(white, -1, -2)

    def pencil_min(x_mat):
        b = white_t @ x_mat @ white
        eigs = np.linalg.eigvalsh(0.5 * (b + np.swapaxes(b, -1, -2)))
        flat = eigs.min(axis=-1).ravel()
        j = int(np.argmin(flat))
        return float(flat[j]), j

    checks: dict[str, dict] = {}

    def record(name, margin, node):
        checks[name] = {"min_margin": margin, "worst_node": node,
                        "satisfied": bool(margin > 0.0)}

    if n == 3:
        m, j = pencil_min(6.0 * ric - (3.0 * t0 - 2.0) * rg)
        record("ricci-lower", m, j)
        m, j = pencil_min(3.0 * (2.0 - t0) * rg - 6.0 * ric)
        record("ricci-upper", m, j)
        # positivity is measured against the background pencil here
        a_t = SymTensor2Field(grid, bt.schouten_generalized(t0))
        s2 = sigma_field(a_t, g, 2)
        j = int(np.argmin(s2))
        record("sigma2-positive", float(s2.flat[j]), j)
    else:
        m, j = pencil_min(2.0 * ric - (t0 - 1.0) * rg)
        record("ricci-lower", m, j)
        m, j = pencil_min((2.0 - t0) * rg - 2.0 * ric)
        record("ricci-upper", m, j)
        j = int(np.argmin(bt.scal))
        record("scalar-positive", float(bt.scal.flat[j]), j)
        a_t = SymTensor2Field(grid, bt.schouten_generalized(t0))
        s2 = sigma_field(a_t, rebuilt, 2)
        margin_field = s2 - (state.alpha / 16.0) * bt.weyl_norm2
        j = int(np.argmin(margin_field))
        record("sigma2-weyl", float(margin_field.flat[j]), j)

    if bt.boundary is not None:
        h_max = float(np.max(np.abs(bt.boundary.mean_curvature)))
        l_max = float(np.max(np.abs(bt.boundary.second_form.comps)))
        checks["boundary-mean"] = {"min_margin": 1e-5 - h_max,
                                   "worst_node": int(np.argmax(np.abs(bt.boundary.mean_curvature))),
                                   "satisfied": bool(h_max <= 1e-5)}
        checks["boundary-geodesic"] = {"min_margin": 1e-5 - l_max,
                                       "worst_node": int(np.argmax(np.abs(bt.boundary.second_form.comps))),
                                       "satisfied": bool(l_max <= 1e-5)}

    passed = all(c["satisfied"] for c in checks.values())
    if strict and not passed:
        for name, c in checks.items():
            if not c["satisfied"]:
                raise ValueError(
                    f"conclusion {name!r} violated: margin {c['min_margin']:.6g} "
                    f"at node {c['worst_node']}")
    return {"passed": passed, "t": t0, "checks": checks}
