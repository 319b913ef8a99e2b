"""Pinching-hypothesis diagnostics with explicit margins.

Each diagnostic compares a curvature quantity against its critical
threshold and reports the raw sides, the signed margin, and a strict
flag (satisfied iff margin > 0). Conditions that cannot be evaluated,
such as the weak-pinching ratio on a scalar-flat metric, become error
records instead of raising out of a batch report.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import serialize
from .conformal import invariants
from .curvature import CurvatureBundle, compute_curvature
from .grid import MetricField, ScalarField, integrate_volume

WP_THRESHOLD = 1.0 / 6.0

YAMABE_USER = "user-supplied"
YAMABE_PROXY = "upper-bound proxy"

# Conditions keyed by the dimensions they apply to. Weak pinching is
# attempted in both dimensions (the ratio is defined whenever R > 0);
# the integral conditions split by the dimension of their source
# inequality.
_CONDITION_DIMS = {
    "margerin-wp": (3, 4),
    "cgy-integral": (4,),
    "cgy-kappa": (4,),
    "kappa-weyl-gap": (4,),
    "kappa-yamabe": (4,),
    "mu-threshold": (4,),
    "catino-djadli": (3,),
    "sigma2-integral": (3,),
    "yamabe-slack": (3,),
}


@dataclass
class PinchCondition:
    """One evaluated hypothesis; satisfied is exactly margin > 0."""

    name: str
    lhs: float
    rhs: float
    margin: float
    satisfied: bool
    error: str | None = None

    @classmethod
    def evaluated(cls, name: str, lhs: float, rhs: float, margin: float) -> "PinchCondition":
        return cls(name, float(lhs), float(rhs), float(margin), bool(margin > 0.0))

    @classmethod
    def failed(cls, name: str, message: str) -> "PinchCondition":
        return cls(name, float("nan"), float("nan"), float("nan"), False, message)

    def to_row(self) -> dict:
        if self.error is not None:
            return {"name": self.name, "error": self.error}
        return {
            "name": self.name,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "margin": self.margin,
            "satisfied": self.satisfied,
        }


@dataclass
class PinchReport:
    """Batch of pinching conditions for one metric.

    yamabe_source records whether the quotient entering the Yamabe-weighted
    conditions was supplied by the caller or computed from the metric; the
    computed quotient of a non-minimizing metric only bounds the conformal
    invariant from above, so margins built from it lean conservative for
    conditions where the quotient enters with positive sign.
    """

    dimension: int
    conditions: list[PinchCondition] = field(default_factory=list)
    yamabe: float = 0.0
    yamabe_source: str = YAMABE_PROXY
    t_exponent: float = 0.0
    alpha: float = 0.0

    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.conditions)

    def __getitem__(self, name: str) -> PinchCondition:
        for c in self.conditions:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_rows(self) -> list[dict]:
        return [c.to_row() for c in self.conditions]

    def to_json(self, indent: int = 0) -> str:
        return serialize.dumps(self.to_rows(), indent=indent)


def margerin_wp(g: MetricField, bundle: CurvatureBundle | None = None) -> tuple[ScalarField, float]:
    """Pointwise weak-pinching ratio (|W|^2 + 2|E|^2) / R^2 and its max.

    Raises ValueError when the scalar curvature is not strictly positive,
    naming the worst node.
    """
    b = bundle if bundle is not None else compute_curvature(g)
    worst = int(np.argmin(b.scal))
    worst_val = float(b.scal.flat[worst])
    if worst_val <= 0.0:
        idx = np.unravel_index(worst, b.scal.shape)
        raise ValueError(
            "weak pinching ratio needs R > 0 everywhere; "
            f"min R = {worst_val:.6g} at node {tuple(int(i) for i in idx)}"
        )
    ratio = (b.weyl_norm2 + 2.0 * b.e_norm2()) / b.scal**2
    return ScalarField(g.grid, ratio), float(np.max(ratio))


def _default_exponent(n: int) -> float:
    return 2.0 / 3.0 if n == 3 else 1.0


def diagnose(
    g: MetricField,
    yamabe: float | None = None,
    t: float | None = None,
    alpha: float = 1.0,
    bundle: CurvatureBundle | None = None,
    conditions: list[str] | None = None,
) -> PinchReport:
    """Evaluate every applicable pinching condition for the metric.

    yamabe: conformal quotient to use where the conditions need one; when
    omitted it is computed from g and flagged as an upper-bound proxy.
    t: path exponent entering the slack terms (defaults to the endpoint
    value for the dimension: 2/3 in n=3, 1 in n=4).
    alpha: Weyl coupling weight in [0, 1], n=4 only.
    conditions: restrict to these names; a name outside the metric's
    dimension raises ValueError.
    """
    n = g.grid.dim
    if n not in (3, 4):
        raise ValueError(f"pinching conditions are defined for n = 3, 4, got n = {n}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    t_val = _default_exponent(n) if t is None else float(t)

    applicable = [name for name, dims in _CONDITION_DIMS.items() if n in dims]
    if conditions is None:
        wanted = applicable
    else:
        for name in conditions:
            if name not in _CONDITION_DIMS:
                raise ValueError(
                    f"unknown condition {name!r}; choose from {', '.join(_CONDITION_DIMS)}"
                )
            if n not in _CONDITION_DIMS[name]:
                raise ValueError(f"condition {name!r} does not apply in dimension {n}")
        wanted = [name for name in applicable if name in conditions]

    b = bundle if bundle is not None else compute_curvature(g)
    inv = invariants(g, bundle=b)
    if yamabe is None:
        y = inv.yamabe_quotient
        y_source = YAMABE_PROXY
    else:
        y = float(yamabe)
        y_source = YAMABE_USER

    report = PinchReport(
        dimension=n, yamabe=y, yamabe_source=y_source, t_exponent=t_val, alpha=alpha
    )
    rows = report.conditions

    if "margerin-wp" in wanted:
        try:
            _, wp_max = margerin_wp(g, bundle=b)
            rows.append(
                PinchCondition.evaluated(
                    "margerin-wp", wp_max, WP_THRESHOLD, WP_THRESHOLD - wp_max
                )
            )
        except ValueError as exc:
            rows.append(PinchCondition.failed("margerin-wp", str(exc)))

    if n == 4:
        weyl2 = integrate_volume(b.weyl_norm2, g)
        kappa = inv.kappa_total if inv.kappa_total is not None else 0.0
        if "cgy-integral" in wanted:
            # negative total excess of (|W|^2 + 2|E|^2) over R^2/6
            excess = integrate_volume(
                b.weyl_norm2 + 2.0 * b.e_norm2() - b.scal**2 / 6.0, g
            )
            rows.append(PinchCondition.evaluated("cgy-integral", excess, 0.0, -excess))
        if "cgy-kappa" in wanted:
            rows.append(
                PinchCondition.evaluated(
                    "cgy-kappa", kappa, weyl2 / 8.0, kappa - weyl2 / 8.0
                )
            )
        if "kappa-weyl-gap" in wanted:
            # same comparison as cgy-kappa, restated for charts with
            # boundary where the total includes the boundary integral
            rows.append(
                PinchCondition.evaluated(
                    "kappa-weyl-gap", kappa, weyl2 / 8.0, kappa - weyl2 / 8.0
                )
            )
        if "kappa-yamabe" in wanted:
            lhs = kappa + y * y / 6.0
            rows.append(PinchCondition.evaluated("kappa-yamabe", lhs, 0.0, lhs))
        if "mu-threshold" in wanted:
            mu = (
                0.5 * kappa
                - (alpha / 16.0) * weyl2
                + (1.0 - t_val) * (2.0 - t_val) * y * y / 24.0
            )
            rows.append(PinchCondition.evaluated("mu-threshold", mu, 0.0, mu))
    else:
        if "catino-djadli" in wanted:
            ric2 = integrate_volume(b.ric_norm2(), g)
            bound = 0.375 * integrate_volume(b.scal**2, g)
            rows.append(
                PinchCondition.evaluated("catino-djadli", ric2, bound, bound - ric2)
            )
        if "sigma2-integral" in wanted:
            s2 = integrate_volume(b.sigma2_schouten(), g)
            rows.append(PinchCondition.evaluated("sigma2-integral", s2, 0.0, s2))
        if "yamabe-slack" in wanted:
            # slack weight multiplying the unknown curvature-dependent
            # constant; reported raw so the user can supply that constant
            slack = (0.7 - t_val) * y * y
            rows.append(PinchCondition.evaluated("yamabe-slack", slack, 0.0, slack))

    return report
