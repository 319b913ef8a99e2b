"""Built-in metrics on gridded charts.

Round spheres and hemispheres in dimensions 3 and 4, flat tori, and a
conformally radial deformation e^{2 w(theta)} g_round with w a polynomial
in cos(theta).

Chart conventions:
  sphere4 family: (theta, eta, xi1, xi2),
      g = r^2 diag(1, sin^2 th, sin^2 th cos^2 eta, sin^2 th sin^2 eta)
  sphere3 family: (theta, chi, phi),
      g = r^2 diag(1, sin^2 th, sin^2 th sin^2 chi)
  torus family:   n periodic axes of length 2 pi, g = r^2 I

Hemispheres use theta in (0, pi/2) with the boundary face at the equator;
the theta = 0 end is a pole. Pole closures encode the exact through-pole
continuation of each chart (see the table in each builder): this is what
makes finite differences of arbitrary smooth fields exact-order near the
singular axes, not just of rotation-invariant ones.
"""
from __future__ import annotations

import numpy as np

from .grid import (Axis, ChartGrid, Closure, MetricField, ScalarField,
                   SymTensor2Field, sym_index)

PI_EXT = np.longdouble("3.14159265358979323846264338327950288419716939937510")


def _extended_coords(grid: ChartGrid) -> tuple[np.ndarray, ...]:
    """Long-double open-mesh coordinates with spans rebuilt from pi.

    Pole and period closures identify ghost samples with interior ones;
    those identities only hold to the precision of the node positions,
    so the extended samples need nodes consistent with the true span.
    """
    out = []
    for k, ax in enumerate(grid.axes):
        frac = np.longdouble(round(2.0 * (ax.b - ax.a) / float(np.pi)) / 2.0)
        h = PI_EXT * frac / ax.n
        idx = np.arange(ax.n, dtype=np.longdouble)
        nodes = h * idx if ax.kind == "periodic" else h * (idx + np.longdouble(0.5))
        shp = [1] * grid.dim
        shp[k] = ax.n
        out.append(nodes.reshape(shp))
    return tuple(out)

DEFAULT_FIBER_CIRCLE = 8

_ENTRIES = {
    # name: (family, dim, hemisphere, euler characteristic)
    "round-sphere4": ("sphere4", 4, False, 2),
    "hemisphere4": ("sphere4", 4, True, 1),
    "round-sphere3": ("sphere3", 3, False, 0),
    "hemisphere3": ("sphere3", 3, True, 1),
    "flat-torus3": ("torus", 3, False, 0),
    "flat-torus4": ("torus", 4, False, 0),
}


def manifold_names() -> tuple[str, ...]:
    return tuple(_ENTRIES)


def describe(name: str) -> dict:
    if name not in _ENTRIES:
        raise ValueError(
            f"unknown manifold {name!r}; choose one of {', '.join(_ENTRIES)}"
        )
    family, dim, hemi, chi = _ENTRIES[name]
    return {"family": family, "dim": dim, "has_boundary": hemi, "chi": chi}


def make_grid(name: str, n: int, fiber_n: int = DEFAULT_FIBER_CIRCLE,
              fiber_polar_n: int | None = None) -> ChartGrid:
    info = describe(name)
    family = info["family"]
    hemi = info["has_boundary"]
    if family == "torus":
        axes = [Axis(f"x{i + 1}", 0.0, 2.0 * np.pi, n, "periodic") for i in range(info["dim"])]
        return ChartGrid(axes, {}, chart_kind="torus", metadata={"manifold": name})
    mp = fiber_polar_n if fiber_polar_n is not None else 2 * n
    theta = (
        Axis("theta", 0.0, np.pi / 2, n, "bounded")
        if hemi
        else Axis("theta", 0.0, np.pi, n, "pole")
    )
    if family == "sphere4":
        # fiber axes keep few nodes, so they use trig stencils: exact on
        # the angular metric factors, no truncation penalty at low count
        axes = [
            theta,
            Axis("eta", 0.0, np.pi / 2, mp, "pole", "trig"),
            Axis("xi1", 0.0, 2.0 * np.pi, fiber_n, "periodic", "trig"),
            Axis("xi2", 0.0, 2.0 * np.pi, fiber_n, "periodic", "trig"),
        ]
        # through-pole continuations: theta reverses its frame and shifts
        # both fiber circles half a period; each eta end shifts the circle
        # that stays regular there.
        th_cl = Closure(ops=(("roll", 2), ("roll", 3)), signs=(-1, 1, 1, 1))
        closures = {
            (0, 0): th_cl,
            (1, 0): Closure(ops=(("roll", 3),), signs=(1, -1, 1, 1)),
            (1, 1): Closure(ops=(("roll", 2),), signs=(1, -1, 1, 1)),
        }
        if not hemi:
            closures[(0, 1)] = th_cl
        return ChartGrid(axes, closures, chart_kind="sphere4", metadata={"manifold": name})
    # sphere3
    axes = [
        theta,
        Axis("chi", 0.0, np.pi, mp, "pole", "trig"),
        Axis("phi", 0.0, 2.0 * np.pi, fiber_n, "periodic", "trig"),
    ]
    th_cl = Closure(ops=(("flip", 1), ("roll", 2)), signs=(-1, -1, 1))
    chi_cl = Closure(ops=(("roll", 2),), signs=(1, -1, 1))
    closures = {(0, 0): th_cl, (1, 0): chi_cl, (1, 1): chi_cl}
    if not hemi:
        closures[(0, 1)] = th_cl
    return ChartGrid(axes, closures, chart_kind="sphere3", metadata={"manifold": name})


def radial_profile(coeffs, theta: np.ndarray) -> np.ndarray:
    """w(theta) = sum_k c_k cos^k(theta)."""
    w = np.zeros_like(theta, dtype=np.float64)
    c = np.cos(theta)
    for k, ck in enumerate(coeffs):
        if ck != 0.0:
            w = w + float(ck) * c**k
    return w


def radial_profile_derivatives(coeffs, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """w, w', w'' with respect to theta (closed form)."""
    ct, st = np.cos(theta), np.sin(theta)
    w = np.zeros_like(theta)
    dw_dc = np.zeros_like(theta)   # dw / d(cos th)
    d2w_dc = np.zeros_like(theta)
    for k, ck in enumerate(coeffs):
        ck = float(ck)
        if ck == 0.0:
            continue
        w += ck * ct**k
        if k >= 1:
            dw_dc += ck * k * ct ** (k - 1)
        if k >= 2:
            d2w_dc += ck * k * (k - 1) * ct ** (k - 2)
    wp = -st * dw_dc
    wpp = -ct * dw_dc + st * st * d2w_dc
    return w, wp, wpp


def make_metric(name: str, n: int, radius: float = 1.0,
                fiber_n: int = DEFAULT_FIBER_CIRCLE,
                fiber_polar_n: int | None = None,
                perturb=None) -> MetricField:
    """Catalog metric on its chart grid.

    perturb: optional cos-polynomial coefficients; any nonzero entry wraps
    the round metric as e^{2w(theta)} g. On a hemisphere the face stays
    minimal iff the linear coefficient vanishes; builders do not enforce
    that, diagnostics report it.
    """
    info = describe(name)
    if radius <= 0:
        raise ValueError("radius must be positive")
    grid = make_grid(name, n, fiber_n, fiber_polar_n)
    r2 = np.longdouble(float(radius)) ** 2
    family = info["family"]
    dim = info["dim"]
    # components are evaluated in long double at long-double node
    # positions; the jet builder reads this copy so curvature near
    # chart poles is not limited by double-rounded samples
    coords = _extended_coords(grid)
    if family == "torus":
        diag = [np.full(grid.shape, r2, dtype=np.longdouble) for _ in range(dim)]
    elif family == "sphere4":
        th, et = coords[0], coords[1]
        s2 = np.sin(th) ** 2
        diag = [
            r2 * np.ones_like(th),
            r2 * s2,
            r2 * s2 * np.cos(et) ** 2,
            r2 * s2 * np.sin(et) ** 2,
        ]
    else:
        th, ch = coords[0], coords[1]
        s2 = np.sin(th) ** 2
        diag = [
            r2 * np.ones_like(th),
            r2 * s2,
            r2 * s2 * np.sin(ch) ** 2,
        ]
    params = {"radius": float(radius)}
    catalog_id = name
    coeffs = list(perturb) if perturb is not None else []
    if any(c != 0.0 for c in coeffs):
        if family == "torus":
            raise ValueError("conformal-radial perturbation applies to sphere charts only")
        factor = np.exp(2.0 * radial_profile(coeffs, coords[0]))
        diag = [d * factor for d in diag]
        catalog_id = f"conformal-radial:{name}"
        params["perturb"] = [float(c) for c in coeffs]
    table = sym_index(dim)
    comps_ext = np.zeros(grid.shape + (dim * (dim + 1) // 2,), dtype=np.longdouble)
    for i, vals in enumerate(diag):
        comps_ext[..., table[i, i]] = np.broadcast_to(vals, grid.shape)
    tensor = SymTensor2Field(grid, comps_ext.astype(np.float64))
    return MetricField(tensor, catalog_id, params, info["chi"], comps_extended=comps_ext)


def ambient_coordinates(grid: ChartGrid) -> list[np.ndarray]:
    """Euclidean embedding coordinates of the round chart, broadcastable.

    Smooth global functions on the manifold: polynomials in them are
    exactly smooth across every pole and seam, which makes them the right
    raw material for differentiation tests and random fields.
    """
    kind = grid.chart_kind
    if kind.startswith("sphere4"):
        th, et, x1, x2 = grid.coord_arrays()
        return [
            np.sin(th) * np.cos(et) * np.cos(x1),
            np.sin(th) * np.cos(et) * np.sin(x1),
            np.sin(th) * np.sin(et) * np.cos(x2),
            np.sin(th) * np.sin(et) * np.sin(x2),
            np.cos(th) * np.ones_like(et + x1 + x2),
        ]
    if kind.startswith("sphere3"):
        th, ch, ph = grid.coord_arrays()
        return [
            np.sin(th) * np.sin(ch) * np.cos(ph),
            np.sin(th) * np.sin(ch) * np.sin(ph),
            np.sin(th) * np.cos(ch) * np.ones_like(ph),
            np.cos(th) * np.ones_like(ch + ph),
        ]
    if kind.startswith("torus"):
        out = []
        for c in grid.coord_arrays():
            out.append(np.cos(c))
            out.append(np.sin(c))
        return out
    raise ValueError(f"no ambient coordinates for chart kind {kind!r}")


def random_ambient_polynomial(grid: ChartGrid, rng: np.random.Generator,
                              degree: int = 2, scale: float = 1.0) -> ScalarField:
    """Random smooth scalar: low-degree polynomial in the ambient coords."""
    coords = [np.broadcast_to(c, grid.shape) for c in ambient_coordinates(grid)]
    vals = np.full(grid.shape, rng.normal() * scale)
    for i, ci in enumerate(coords):
        vals = vals + rng.normal() * scale * ci
    if degree >= 2:
        for i, ci in enumerate(coords):
            for cj in coords[i:]:
                vals = vals + rng.normal() * scale * ci * cj
    return ScalarField(grid, vals)


def radial_cosine_field(grid: ChartGrid, k: int) -> ScalarField:
    """cos(2k theta): smooth on the sphere charts, zero normal derivative
    at an equatorial face."""
    th = grid.coord_arrays()[0]
    return ScalarField(grid, np.broadcast_to(np.cos(2 * k * th), grid.shape).copy())


def conformal_radial_field(grid: ChartGrid, coeffs) -> ScalarField:
    th = grid.coord_arrays()[0]
    return ScalarField(grid, np.broadcast_to(radial_profile(coeffs, th), grid.shape).copy())
