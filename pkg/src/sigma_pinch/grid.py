"""Chart grids, sampled fields, finite differences, and quadrature.

Axes are uniform. Polar and bounded axes are cell-centered so no node sits
on a coordinate singularity or on the boundary face itself; periodic axes
start at the interval origin. Derivatives use 11-point stencils everywhere:
centered in the interior, one-sided at a boundary face, and closed across
poles / periodic seams by ghost layers.

Pole ghosts are exact, not an approximation: continuing a chart through a
pole lands back in the chart at a mapped fiber point (half-period shifts of
periodic angles, a flip of the second polar angle), with per-axis frame
signs for tensor components. Each grid carries those maps per axis end.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from . import backend

STENCIL_WIDTH = 11
STENCIL_HALF = STENCIL_WIDTH // 2
MIN_AXIS_NODES = 8

AXIS_KINDS = ("periodic", "pole", "bounded")


def fornberg_weights(z: float, nodes: np.ndarray, max_order: int) -> np.ndarray:
    """Finite-difference weights at point z for derivatives 0..max_order.

    Classic recursive algorithm; rows index the nodes, columns the
    derivative order.
    """
    x = np.asarray(nodes, dtype=np.float64)
    n = len(x)
    if max_order >= n:
        raise ValueError("need more nodes than derivative order")
    c = np.zeros((n, max_order + 1))
    c1 = 1.0
    c4 = x[0] - z
    c[0, 0] = 1.0
    for i in range(1, n):
        mn = min(i, max_order)
        c2 = 1.0
        c5 = c4
        c4 = x[i] - z
        for j in range(i):
            c3 = x[i] - x[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    c[i, k] = c1 * (k * c[i - 1, k - 1] - c5 * c[i - 1, k]) / c2
                c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for k in range(mn, 0, -1):
                c[j, k] = (c4 * c[j, k] - k * c[j, k - 1]) / c3
            c[j, 0] = c4 * c[j, 0] / c3
        c1 = c2
    return c


def trig_weights(h: float, order: int) -> np.ndarray:
    """Centered stencil weights exact on trig polynomials of degree <= 5.

    Derivative weights of the 11-node trigonometric cardinal functions
    l_j(x) = prod_{i != j} sin((x-x_i)/2)/sin((x_j-x_i)/2), evaluated at
    the center node.  Angular metric factors are low-degree trig
    polynomials, so these stencils differentiate them with no truncation
    term at all; for general smooth data they match the order of the
    same-width polynomial stencil.
    """
    if order not in (1, 2):
        raise ValueError("derivative order must be 1 or 2")
    half = STENCIL_HALF
    hd = np.longdouble(h)
    offs = hd * np.arange(-half, half + 1, dtype=np.longdouble)
    c = half  # center index
    w = np.zeros(STENCIL_WIDTH, dtype=np.longdouble)
    for j in range(STENCIL_WIDTH):
        if j == c:
            continue
        # ratio of sine products stays O(1/h); accumulate factor by factor
        r = np.longdouble(1.0)
        for i in range(STENCIL_WIDTH):
            if i == j:
                continue
            denom = np.sin((offs[j] - offs[i]) / 2)
            if i != c:
                r *= np.sin(-offs[i] / 2) / denom
            else:
                r /= denom
        d1 = r / 2
        if order == 1:
            w[j] = d1
        else:
            cot_sum = np.longdouble(0.0)
            for i in range(STENCIL_WIDTH):
                if i in (j, c):
                    continue
                t = -offs[i] / 2
                cot_sum += np.cos(t) / np.sin(t)
            w[j] = d1 * cot_sum
    if order == 1:
        w[c] = 0.0
    else:
        s = np.longdouble(0.0)
        for i in range(STENCIL_WIDTH):
            if i == c:
                continue
            t = offs[i] / 2
            s += 1.0 / np.sin(t) ** 2
        w[c] = -s / 4
    return _zero_sum_fix(w.astype(np.float64), order)


def fourier_diff_matrix(n: int, span: float, order: int) -> np.ndarray:
    """Full-period spectral differentiation matrix on n equispaced nodes.

    Used for periodic trig axes, where a windowed stencil would place
    node pairs a whole period apart (singular cardinal denominators).
    """
    if order not in (1, 2):
        raise ValueError("derivative order must be 1 or 2")
    if n % 2 != 0:
        raise ValueError("even node count required")
    scale = 2.0 * np.pi / np.longdouble(span)
    h = 2.0 * np.pi / np.longdouble(n)
    k = np.arange(1, n, dtype=np.longdouble)
    sign = np.where(np.arange(1, n) % 2 == 0, -1.0, 1.0).astype(np.longdouble)
    if order == 1:
        row = np.concatenate(([np.longdouble(0.0)],
                              0.5 * sign / np.tan(k * h / 2))) * scale
    else:
        row = np.concatenate(([-np.longdouble(n * n) / 12 - np.longdouble(1) / 6],
                              0.5 * sign / np.sin(k * h / 2) ** 2)) * scale ** 2
    # circulant: W[i, j] = row[(j - i) mod n]
    idx = (np.arange(n)[None, :] - np.arange(n)[:, None]) % n
    W = row[idx]
    out = W.astype(np.float64)
    for i in range(n):
        out[i, np.argmax(np.abs(out[i]))] -= out[i].sum()
    return out


def _zero_sum_fix(weights: np.ndarray, order: int) -> np.ndarray:
    """Force derivative stencils to annihilate constants exactly.

    The analytic weights sum to zero; subtracting the tiny float residue
    from the largest-magnitude weight makes D(const) = 0 in exact float
    arithmetic, which downstream operators rely on (kernels of assembled
    matrices, zero-mean checks).
    """
    if order == 0:
        return weights
    w = weights.copy()
    w[np.argmax(np.abs(w))] -= w.sum()
    return w


def sym_pairs(n: int) -> tuple[tuple[int, int], ...]:
    return tuple((i, j) for i in range(n) for j in range(i, n))


@lru_cache(maxsize=None)
def sym_index(n: int) -> np.ndarray:
    """(n, n) table mapping index pairs to packed component slots."""
    table = np.zeros((n, n), dtype=np.int64)
    for k, (i, j) in enumerate(sym_pairs(n)):
        table[i, j] = k
        table[j, i] = k
    return table


@dataclass(frozen=True)
class Axis:
    name: str
    a: float
    b: float
    n: int
    kind: str  # periodic | pole | bounded
    flavor: str = "poly"  # poly | trig stencil weights

    def __post_init__(self):
        if self.kind not in AXIS_KINDS:
            raise ValueError(f"axis {self.name}: unknown kind {self.kind!r}")
        if self.flavor not in ("poly", "trig"):
            raise ValueError(f"axis {self.name}: unknown flavor {self.flavor!r}")
        if self.flavor == "trig" and self.kind == "bounded":
            raise ValueError(f"axis {self.name}: trig stencils need a closed axis")
        if self.n < MIN_AXIS_NODES:
            raise ValueError(f"axis {self.name}: need at least {MIN_AXIS_NODES} nodes, got {self.n}")
        if self.kind == "periodic" and self.n % 2 != 0:
            raise ValueError(f"axis {self.name}: periodic axes need an even node count")
        if not self.b > self.a:
            raise ValueError(f"axis {self.name}: empty interval")

    @property
    def h(self) -> float:
        return (self.b - self.a) / self.n

    def nodes(self) -> np.ndarray:
        if self.kind == "periodic":
            return self.a + self.h * np.arange(self.n)
        return self.a + self.h * (np.arange(self.n) + 0.5)

    def to_dict(self) -> dict:
        return {"name": self.name, "a": self.a, "b": self.b, "n": self.n,
                "kind": self.kind, "flavor": self.flavor}


@dataclass(frozen=True)
class Closure:
    """How a chart continues across one pole end of one axis.

    ops are applied to ghost slices: ("roll", k) shifts grid axis k by half
    its period, ("flip", k) reverses it. signs[k] is the frame sign the k-th
    coordinate vector picks up under the continuation; tensor components
    multiply one sign per index.
    """
    ops: tuple[tuple[str, int], ...] = ()
    signs: tuple[int, ...] = ()


def _identity_closure(dim: int) -> Closure:
    return Closure(ops=(), signs=tuple(1 for _ in range(dim)) if dim else ())


class ChartGrid:
    def __init__(
        self,
        axes: Sequence[Axis],
        closures: dict[tuple[int, int], Closure] | None = None,
        chart_kind: str = "generic",
        metadata: dict | None = None,
    ):
        self.axes = tuple(axes)
        self.dim = len(self.axes)
        bounded = [k for k, ax in enumerate(self.axes) if ax.kind == "bounded"]
        if len(bounded) > 1:
            raise ValueError("at most one axis may carry the boundary face")
        self.boundary_axis: int | None = bounded[0] if bounded else None
        self.chart_kind = chart_kind
        self.metadata = dict(metadata or {})
        self.closures: dict[tuple[int, int], Closure] = {}
        closures = closures or {}
        for k, ax in enumerate(self.axes):
            if ax.kind == "periodic":
                continue
            ends = (0,) if ax.kind == "bounded" else (0, 1)
            for end in ends:
                cl = closures.get((k, end), _identity_closure(self.dim))
                if len(cl.signs) == 0:
                    cl = Closure(ops=cl.ops, signs=tuple(1 for _ in range(self.dim)))
                if len(cl.signs) != self.dim:
                    raise ValueError("closure sign vector length must match grid dimension")
                for op, target in cl.ops:
                    if op not in ("roll", "flip"):
                        raise ValueError(f"unknown closure op {op!r}")
                    if target == k:
                        raise ValueError("closure ops act on other axes only")
                self.closures[(k, end)] = cl
        self._diff_cache: dict = {}
        self._face_cache: dict = {}

    # ---- basic geometry ----
    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(ax.n for ax in self.axes)

    @property
    def node_count(self) -> int:
        return int(np.prod(self.shape))

    @property
    def cell_measure(self) -> float:
        return float(np.prod([ax.h for ax in self.axes]))

    def coord_arrays(self) -> tuple[np.ndarray, ...]:
        """Open-mesh coordinate arrays, broadcastable to self.shape."""
        out = []
        for k, ax in enumerate(self.axes):
            shp = [1] * self.dim
            shp[k] = ax.n
            out.append(ax.nodes().reshape(shp))
        return tuple(out)

    def closure(self, axis: int, end: int) -> Closure:
        return self.closures.get((axis, end), _identity_closure(self.dim))

    # ---- ghost construction ----
    def _ghost_block(self, values: np.ndarray, axis: int, end: int, comp_sign, neumann: bool) -> np.ndarray:
        """Five ghost layers beyond one end of an axis.

        comp_sign multiplies the block (per-component array broadcast over
        trailing dims, or scalar). neumann replaces the bounded-face closure
        with plain even reflection.
        """
        ax = self.axes[axis]
        h = STENCIL_HALF
        if ax.kind == "periodic":
            if end == 0:
                return np.take(values, range(ax.n - h, ax.n), axis=axis)
            return np.take(values, range(h), axis=axis)
        if ax.kind == "bounded" and end == 1:
            if not neumann:
                raise ValueError("bounded face has no default ghost layers")
            block = np.take(values, range(ax.n - h, ax.n), axis=axis)
            return np.flip(block, axis=axis)
        # pole end: even reflection composed with the through-pole fiber map
        if end == 0:
            block = np.take(values, range(h), axis=axis)
        else:
            block = np.take(values, range(ax.n - h, ax.n), axis=axis)
        block = np.flip(block, axis=axis)
        cl = self.closure(axis, end)
        for op, target in cl.ops:
            if op == "roll":
                block = np.roll(block, self.axes[target].n // 2, axis=target)
            else:
                block = np.flip(block, axis=target)
        if not (np.isscalar(comp_sign) and comp_sign == 1):
            block = block * comp_sign
        return block

    def pad(self, values: np.ndarray, axis: int, lo_sign=1, hi_sign=1, neumann: bool = False) -> np.ndarray:
        """values with ghost layers attached along one axis."""
        ax = self.axes[axis]
        blocks = [self._ghost_block(values, axis, 0, lo_sign, neumann), values]
        if ax.kind != "bounded" or neumann:
            blocks.append(self._ghost_block(values, axis, 1, hi_sign, neumann))
        return np.concatenate(blocks, axis=axis)

    # ---- differentiation matrices ----
    def _band_matrix(self, axis: int, order: int, neumann: bool) -> tuple[np.ndarray, int, int]:
        key = (axis, order, neumann)
        cached = self._diff_cache.get(key)
        if cached is not None:
            return cached
        ax = self.axes[axis]
        n, h = ax.n, ax.h
        pad_lo = STENCIL_HALF
        one_sided_tail = ax.kind == "bounded" and not neumann
        pad_hi = 0 if one_sided_tail else STENCIL_HALF
        D = np.zeros((n, n + pad_lo + pad_hi))
        if ax.flavor == "trig" and ax.kind == "periodic":
            # whole-period operator; ghost columns stay zero
            D[:, pad_lo : pad_lo + n] = fourier_diff_matrix(n, ax.b - ax.a, order)
            result = (D, pad_lo, pad_hi)
            self._diff_cache[key] = result
            return result
        if ax.flavor == "trig":
            w_center = trig_weights(h, order)
        else:
            offsets = h * np.arange(-STENCIL_HALF, STENCIL_HALF + 1)
            w_center = _zero_sum_fix(fornberg_weights(0.0, offsets, order)[:, order], order)
        nodes = ax.nodes()
        for i in range(n):
            if one_sided_tail and i >= n - STENCIL_HALF:
                sten = np.arange(n - STENCIL_WIDTH, n)
                w = _zero_sum_fix(fornberg_weights(nodes[i], nodes[sten], order)[:, order], order)
                D[i, sten + pad_lo] = w
            else:
                D[i, i : i + STENCIL_WIDTH] = w_center
        result = (D, pad_lo, pad_hi)
        self._diff_cache[key] = result
        return result

    def apply_diff(self, values: np.ndarray, axis: int, order: int,
                   lo_sign=1, hi_sign=1, neumann: bool = False,
                   extended: bool = False) -> np.ndarray:
        """Derivative of values along axis; trailing dims ride along.

        lo_sign / hi_sign multiply the ghost blocks (frame signs of the
        differentiated object's components under the pole continuation).

        extended=True contracts the stencil in long-double accumulation.
        Metric components can span many orders of magnitude near chart
        poles while curvature is hugely sensitive to their derivatives
        there, so plain double dot products leave visible noise.
        """
        if not 0 <= axis < self.dim:
            raise ValueError(f"axis {axis} out of range for dimension {self.dim}")
        if order not in (1, 2):
            raise ValueError("derivative order must be 1 or 2")
        if values.shape[: self.dim] != self.shape:
            raise ValueError("field shape does not match grid")
        D, pad_lo, pad_hi = self._band_matrix(axis, order, neumann)
        if extended:
            values = np.asarray(values, dtype=np.longdouble)
        else:
            values = np.asarray(values, dtype=np.float64)
        padded = self.pad(values, axis, lo_sign, hi_sign, neumann)
        moved = np.moveaxis(padded, axis, 0)
        if extended:
            key = ("ext", axis, order, neumann)
            De = self._diff_cache.get(key)
            if De is None:
                De = D.astype(np.longdouble)
                # row sums vanish only under double addition; re-zero them
                # so constants are annihilated in this precision as well
                for i in range(De.shape[0]):
                    De[i, np.argmax(np.abs(De[i]))] -= De[i].sum()
                self._diff_cache[key] = De
            out = np.tensordot(De, moved, axes=([1], [0]))
        else:
            out = np.tensordot(D, moved, axes=([1], [0]))
        return np.moveaxis(out, 0, axis)

    # ---- boundary face operators ----
    def _require_boundary(self) -> Axis:
        if self.boundary_axis is None:
            raise ValueError("grid has no boundary face")
        return self.axes[self.boundary_axis]

    def face_row(self, order: int) -> np.ndarray:
        """One-sided weights over the last 11 nodes: value (order 0) or
        derivative of the given order, evaluated at the face itself."""
        ax = self._require_boundary()
        key = ("face", order)
        if key not in self._face_cache:
            nodes = ax.nodes()[-STENCIL_WIDTH:]
            w = fornberg_weights(ax.b, nodes, order)[:, order]
            row = np.zeros(ax.n)
            row[-STENCIL_WIDTH:] = _zero_sum_fix(w, order)
            self._face_cache[key] = row
        return self._face_cache[key]

    def face_even_row(self) -> np.ndarray:
        """Face value of a field with zero normal derivative, via its even
        reflection: a folded symmetric interpolation, exact for even data."""
        ax = self._require_boundary()
        key = ("face_even",)
        if key not in self._face_cache:
            half = STENCIL_HALF
            h = ax.h
            pts = ax.b + h * (np.arange(-half, half) + 0.5)  # 10 symmetric points
            w = fornberg_weights(ax.b, pts, 0)[:, 0]
            row = np.zeros(ax.n)
            for j in range(half):
                row[ax.n - 1 - j] += w[half - 1 - j] + w[half + j]
            self._face_cache[key] = row
        return self._face_cache[key]

    def restrict_to_face(self, values: np.ndarray, even: bool = False) -> np.ndarray:
        """Interpolate a field onto the boundary face (drops the bounded axis)."""
        k = self.boundary_axis
        self._require_boundary()
        row = self.face_even_row() if even else self.face_row(0)
        moved = np.moveaxis(np.asarray(values, dtype=np.float64), k, 0)
        return np.tensordot(row, moved, axes=([0], [0]))

    def face_normal_derivative(self, values: np.ndarray) -> np.ndarray:
        """One-sided coordinate derivative along the bounded axis at the face."""
        k = self.boundary_axis
        self._require_boundary()
        row = self.face_row(1)
        moved = np.moveaxis(np.asarray(values, dtype=np.float64), k, 0)
        return np.tensordot(row, moved, axes=([0], [0]))

    def boundary_grid(self) -> "ChartGrid":
        """The induced (n-1)-grid on the boundary face."""
        k = self.boundary_axis
        self._require_boundary()
        keep = [i for i in range(self.dim) if i != k]
        remap = {old: new for new, old in enumerate(keep)}
        closures = {}
        for (axis, end), cl in self.closures.items():
            if axis == k:
                continue
            ops = tuple((op, remap[t]) for op, t in cl.ops if t != k)
            signs = tuple(cl.signs[i] for i in keep)
            closures[(remap[axis], end)] = Closure(ops=ops, signs=signs)
        sub = ChartGrid(
            [self.axes[i] for i in keep],
            closures,
            chart_kind=self.chart_kind + "-boundary",
            metadata=dict(self.metadata),
        )
        return sub

    # ---- radial (rotationally symmetric) operators ----
    def radial_matrices(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense (N, N) first/second-derivative matrices on axis 0 for
        radial fields, with even reflection folded in at both ends.

        Valid for fields constant along the other axes: the pole fiber maps
        act trivially on those, and the bounded face carries the Neumann
        condition exactly.
        """
        ax = self.axes[0]
        if ax.kind == "periodic":
            raise ValueError("radial axis must be polar or bounded")
        key = ("radial",)
        if key not in self._face_cache:
            n, h = ax.n, ax.h
            mats = []
            for order in (1, 2):
                offsets = h * np.arange(-STENCIL_HALF, STENCIL_HALF + 1)
                w = _zero_sum_fix(fornberg_weights(0.0, offsets, order)[:, order], order)
                D = np.zeros((n, n))
                for i in range(n):
                    for s, wt in zip(range(i - STENCIL_HALF, i + STENCIL_HALF + 1), w):
                        j = s
                        if j < 0:
                            j = -1 - j
                        if j >= n:
                            j = 2 * n - 1 - j
                        D[i, j] += wt
                mats.append(D)
            self._face_cache[key] = tuple(mats)
        return self._face_cache[key]

    # ---- serialization ----
    def to_dict(self) -> dict:
        return {
            "dimension": self.dim,
            "axes": [ax.to_dict() for ax in self.axes],
            "boundary_axis": self.boundary_axis,
            "chart_kind": self.chart_kind,
            "closures": [
                {
                    "axis": axis,
                    "end": end,
                    "ops": [[op, t] for op, t in cl.ops],
                    "signs": list(cl.signs),
                }
                for (axis, end), cl in sorted(self.closures.items())
            ],
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChartGrid":
        axes = [Axis(a["name"], float(a["a"]), float(a["b"]), int(a["n"]),
                     a["kind"], a.get("flavor", "poly")) for a in d["axes"]]
        closures = {}
        for c in d.get("closures", []):
            closures[(int(c["axis"]), int(c["end"]))] = Closure(
                ops=tuple((op, int(t)) for op, t in c.get("ops", [])),
                signs=tuple(int(s) for s in c.get("signs", [])),
            )
        return cls(axes, closures, d.get("chart_kind", "generic"), d.get("metadata"))

    def same_layout(self, other: "ChartGrid") -> bool:
        return self.shape == other.shape and all(
            a.name == b.name and a.kind == b.kind and np.isclose(a.a, b.a) and np.isclose(a.b, b.b)
            for a, b in zip(self.axes, other.axes)
        )


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------

class ScalarField:
    """One real value per node."""

    def __init__(self, grid: ChartGrid, values: np.ndarray):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != grid.shape:
            raise ValueError(f"scalar field shape {values.shape} != grid shape {grid.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("scalar field contains non-finite values")
        self.grid = grid
        self.values = values

    @classmethod
    def zeros(cls, grid: ChartGrid) -> "ScalarField":
        return cls(grid, np.zeros(grid.shape))

    @classmethod
    def full(cls, grid: ChartGrid, value: float) -> "ScalarField":
        return cls(grid, np.full(grid.shape, float(value)))

    @classmethod
    def from_function(cls, grid: ChartGrid, fn: Callable) -> "ScalarField":
        vals = np.broadcast_to(fn(*grid.coord_arrays()), grid.shape)
        return cls(grid, np.ascontiguousarray(vals, dtype=np.float64))

    def d(self, axis: int, order: int = 1) -> "ScalarField":
        return ScalarField(self.grid, self.grid.apply_diff(self.values, axis, order))

    def copy(self) -> "ScalarField":
        return ScalarField(self.grid, self.values.copy())


class SymTensor2Field:
    """Symmetric 2-tensor, packed upper-triangle components in the last dim."""

    def __init__(self, grid: ChartGrid, comps: np.ndarray):
        comps = np.asarray(comps, dtype=np.float64)
        m = grid.dim * (grid.dim + 1) // 2
        if comps.shape != grid.shape + (m,):
            raise ValueError(f"tensor comps shape {comps.shape} != {grid.shape + (m,)}")
        if not np.all(np.isfinite(comps)):
            raise ValueError("tensor field contains non-finite values")
        self.grid = grid
        self.comps = comps

    @property
    def ncomp(self) -> int:
        return self.comps.shape[-1]

    @classmethod
    def zeros(cls, grid: ChartGrid) -> "SymTensor2Field":
        m = grid.dim * (grid.dim + 1) // 2
        return cls(grid, np.zeros(grid.shape + (m,)))

    @classmethod
    def from_diagonal(cls, grid: ChartGrid, diag_fns: Sequence) -> "SymTensor2Field":
        """Build from per-axis diagonal entries (callables of coords or arrays)."""
        n = grid.dim
        out = cls.zeros(grid)
        table = sym_index(n)
        coords = grid.coord_arrays()
        for i, fn in enumerate(diag_fns):
            vals = fn(*coords) if callable(fn) else fn
            out.comps[..., table[i, i]] = np.broadcast_to(vals, grid.shape)
        return out

    def unpack(self) -> np.ndarray:
        """Full (..., n, n) symmetric matrix view (copy)."""
        n = self.grid.dim
        out = np.empty(self.grid.shape + (n, n))
        for k, (i, j) in enumerate(sym_pairs(n)):
            out[..., i, j] = self.comps[..., k]
            out[..., j, i] = self.comps[..., k]
        return out

    @classmethod
    def pack(cls, grid: ChartGrid, full: np.ndarray) -> "SymTensor2Field":
        n = grid.dim
        m = n * (n + 1) // 2
        comps = np.empty(grid.shape + (m,))
        for k, (i, j) in enumerate(sym_pairs(n)):
            comps[..., k] = 0.5 * (full[..., i, j] + full[..., j, i])
        return cls(grid, comps)

    def component(self, i: int, j: int) -> np.ndarray:
        return self.comps[..., sym_index(self.grid.dim)[i, j]]

    def d(self, axis: int, order: int = 1, extended: bool = False) -> "SymTensor2Field":
        """Componentwise derivative with the pole frame signs applied."""
        grid = self.grid
        pairs = sym_pairs(grid.dim)
        lo = grid.closure(axis, 0).signs
        hi = grid.closure(axis, 1).signs
        lo_sign = np.array([lo[i] * lo[j] for i, j in pairs], dtype=np.float64) if lo else 1
        hi_sign = np.array([hi[i] * hi[j] for i, j in pairs], dtype=np.float64) if hi else 1
        out = grid.apply_diff(self.comps, axis, order, lo_sign=lo_sign, hi_sign=hi_sign,
                              extended=extended)
        return SymTensor2Field(grid, out)


def differentiate(field, axis: int, order: int):
    """Finite-difference derivative of a scalar or symmetric-tensor field."""
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    return field.d(axis, order)


class MetricField:
    """A positive-definite SymTensor2Field plus catalog provenance."""

    MIN_EIGENVALUE = 1e-10

    def __init__(self, tensor: SymTensor2Field, catalog_id: str = "derived",
                 params: dict | None = None, euler_characteristic: int | None = None,
                 comps_extended: np.ndarray | None = None):
        self.tensor = tensor
        self.catalog_id = catalog_id
        self.params = dict(params or {})
        self.euler_characteristic = euler_characteristic
        # optional long-double copy of the packed components; read by the
        # jet builder so stencils see more than double-rounded samples
        self.comps_extended = comps_extended
        self._det: np.ndarray | None = None
        self._inv: SymTensor2Field | None = None

    @property
    def grid(self) -> ChartGrid:
        return self.tensor.grid

    @property
    def dim(self) -> int:
        return self.grid.dim

    def check_positive_definite(self) -> float:
        """Smallest metric eigenvalue over all nodes; raises if degenerate."""
        full = self.tensor.unpack().reshape(-1, self.dim, self.dim)
        eigs = np.linalg.eigvalsh(full)
        smallest = float(eigs[:, 0].min())
        if smallest <= self.MIN_EIGENVALUE:
            worst = int(np.argmin(eigs[:, 0]))
            raise ValueError(
                f"metric not positive definite: min eigenvalue {smallest:.3e} "
                f"at flat node {worst}"
            )
        return smallest

    def det(self) -> np.ndarray:
        if self._det is None:
            full = self.tensor.unpack()
            self._det = np.linalg.det(full)
        return self._det

    def sqrt_det(self) -> np.ndarray:
        return np.sqrt(self.det())

    def inverse(self) -> SymTensor2Field:
        if self._inv is None:
            full = self.tensor.unpack()
            self._inv = SymTensor2Field.pack(self.grid, np.linalg.inv(full))
        return self._inv

    def boundary_sqrt_det(self) -> np.ndarray:
        """sqrt(det) of the induced metric on the boundary face."""
        grid = self.grid
        k = grid.boundary_axis
        if k is None:
            raise ValueError("metric has no boundary")
        keep = [i for i in range(grid.dim) if i != k]
        face_full = grid.restrict_to_face(self.tensor.unpack())
        induced = face_full[..., keep, :][..., :, keep]
        return np.sqrt(np.linalg.det(induced))


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------

def integrate_volume(s, g: MetricField) -> float:
    """Integral of a scalar over the chart with the metric volume element.

    Summation is a fixed-order fold over nodes in row-major order, so
    results are bit-reproducible for a fixed backend.
    """
    values = s.values if isinstance(s, ScalarField) else np.asarray(s, dtype=np.float64)
    if values.shape != g.grid.shape:
        raise ValueError("field and metric live on different grids")
    w = values * g.sqrt_det() * g.grid.cell_measure
    return backend.fold_sum(np.ascontiguousarray(w).ravel(order="C"))


def integrate_boundary(s_face, g: MetricField) -> float:
    """Integral over the boundary face with the induced area element."""
    grid = g.grid
    if grid.boundary_axis is None:
        raise ValueError("metric has no boundary to integrate over")
    k = grid.boundary_axis
    face_shape = tuple(ax.n for i, ax in enumerate(grid.axes) if i != k)
    values = s_face.values if isinstance(s_face, ScalarField) else np.asarray(s_face, dtype=np.float64)
    if values.shape != face_shape:
        raise ValueError("boundary field shape does not match the face grid")
    area_h = float(np.prod([ax.h for i, ax in enumerate(grid.axes) if i != k]))
    w = values * g.boundary_sqrt_det() * area_h
    return backend.fold_sum(np.ascontiguousarray(w).ravel(order="C"))


# ---------------------------------------------------------------------------
# snapshots
# ---------------------------------------------------------------------------

def field_to_snapshot(obj) -> dict:
    """Field snapshot document: grid description plus row-major components."""
    if isinstance(obj, ScalarField):
        grid, kind = obj.grid, "scalar"
        comps = [obj.values.ravel(order="C").tolist()]
    elif isinstance(obj, MetricField):
        grid, kind = obj.grid, "metric"
        comps = [obj.tensor.comps[..., k].ravel(order="C").tolist() for k in range(obj.tensor.ncomp)]
    elif isinstance(obj, SymTensor2Field):
        grid, kind = obj.grid, "sym2"
        comps = [obj.comps[..., k].ravel(order="C").tolist() for k in range(obj.ncomp)]
    else:
        raise TypeError(f"cannot snapshot {type(obj)}")
    doc = {"grid": grid.to_dict(), "kind": kind, "components": comps}
    if isinstance(obj, MetricField):
        doc["catalog"] = {
            "id": obj.catalog_id,
            "params": obj.params,
            "euler_characteristic": obj.euler_characteristic,
        }
    return doc


def snapshot_to_field(doc: dict):
    grid = ChartGrid.from_dict(doc["grid"])
    comps = doc["components"]
    kind = doc.get("kind", "scalar" if len(comps) == 1 else "sym2")
    if kind == "scalar":
        return ScalarField(grid, np.array(comps[0], dtype=np.float64).reshape(grid.shape))
    m = grid.dim * (grid.dim + 1) // 2
    if len(comps) != m:
        raise ValueError(f"expected {m} tensor components, got {len(comps)}")
    packed = np.stack(
        [np.array(c, dtype=np.float64).reshape(grid.shape) for c in comps], axis=-1
    )
    tensor = SymTensor2Field(grid, packed)
    if kind == "metric":
        cat = doc.get("catalog") or {}
        return MetricField(
            tensor,
            cat.get("id", "derived"),
            cat.get("params"),
            cat.get("euler_characteristic"),
        )
    return tensor


def save_snapshot(path: str, obj) -> None:
    from . import serialize

    with open(path, "w") as f:
        f.write(serialize.dumps(field_to_snapshot(obj)))
        f.write("\n")


def load_snapshot(path: str):
    from . import serialize

    with open(path) as f:
        return snapshot_to_field(serialize.loads(f.read()))
