"""Mollification and partition-of-unity gluing of grid fields.

Convolving a grid field with a compactly supported bump produces an
arbitrarily close smooth field on a slightly shrunken box.  Local smooth
pieces with piece-specific radii are then blended by a smooth partition of
unity; each piece halves its radius until both its value and decrease-rate
errors fall under targets that shrink with the piece index and the size of
the partition gradients, which is what keeps the glued field within an
eighth of the original and still strictly decreasing along trajectories.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from itertools import product

import numpy as np

from .lyapunov import ScalarField, verify_differential_decrease
from .reports import MarginReport, from_margins
from .trajectory import Trajectory

MAX_MOLLIFIER_DIM = 3


class NonpositiveRadius(ValueError):
    """Mollifier radius must be strictly positive."""


class BoxTooSmall(ValueError):
    """Shrinking a field box by the mollifier radius left nothing usable."""


class DegenerateBox(ValueError):
    """Partition request on an empty box or with unusable piece geometry."""


class PieceBoundUnachievable(RuntimeError):
    """Radius halving hit its cap before meeting a piece's error targets."""


@dataclass(frozen=True)
class Mollifier:
    """Radial bump kernel of unit mass, scaled to a given radius.

    The unit profile is ``C exp(-1 / (1 - |y|^2))`` inside the unit ball;
    ``norm_const`` is C, fixed once by tensor midpoint quadrature so the
    whole radius family shares one profile.
    """

    dim: int
    radius: float
    norm_const: float
    points: int

    def unit_values(self, Y: np.ndarray) -> np.ndarray:
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        sq = np.sum(Y * Y, axis=1)
        inside = sq < 1.0
        out = np.zeros(len(Y))
        with np.errstate(divide="ignore", over="ignore"):
            out[inside] = self.norm_const * np.exp(-1.0 / (1.0 - sq[inside]))
        return out

    def __call__(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self.unit_values(X / self.radius) / self.radius ** self.dim

    def _unit_grid(self, points: int | None):
        p = points or self.points
        axis = -1.0 + (2.0 * np.arange(p) + 1.0) / p
        Y = np.stack(np.meshgrid(*([axis] * self.dim), indexing="ij"), axis=-1)
        Y = Y.reshape(-1, self.dim)
        w = self.unit_values(Y) * (2.0 / p) ** self.dim
        return Y, w

    def quadrature(self, points: int | None = None, normalized: bool = False):
        """Midpoint nodes and weights on [-r, r]^n for the scaled kernel."""
        Y, w = self._unit_grid(points)
        if normalized:
            w = w / w.sum()
        return Y * self.radius, w

    def integral(self, points: int | None = None) -> float:
        """Quadrature mass of the scaled kernel (should be 1)."""
        _, w = self._unit_grid(points)
        return float(w.sum())

    def moment(self, p: int, points: int | None = None) -> float:
        """Radial moment ``int |y|^p k_r(y) dy`` of the scaled kernel."""
        Y, w = self._unit_grid(points)
        unit = float(np.sum(w * np.linalg.norm(Y, axis=1) ** p))
        return unit * self.radius ** p


def make_mollifier(dim: int, radius: float, points: int = 128) -> Mollifier:
    """Build a unit-mass bump kernel; the profile constant is quadrature-fit.

    Tensor-grid quadrature is superalgebraically accurate here because the
    bump is smooth and vanishes with all derivatives at the ball boundary.
    """
    if radius <= 0:
        raise NonpositiveRadius(f"radius must be positive, got {radius}")
    if not 1 <= dim <= MAX_MOLLIFIER_DIM:
        raise ValueError(f"mollifier dimension must be 1..{MAX_MOLLIFIER_DIM}, got {dim}")
    if points < 64:
        raise ValueError("need at least 64 quadrature points per axis")
    probe = Mollifier(dim=dim, radius=1.0, norm_const=1.0, points=points)
    mass = probe.integral()
    return Mollifier(dim=dim, radius=float(radius), norm_const=1.0 / mass, points=points)


def convolve(field: ScalarField, mol: Mollifier, points: int | None = None,
             restrict_lo=None, restrict_hi=None, name: str | None = None) -> ScalarField:
    """Smooth a field by kernel averaging on the radius-shrunken box.

    Output nodes are the input nodes at distance >= radius from the box
    boundary, optionally intersected with [restrict_lo, restrict_hi].  The
    discrete kernel weights are renormalized to unit sum, so constants pass
    through exactly.
    """
    if mol.dim != field.dim:
        raise ValueError("kernel and field dimensions differ")
    r = mol.radius
    lo_cut = field.lo + r if restrict_lo is None else np.maximum(field.lo + r, restrict_lo)
    hi_cut = field.hi - r if restrict_hi is None else np.minimum(field.hi - r, restrict_hi)
    axes = []
    for a, axis in enumerate(field.axes()):
        slack = 1e-9 * max(1.0, abs(float(field.hi[a] - field.lo[a])))
        keep = axis[(axis >= lo_cut[a] - slack) & (axis <= hi_cut[a] + slack)]
        if len(keep) < 2:
            raise BoxTooSmall(
                f"axis {a}: shrinking [{field.lo[a]:g}, {field.hi[a]:g}] by {r:g} "
                "leaves fewer than two nodes")
        axes.append(keep)
    nodes = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, field.dim)
    offsets, weights = mol.quadrature(points, normalized=True)
    live = weights > 0.0
    offsets, weights = offsets[live], weights[live]
    values = np.zeros(len(nodes))
    for y, w in zip(offsets, weights):
        values += w * field.value(nodes - y)
    shape = tuple(len(ax) for ax in axes)
    lo = np.array([ax[0] for ax in axes])
    hi = np.array([ax[-1] for ax in axes])
    return ScalarField(lo, hi, field.spacing, values.reshape(shape),
                       name=name or f"{field.name}_r{r:g}", smooth=True)


@dataclass(frozen=True)
class UocReport:
    """Sup distances between a field and its mollifications on a sub-box."""

    radii: tuple
    distances: tuple
    final_bound: float | None
    passed: bool

    def to_dict(self) -> dict:
        return {"radii": list(self.radii), "distances": list(self.distances),
                "final_bound": self.final_bound, "passed": self.passed}


def uoc_check(field: ScalarField, radii, lo=None, hi=None,
              final_bound: float | None = None, points: int | None = None) -> UocReport:
    """Check that mollifications converge uniformly on a compact sub-box.

    Distances are sup over the surviving grid nodes; the verdict requires
    them to be nonincreasing along the ladder (2 percent slack) and, when a
    bound is given, to finish below it.
    """
    radii = [float(r) for r in radii]
    if sorted(radii, reverse=True) != radii:
        raise ValueError("radius ladder must be decreasing")
    dists = []
    for r in radii:
        smooth = convolve(field, make_mollifier(field.dim, r), points,
                          restrict_lo=lo, restrict_hi=hi)
        exact = field.value(smooth.nodes())
        dists.append(float(np.abs(smooth.values.reshape(-1) - exact).max()))
    ok = all(d2 <= d1 * 1.02 + 1e-12 for d1, d2 in zip(dists, dists[1:]))
    if final_bound is not None:
        ok = ok and dists[-1] <= final_bound
    return UocReport(tuple(radii), tuple(dists), final_bound, ok)


def _bump(t: np.ndarray) -> np.ndarray:
    out = np.zeros_like(t)
    inside = (t > 0.0) & (t < 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        out[inside] = np.exp(-1.0 / (t[inside] * (1.0 - t[inside])))
    return out


@dataclass(frozen=True, eq=False)
class PartitionOfUnity:
    """Tensor-product smooth bump weights summing to one on a box.

    ``intervals[a]`` holds the (open) support intervals of the axis-``a``
    bumps; pieces are their Cartesian products in C order.  ``q`` stores the
    largest partition-gradient norm per piece seen on the working grid, and
    ``eps`` the per-piece error budgets once value/rate fields are known.
    """

    lo: np.ndarray
    hi: np.ndarray
    intervals: tuple
    spacing: np.ndarray
    q: np.ndarray
    eps: np.ndarray | None = None

    @property
    def shape(self) -> tuple:
        return tuple(len(iv) for iv in self.intervals)

    @property
    def n_pieces(self) -> int:
        return int(np.prod(self.shape))

    def piece_box(self, i: int):
        multi = np.unravel_index(i, self.shape)
        lo = np.array([self.intervals[a][k][0] for a, k in enumerate(multi)])
        hi = np.array([self.intervals[a][k][1] for a, k in enumerate(multi)])
        return lo, hi

    def _axis_weights(self, a: int, x: np.ndarray) -> np.ndarray:
        cols = []
        for (start, stop) in self.intervals[a]:
            cols.append(_bump((x - start) / (stop - start)))
        G = np.stack(cols, axis=-1)
        total = G.sum(axis=-1, keepdims=True)
        if np.any(total <= 0.0):
            raise DegenerateBox("a point of the box is covered by no piece")
        return G / total

    def weights(self, X) -> np.ndarray:
        """All piece weights at the query points, shape (npoints, npieces)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        per_axis = [self._axis_weights(a, X[:, a]) for a in range(X.shape[1])]
        out = np.ones((len(X),) + self.shape)
        for a, G in enumerate(per_axis):
            expand = [None] * len(self.shape)
            expand[a] = slice(None)
            out = out * G[(slice(None),) + tuple(expand)]
        return out.reshape(len(X), -1)


def build_partition(lo, hi, pieces: int, overlap: float, spacing,
                    v_field: ScalarField | None = None,
                    w_field: ScalarField | None = None) -> PartitionOfUnity:
    """Overlapping tensor bumps normalized to a partition of unity.

    ``pieces`` equal cells per axis, each support widened by ``overlap``
    times the cell width on both sides (end pieces extend past the box so
    the boundary stays covered).  ``q`` is measured on the grid implied by
    ``spacing``.  When the value and rate fields are supplied, the error
    budget of each piece is a quarter of the smaller of their minima over
    the closed piece, the quantity that later scales the gluing targets.
    """
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    spacing = np.atleast_1d(np.asarray(spacing, dtype=float))
    if spacing.size == 1 and lo.size > 1:
        spacing = np.full(lo.size, spacing[0])
    if np.any(hi <= lo):
        raise DegenerateBox("box upper corner must exceed the lower corner")
    if pieces < 1:
        raise DegenerateBox("need at least one piece per axis")
    if not 0.0 < overlap <= 0.5:
        raise DegenerateBox("overlap fraction must be in (0, 1/2]")

    intervals = []
    for a in range(lo.size):
        width = (hi[a] - lo[a]) / pieces
        ov = overlap * width
        intervals.append(tuple((lo[a] + k * width - ov, lo[a] + (k + 1) * width + ov)
                               for k in range(pieces)))
    pou = PartitionOfUnity(lo=lo, hi=hi, intervals=tuple(intervals),
                           spacing=spacing, q=np.zeros(pieces ** lo.size))

    axes = [np.arange(lo[a], hi[a] + spacing[a] / 2, spacing[a]) for a in range(lo.size)]
    nodes = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, lo.size)
    shape = tuple(len(ax) for ax in axes)
    W = pou.weights(nodes)
    q = np.zeros(W.shape[1])
    for i in range(W.shape[1]):
        grid = W[:, i].reshape(shape)
        if lo.size == 1:
            grads = [np.gradient(grid, spacing[0])]
        else:
            grads = np.gradient(grid, *spacing)
        q[i] = float(np.sqrt(sum(g * g for g in grads)).max())

    eps = None
    if v_field is not None and w_field is not None:
        eps = np.zeros(W.shape[1])
        for i in range(W.shape[1]):
            plo, phi = pou.piece_box(i)
            inside = np.all((nodes >= plo - 1e-9) & (nodes <= phi + 1e-9), axis=1)
            eps[i] = 0.25 * min(float(v_field.value(nodes[inside]).min()),
                                float(w_field.value(nodes[inside]).min()))
    return PartitionOfUnity(lo=lo, hi=hi, intervals=tuple(intervals),
                            spacing=spacing, q=q, eps=eps)


@dataclass(frozen=True)
class PieceRecord:
    """Per-piece outcome of the gluing radius search (1-based index)."""

    index: int
    radius: float
    eps: float
    q: float
    v_target: float
    v_achieved: float
    w_target: float
    w_achieved: float

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("index", "radius", "eps", "q", "v_target", "v_achieved",
                 "w_target", "w_achieved")}


@dataclass(frozen=True, eq=False)
class GlueResult:
    """Glued smooth pair plus the per-piece evidence."""

    v_s: ScalarField
    w_s: ScalarField
    pieces: tuple

    def to_dict(self) -> dict:
        return {"pieces": [p.to_dict() for p in self.pieces]}

    def dump_report(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _blend(pou: PartitionOfUnity, axes: list, piece_values: list,
           factor: float = 1.0) -> np.ndarray:
    """Weighted sum of per-piece node values over the working grid.

    ``piece_values[i]`` is (nodes_in_piece_slice, values) where the slice
    covers every node with positive weight for piece i; nodes outside carry
    weight zero so their missing values do not matter.
    """
    shape = tuple(len(ax) for ax in axes)
    nodes = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
    W = pou.weights(nodes)
    out = np.zeros(len(nodes))
    for i, (mask, vals) in enumerate(piece_values):
        out[mask] += factor * W[mask, i] * vals
    return out.reshape(shape)


def glue(v_even: ScalarField, w_even: ScalarField, pou: PartitionOfUnity,
         base_radius: float | None = None, max_halvings: int = 20,
         v_floor: float = 5e-7, w_floor: float = 1e-3,
         points: int = 64, rate_factor: float = 0.2) -> GlueResult:
    """Blend per-piece mollifications into one smooth Lyapunov pair.

    Piece ``i`` (1-based) halves its radius until its mollified value field
    sits within ``eps_i / (2^(i+1) (1 + q_i))`` of the original and its
    rate field within ``eps_i``, on the open piece.  Small floors keep the
    targets meaningful on pieces whose budget vanishes because they touch
    the origin; the floors are sized so the glued field still meets the
    global eighth-of-value bound.  The glued rate is scaled by
    ``rate_factor`` (a fifth), which is the slack that survives the
    partition cross terms.
    """
    if pou.n_pieces == 0:
        raise DegenerateBox("partition has no pieces")
    slack = 1e-9
    axes = [ax[(ax >= pou.lo[a] - slack) & (ax <= pou.hi[a] + slack)]
            for a, ax in enumerate(v_even.axes())]
    if any(len(ax) < 2 for ax in axes):
        raise DegenerateBox("working box does not contain enough field nodes")
    nodes = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))

    eps = pou.eps
    if eps is None:
        eps = np.zeros(pou.n_pieces)
        for i in range(pou.n_pieces):
            plo, phi = pou.piece_box(i)
            inside = np.all((nodes >= plo - 1e-9) & (nodes <= phi + 1e-9), axis=1)
            eps[i] = 0.25 * min(float(v_even.value(nodes[inside]).min()),
                                float(w_even.value(nodes[inside]).min()))

    if base_radius is None:
        base_radius = min(min(b - a for (a, b) in iv) for iv in pou.intervals) / 4.0

    records = []
    v_pieces, w_pieces = [], []
    for i in range(pou.n_pieces):
        plo, phi = pou.piece_box(i)
        open_mask = np.all((nodes > plo + 1e-9) & (nodes < phi - 1e-9), axis=1)
        if not open_mask.any():
            raise DegenerateBox(f"piece {i + 1} contains no working grid nodes")
        v_exact = v_even.value(nodes[open_mask])
        w_exact = w_even.value(nodes[open_mask])
        v_target = max(float(eps[i]) / (2.0 ** (i + 2) * (1.0 + pou.q[i])), v_floor)
        w_target = max(float(eps[i]), w_floor)

        found = None
        for j in range(max_halvings + 1):
            r = base_radius / 2.0 ** j
            kernel = make_mollifier(len(axes), r)
            v_i = convolve(v_even, kernel, points, restrict_lo=plo, restrict_hi=phi)
            if j == 0 and (np.any(nodes[open_mask] < v_i.lo - 1e-9)
                           or np.any(nodes[open_mask] > v_i.hi + 1e-9)):
                raise BoxTooSmall(
                    f"piece {i + 1}: field padding is thinner than the base "
                    f"radius {base_radius:g}; extend the field box")
            w_i = convolve(w_even, kernel, points, restrict_lo=plo, restrict_hi=phi)
            v_vals = v_i.value(nodes[open_mask])
            w_vals = w_i.value(nodes[open_mask])
            v_err = float(np.abs(v_vals - v_exact).max())
            w_err = float(np.abs(w_vals - w_exact).max())
            if v_err <= v_target and w_err <= w_target:
                found = (r, v_err, w_err, v_vals, w_vals)
                break
        if found is None:
            raise PieceBoundUnachievable(
                f"piece {i + 1}: targets v<={v_target:.3g} w<={w_target:.3g} "
                f"not met after {max_halvings} halvings (last errors "
                f"v={v_err:.3g} w={w_err:.3g})")
        r, v_err, w_err, v_vals, w_vals = found
        records.append(PieceRecord(index=i + 1, radius=r, eps=float(eps[i]),
                                   q=float(pou.q[i]), v_target=v_target,
                                   v_achieved=v_err, w_target=w_target,
                                   w_achieved=w_err))
        v_pieces.append((open_mask, v_vals))
        w_pieces.append((open_mask, w_vals))

    lo = np.array([ax[0] for ax in axes])
    hi = np.array([ax[-1] for ax in axes])
    v_s = ScalarField(lo, hi, v_even.spacing, _blend(pou, axes, v_pieces),
                      name="V_s", smooth=True)
    w_s = ScalarField(lo, hi, w_even.spacing, _blend(pou, axes, w_pieces, rate_factor),
                      name="W_s", smooth=True)
    return GlueResult(v_s=v_s, w_s=w_s, pieces=tuple(records))


def gluing_error_report(v_s: ScalarField, v_even: ScalarField,
                        fraction: float = 0.125, slack: float = 1e-6) -> MarginReport:
    """Check |V_s - V| <= fraction * V + slack at every glued node."""
    nodes = v_s.nodes()
    exact = v_even.value(nodes)
    margins = np.abs(v_s.values.reshape(-1) - exact) - fraction * exact
    return from_margins("gluing_error", margins, tolerance=slack,
                        locations=np.linalg.norm(nodes, axis=1))


@dataclass(frozen=True)
class MollifiedDecreaseReport:
    """Decrease margins of mollified fields along a radius ladder."""

    radii: tuple
    worst_margins: tuple
    eps: float
    first_passing_radius: float | None

    @property
    def passed(self) -> bool:
        return self.first_passing_radius is not None

    def to_dict(self) -> dict:
        return {"radii": list(self.radii), "worst_margins": list(self.worst_margins),
                "eps": self.eps, "first_passing_radius": self.first_passing_radius,
                "passed": self.passed}


def mollified_decrease_check(v_field: ScalarField, w_field: ScalarField,
                             trajectories: list[Trajectory], radii,
                             eps: float = 1e-2,
                             points: int | None = None) -> MollifiedDecreaseReport:
    """Find the first ladder radius whose mollification still decreases.

    For each radius the check is dV_r/dt <= -W + eps along every provided
    trajectory (symmetric difference quotients).  Coarse radii can fail
    near corners of the original field; the report records the margins for
    the whole ladder.
    """
    radii = [float(r) for r in radii]
    worst = []
    first = None
    for r in radii:
        smooth = convolve(v_field, make_mollifier(v_field.dim, r), points)
        m = max(verify_differential_decrease(smooth, w_field, tr, tol=eps).worst_margin
                for tr in trajectories)
        worst.append(m)
        if first is None and m <= eps:
            first = r
    return MollifiedDecreaseReport(radii=tuple(radii), worst_margins=tuple(worst),
                                   eps=eps, first_passing_radius=first)
