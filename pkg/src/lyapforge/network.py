"""Work-conserving fluid network models and their set-valued dynamics.

A network routes fluid of ``n`` classes through ``J`` stations.  Each class
is served at exactly one station, drains at rate ``mu[i]`` when allocated
effort, and feeds downstream classes through a substochastic routing matrix.
At any state ``x >= 0`` the admissible allocations form a polytope: effort is
nonnegative, each station hands out at most one unit in total, and stations
with backlogged fluid must hand out exactly one unit (work conservation).
The admissible velocities are the affine image of that allocation polytope,
intersected with the cone of directions that keep the state in the orthant.

Everything here is small and exact by design: states have at most a handful
of coordinates, so polytopes are kept in halfspace form and vertices are
recovered by active-set enumeration rather than by iterative solvers.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import ConvexHull

# Feasibility slack for active-set vertex checks and membership tests.
FEASIBILITY_TOL = 1e-9
# Vertices closer than this are considered duplicates.
DEDUP_TOL = 1e-8
# A coordinate counts as drained when x_i <= ACTIVITY_TOL_SCALE * (1 + |x|).
ACTIVITY_TOL_SCALE = 1e-9
# Largest ambient dimension fed to exhaustive active-set enumeration.
MAX_ENUM_DIM = 6


class NetworkValidationError(ValueError):
    """A network description violates one or more structural requirements."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class SpectralRadiusTooLarge(NetworkValidationError):
    """Routing feedback is not dissipative: spectral radius >= 1."""


class ConstituencyMalformed(NetworkValidationError):
    """Constituency matrix is not a 0/1 partition of classes into stations."""


class NegativeRate(NetworkValidationError):
    """An arrival, service, or routing entry is negative."""


class DimensionTooLarge(ValueError):
    """Exhaustive vertex enumeration was asked for in too many dimensions."""


class Unbounded(ValueError):
    """The polytope has a nontrivial recession cone, so no vertex hull."""


class EmptyVelocitySet(RuntimeError):
    """No admissible velocity at a state; indicates a malformed model."""


class SequenceNotConverging(ValueError):
    """A probe sequence does not approach its declared limit point."""


@dataclass(frozen=True, eq=False)
class Polytope:
    """Convex polytope ``{v : A v <= b, E v = f}`` in halfspace form.

    ``E`` and ``f`` may be empty.  ``vertices`` is an optional cache filled
    by constructors that already know the vertex set; it is never mutated
    after construction.
    """

    A: np.ndarray
    b: np.ndarray
    E: np.ndarray
    f: np.ndarray
    vertices: np.ndarray | None = None

    def __post_init__(self):
        n = self.A.shape[1] if self.A.size else self.E.shape[1]
        object.__setattr__(self, "A", np.atleast_2d(np.asarray(self.A, dtype=float)).reshape(-1, n))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float).reshape(-1))
        object.__setattr__(self, "E", np.atleast_2d(np.asarray(self.E, dtype=float)).reshape(-1, n))
        object.__setattr__(self, "f", np.asarray(self.f, dtype=float).reshape(-1))
        if self.vertices is not None:
            object.__setattr__(self, "vertices", np.asarray(self.vertices, dtype=float).reshape(-1, n))

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    @classmethod
    def from_inequalities(cls, A, b) -> "Polytope":
        A = np.atleast_2d(np.asarray(A, dtype=float))
        return cls(A, b, np.zeros((0, A.shape[1])), np.zeros(0))

    @classmethod
    def box(cls, lo, hi) -> "Polytope":
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        n = lo.size
        A = np.vstack([np.eye(n), -np.eye(n)])
        return cls(A, np.concatenate([hi, -lo]), np.zeros((0, n)), np.zeros(0))

    @classmethod
    def singleton(cls, point) -> "Polytope":
        point = np.atleast_1d(np.asarray(point, dtype=float))
        n = point.size
        return cls(np.zeros((0, n)), np.zeros(0), np.eye(n), point.copy(),
                   vertices=point.reshape(1, n))

    def contains(self, v, tol: float = FEASIBILITY_TOL) -> bool:
        v = np.asarray(v, dtype=float).reshape(-1)
        if self.A.size and np.any(self.A @ v > self.b + tol):
            return False
        if self.E.size and np.any(np.abs(self.E @ v - self.f) > tol):
            return False
        return True


@dataclass(frozen=True)
class OrthantCone:
    """Directions that keep a nonnegative state inside the orthant.

    At a state with drained coordinates ``zero_index_set`` the admissible
    directions are ``{v : v_i >= 0 for i in zero_index_set}``; all other
    coordinates are unconstrained.
    """

    dim: int
    zero_index_set: tuple[int, ...]

    def contains(self, v, tol: float = FEASIBILITY_TOL) -> bool:
        v = np.asarray(v, dtype=float).reshape(-1)
        return all(v[i] >= -tol for i in self.zero_index_set)

    def halfspaces(self) -> tuple[np.ndarray, np.ndarray]:
        """Rows ``-e_i^T v <= 0`` for each pinned coordinate."""
        A = np.zeros((len(self.zero_index_set), self.dim))
        for row, i in enumerate(self.zero_index_set):
            A[row, i] = -1.0
        return A, np.zeros(len(self.zero_index_set))


@dataclass(frozen=True, eq=False)
class FluidNetworkSpec:
    """Static description of a work-conserving fluid network.

    ``constituency`` is the J x n station/class incidence matrix (each class
    belongs to exactly one station), ``alpha`` the exogenous arrival rates,
    ``mu`` the service rates, and ``routing`` the substochastic class-to-class
    transfer matrix.  ``lipschitz`` and ``spectral_radius`` are filled in by
    :func:`validate_network` when absent.
    """

    constituency: np.ndarray
    alpha: np.ndarray
    mu: np.ndarray
    routing: np.ndarray
    lipschitz: float | None = None
    spectral_radius: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "constituency", np.atleast_2d(np.asarray(self.constituency, dtype=float)))
        object.__setattr__(self, "alpha", np.atleast_1d(np.asarray(self.alpha, dtype=float)))
        object.__setattr__(self, "mu", np.atleast_1d(np.asarray(self.mu, dtype=float)))
        object.__setattr__(self, "routing", np.atleast_2d(np.asarray(self.routing, dtype=float)))

    @property
    def stations(self) -> int:
        return self.constituency.shape[0]

    @property
    def classes(self) -> int:
        return self.constituency.shape[1]

    def drift_matrix(self) -> np.ndarray:
        """Effort-to-velocity map ``(I - P^T) diag(mu)``."""
        n = self.classes
        return (np.eye(n) - self.routing.T) @ np.diag(self.mu)


def single_station(alpha: float = 1.0, mu: float = 2.0) -> FluidNetworkSpec:
    """One class at one station with direct outflow.  Handy in tests."""
    return FluidNetworkSpec(
        constituency=np.ones((1, 1)),
        alpha=np.array([float(alpha)]),
        mu=np.array([float(mu)]),
        routing=np.zeros((1, 1)),
    )


def load_network(source) -> FluidNetworkSpec:
    """Read a network from a JSON file path, file object, or parsed dict."""
    if isinstance(source, dict):
        raw = source
    elif hasattr(source, "read"):
        raw = json.load(source)
    else:
        with open(source) as fh:
            raw = json.load(fh)
    J = int(raw["stations"])
    n = int(raw["classes"])
    spec = FluidNetworkSpec(
        constituency=np.asarray(raw["constituency"], dtype=float).reshape(J, n),
        alpha=np.asarray(raw["alpha"], dtype=float),
        mu=np.asarray(raw["mu"], dtype=float),
        routing=np.asarray(raw["routing"], dtype=float).reshape(n, n),
        lipschitz=float(raw["lipschitz"]) if "lipschitz" in raw else None,
    )
    return spec


def dump_network(spec: FluidNetworkSpec, path) -> None:
    """Write a network description as JSON (row-major matrices)."""
    doc = {
        "stations": spec.stations,
        "classes": spec.classes,
        "constituency": spec.constituency.reshape(-1).tolist(),
        "alpha": spec.alpha.tolist(),
        "mu": spec.mu.tolist(),
        "routing": spec.routing.reshape(-1).tolist(),
    }
    if spec.lipschitz is not None:
        doc["lipschitz"] = float(spec.lipschitz)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def spectral_radius(P: np.ndarray, tol: float = 1e-10, max_doublings: int = 60) -> float:
    """Spectral radius of a small matrix by iterated powers.

    Repeatedly squares the (renormalized) matrix and reads off
    ``|P^(2^m)|^(1/2^m)``, which decreases monotonically to the spectral
    radius.  Unlike a single-vector iteration this converges even for
    nilpotent or periodic routing, where no eigenvalue strictly dominates.
    """
    P = np.asarray(P, dtype=float)
    n = P.shape[0]
    if n == 0:
        return 0.0
    norm = float(np.linalg.norm(P, 2))
    if norm == 0.0:
        return 0.0
    B = P / norm
    log_norm = np.log(norm)
    power = 1.0
    est = norm
    for _ in range(max_doublings):
        B = B @ B
        step = float(np.linalg.norm(B, 2))
        if step == 0.0:
            return 0.0
        B = B / step
        log_norm = 2.0 * log_norm + np.log(step)
        power *= 2.0
        new_est = float(np.exp(log_norm / power))
        if abs(new_est - est) <= 0.25 * tol * max(1.0, new_est):
            return new_est
        est = new_est
    return est


def validate_network(spec: FluidNetworkSpec, tol: float = 1e-9) -> FluidNetworkSpec:
    """Check structural requirements and annotate the spec with derived data.

    Returns a copy carrying the routing spectral radius and, when the spec
    does not pin one, a global Lipschitz constant for the velocity sets
    (``|alpha| + |(I - P^T) diag(mu)| * sqrt(J)``, operator norms).

    Raises a category-specific error when all violations share a category,
    otherwise a plain :class:`NetworkValidationError` listing everything.
    """
    C, alpha, mu, P = spec.constituency, spec.alpha, spec.mu, spec.routing
    J, n = C.shape
    issues: list[tuple[type, str]] = []

    if alpha.shape != (n,) or mu.shape != (n,):
        issues.append((NetworkValidationError, f"rate vectors must have length {n}"))
    if P.shape != (n, n):
        issues.append((NetworkValidationError, f"routing must be {n} x {n}"))

    binary = np.isin(C, (0.0, 1.0)).all()
    if not binary:
        issues.append((ConstituencyMalformed, "constituency entries must be 0 or 1"))
    elif not np.array_equal(C.sum(axis=0), np.ones(n)):
        issues.append((ConstituencyMalformed, "each class must belong to exactly one station"))

    if alpha.shape == (n,) and np.any(alpha < 0):
        issues.append((NegativeRate, "arrival rates must be nonnegative"))
    if mu.shape == (n,) and np.any(mu < 0):
        issues.append((NegativeRate, "service rates must be nonnegative"))

    rho = None
    if P.shape == (n, n):
        if np.any(P < 0):
            issues.append((NegativeRate, "routing entries must be nonnegative"))
        else:
            if np.any(P.sum(axis=1) > 1.0 + tol):
                issues.append((SpectralRadiusTooLarge, "routing row sums must not exceed 1"))
            rho = spectral_radius(P)
            if rho >= 1.0 - tol:
                issues.append((SpectralRadiusTooLarge, f"routing spectral radius {rho:.6g} is not < 1"))

    if spec.lipschitz is not None and spec.lipschitz <= 0:
        issues.append((NetworkValidationError, "lipschitz constant must be positive"))

    if issues:
        kinds = {kind for kind, _ in issues}
        messages = [msg for _, msg in issues]
        raise (kinds.pop() if len(kinds) == 1 else NetworkValidationError)(messages)

    L = spec.lipschitz
    if L is None:
        L = float(np.linalg.norm(alpha) + np.linalg.norm(spec.drift_matrix(), 2) * np.sqrt(J))
    return replace(spec, lipschitz=L, spectral_radius=rho)


def activity_tol(x: np.ndarray) -> float:
    """State-relative threshold below which a coordinate counts as drained."""
    return ACTIVITY_TOL_SCALE * (1.0 + float(np.linalg.norm(x)))


def allocation_set(spec: FluidNetworkSpec, x) -> Polytope:
    """Admissible effort allocations at state ``x``.

    Constraints: ``u >= 0``, per-station totals ``C u <= 1``, and equality
    ``(C u)_j = 1`` at every station with backlog.  The complementarity form
    ``(C x)^T (1 - C u) = 0`` decomposes station by station because every
    term is nonnegative, which is what makes the equality rows exact.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    C = spec.constituency
    J, n = C.shape
    tol = activity_tol(x)
    A = np.vstack([-np.eye(n), C])
    b = np.concatenate([np.zeros(n), np.ones(J)])
    busy = C @ x > tol
    E = C[busy]
    f = np.ones(int(busy.sum()))
    return Polytope(A, b, E, f)


def contingent_cone(x, tol: float | None = None) -> OrthantCone:
    """Cone of velocities that keep ``x`` inside the nonnegative orthant."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if tol is None:
        tol = activity_tol(x)
    zero = tuple(int(i) for i in np.flatnonzero(x <= tol))
    return OrthantCone(x.size, zero)


def _dedup_rows(points: np.ndarray, tol: float = DEDUP_TOL) -> np.ndarray:
    kept: list[np.ndarray] = []
    for p in points:
        if not any(np.linalg.norm(p - q) <= tol for q in kept):
            kept.append(p)
    return np.array(kept).reshape(-1, points.shape[1])


def _lexsorted(points: np.ndarray) -> np.ndarray:
    if len(points) <= 1:
        return points
    # Sort on rounded keys so float dust cannot flip the canonical order.
    order = np.lexsort(np.round(points, 9).T[::-1])
    return points[order]


def _recession_nontrivial(poly: Polytope, tol: float = FEASIBILITY_TOL) -> bool:
    """True when ``{d : A d <= 0, E d = 0}`` contains a nonzero direction."""
    n = poly.dim
    A_ub = poly.A if poly.A.size else None
    b_ub = np.zeros(poly.A.shape[0]) if poly.A.size else None
    A_eq = poly.E if poly.E.size else None
    b_eq = np.zeros(poly.E.shape[0]) if poly.E.size else None
    for i in range(n):
        for sign in (1.0, -1.0):
            c = np.zeros(n)
            c[i] = -sign
            res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
                          bounds=[(-1.0, 1.0)] * n, method="highs")
            if res.status == 0 and -res.fun > 100 * tol:
                return True
    return False


def vertex_enumerate(poly: Polytope,
                     feas_tol: float = FEASIBILITY_TOL,
                     dedup_tol: float = DEDUP_TOL) -> np.ndarray:
    """All vertices of a bounded polytope, lexicographically sorted.

    Every subset of inequality rows that, together with the equality rows,
    pins down a unique point is solved and kept when feasible.  Degenerate
    vertices are found several times and collapsed by ``dedup_tol``.  Returns
    the cached vertex list unchanged when one is present.
    """
    if poly.vertices is not None:
        return poly.vertices
    n = poly.dim
    if n > MAX_ENUM_DIM:
        raise DimensionTooLarge(f"active-set enumeration supports dimension <= {MAX_ENUM_DIM}, got {n}")
    if _recession_nontrivial(poly, feas_tol):
        raise Unbounded("polytope has a nontrivial recession cone")

    rank_eq = np.linalg.matrix_rank(poly.E) if poly.E.size else 0
    k = n - rank_eq
    found: list[np.ndarray] = []
    rows = range(poly.A.shape[0])
    for subset in itertools.combinations(rows, k):
        G = np.vstack([poly.E, poly.A[list(subset)]]) if poly.E.size else poly.A[list(subset)]
        if G.shape[0] < n or np.linalg.matrix_rank(G) < n:
            continue
        h = np.concatenate([poly.f, poly.b[list(subset)]]) if poly.E.size else poly.b[list(subset)]
        v, *_ = np.linalg.lstsq(G, h, rcond=None)
        if np.linalg.norm(G @ v - h) > feas_tol * max(1.0, float(np.linalg.norm(h))):
            continue
        if poly.contains(v, feas_tol):
            found.append(v)
    if not found:
        return np.zeros((0, n))
    return _lexsorted(_dedup_rows(np.array(found), dedup_tol))


def nearest_point(poly: Polytope, z, feas_tol: float = FEASIBILITY_TOL) -> np.ndarray:
    """Euclidean projection of ``z`` onto a polytope by face enumeration.

    The minimizer lies on some face, so projecting onto the affine span of
    every active-set candidate and keeping the best feasible result is exact.
    Intended for the same small dimensions as :func:`vertex_enumerate`.
    """
    z = np.asarray(z, dtype=float).reshape(-1)
    if poly.contains(z, feas_tol):
        return z.copy()
    n = z.size
    if n == 1 and poly.vertices is not None and len(poly.vertices):
        lo, hi = float(poly.vertices.min()), float(poly.vertices.max())
        return np.array([min(max(z[0], lo), hi)])

    rank_eq = np.linalg.matrix_rank(poly.E) if poly.E.size else 0
    best, best_dist = None, np.inf
    for size in range(0, n - rank_eq + 1):
        for subset in itertools.combinations(range(poly.A.shape[0]), size):
            G = np.vstack([poly.E, poly.A[list(subset)]])
            h = np.concatenate([poly.f, poly.b[list(subset)]])
            if G.shape[0]:
                lam, *_ = np.linalg.lstsq(G @ G.T, G @ z - h, rcond=None)
                v = z - G.T @ lam
            else:
                v = z.copy()
            if poly.contains(v, feas_tol):
                d = float(np.linalg.norm(v - z))
                if d < best_dist - 1e-15:
                    best, best_dist = v, d
    if best is None:
        raise EmptyVelocitySet("projection target polytope appears to be empty")
    return best


def convex_hull(points) -> Polytope:
    """Halfspace form of the convex hull of a finite point set.

    Degenerate hulls are handled by projecting onto the affine span first:
    the orthogonal complement becomes equality rows, a one dimensional span
    becomes an interval, and anything flatter than a segment is a point.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    m, n = pts.shape
    center = pts.mean(axis=0)
    B = pts - center
    U, s, Vt = np.linalg.svd(B, full_matrices=True) if m else (None, np.zeros(0), np.eye(n))
    scale = max(1.0, float(s[0])) if s.size else 1.0
    rank = int(np.sum(s > 1e-9 * scale))
    E = Vt[rank:]
    f = E @ center

    if rank == 0:
        return Polytope(np.zeros((0, n)), np.zeros(0), np.eye(n), center,
                        vertices=center.reshape(1, n))
    Q = Vt[:rank].T
    Y = B @ Q
    if rank == 1:
        y = Y[:, 0]
        q = Q[:, 0]
        off = float(q @ center)
        A = np.vstack([q, -q])
        b = np.array([y.max() + off, -(y.min() + off)])
        verts = center + np.outer([y.min(), y.max()], q)
        return Polytope(A, b, E, f, vertices=_lexsorted(verts))
    hull = ConvexHull(Y)
    normals = hull.equations[:, :-1]
    offsets = hull.equations[:, -1]
    A = normals @ Q.T
    b = -offsets + A @ center
    verts = pts[hull.vertices]
    return Polytope(A, b, E, f, vertices=_lexsorted(_dedup_rows(verts)))


def rhs_set(spec: FluidNetworkSpec, x) -> Polytope:
    """Admissible state velocities at ``x``.

    The affine image ``alpha - (I - P^T) diag(mu) u`` of the allocation
    polytope, intersected with the orthant's contingent cone at ``x``.  The
    returned polytope carries its vertex list.  A valid network always admits
    at least one velocity (idle effort on drained classes is available), so
    an empty result raises :class:`EmptyVelocitySet`.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    U = allocation_set(spec, x)
    effort_vertices = vertex_enumerate(U)
    image_pts = spec.alpha - effort_vertices @ spec.drift_matrix().T
    image = convex_hull(image_pts)
    cone = contingent_cone(x)
    A_cone, b_cone = cone.halfspaces()
    merged = Polytope(np.vstack([image.A, A_cone]), np.concatenate([image.b, b_cone]),
                      image.E, image.f)
    verts = vertex_enumerate(merged)
    if not len(verts):
        raise EmptyVelocitySet(f"no admissible velocity at state {x}")
    return Polytope(merged.A, merged.b, merged.E, merged.f, vertices=verts)


class SetValuedDynamics:
    """Interface for state-to-velocity-polytope maps used by the simulator."""

    dim: int
    lipschitz: float
    clamp_to_orthant: bool = True

    def velocity_set(self, x: np.ndarray) -> Polytope:
        raise NotImplementedError

    def pattern(self, x: np.ndarray):
        """Hashable key under which ``velocity_set`` is constant, or None."""
        return None


class NetworkDynamics(SetValuedDynamics):
    """Velocity sets of a validated fluid network.

    The velocity polytope depends on the state only through which stations
    are busy and which coordinates are drained, which is what ``pattern``
    exposes for memoization by callers.
    """

    def __init__(self, spec: FluidNetworkSpec):
        if spec.lipschitz is None:
            spec = validate_network(spec)
        self.spec = spec
        self.dim = spec.classes
        self.lipschitz = float(spec.lipschitz)
        self.clamp_to_orthant = True

    def velocity_set(self, x: np.ndarray) -> Polytope:
        return rhs_set(self.spec, x)

    def pattern(self, x: np.ndarray):
        x = np.asarray(x, dtype=float).reshape(-1)
        tol = activity_tol(x)
        busy = tuple(bool(v) for v in self.spec.constituency @ x > tol)
        active = tuple(bool(v) for v in x <= tol)
        return busy, active


class CallableMap(SetValuedDynamics):
    """Wrap an arbitrary ``x -> Polytope`` function as dynamics.

    Used for hand-built set-valued maps in probes and tracking experiments.
    No pattern key is exposed, so callers evaluate the map at every state.
    """

    def __init__(self, fn: Callable[[np.ndarray], Polytope], dim: int,
                 lipschitz: float, clamp_to_orthant: bool = True):
        self.fn = fn
        self.dim = int(dim)
        self.lipschitz = float(lipschitz)
        self.clamp_to_orthant = clamp_to_orthant

    def velocity_set(self, x: np.ndarray) -> Polytope:
        return self.fn(np.asarray(x, dtype=float).reshape(-1))


def as_dynamics(model) -> SetValuedDynamics:
    """Coerce a network spec or dynamics object to the common interface."""
    if isinstance(model, SetValuedDynamics):
        return model
    if isinstance(model, FluidNetworkSpec):
        return NetworkDynamics(model)
    raise TypeError(f"cannot interpret {type(model).__name__} as dynamics")


@dataclass(frozen=True)
class UscReport:
    """Outcome of a graph-closedness probe at a single point.

    ``witness`` is a velocity that limit points of nearby velocity sets can
    reach but the set at ``point`` cannot; its presence demonstrates that the
    map fails upper semicontinuity there.  ``passed`` means no witness was
    found among the probed candidates.
    """

    point: np.ndarray
    passed: bool
    witness: np.ndarray | None
    witness_distance: float
    candidates: int

    def to_dict(self) -> dict:
        return {
            "point": self.point.tolist(),
            "passed": self.passed,
            "witness": None if self.witness is None else self.witness.tolist(),
            "witness_distance": self.witness_distance,
            "candidates": self.candidates,
        }


def usc_probe(model, x, sequence: Sequence, tol: float = 1e-6) -> UscReport:
    """Hunt for upper-semicontinuity failures along a convergent sequence.

    For each vertex of the velocity set at the last sequence point, chase its
    nearest-vertex chain back through the sets at every ``x_k``.  A chain that
    settles (its tail barely moves) while staying far from the set at ``x``
    is a witness against graph closedness.  The tail-motion guard keeps maps
    whose vertices genuinely slide toward the limit set, which are closed,
    from producing false witnesses.
    """
    dyn = as_dynamics(model)
    x = np.asarray(x, dtype=float).reshape(-1)
    seq = [np.asarray(p, dtype=float).reshape(-1) for p in sequence]
    if not seq:
        raise SequenceNotConverging("empty probe sequence")
    dists = [float(np.linalg.norm(p - x)) for p in seq]
    scale = 1.0 + float(np.linalg.norm(x))
    if dists[-1] > 0.05 * scale or dists[-1] > dists[0] + FEASIBILITY_TOL:
        raise SequenceNotConverging(
            f"sequence tail is {dists[-1]:.3g} from the probe point (start {dists[0]:.3g})")

    limit_set = dyn.velocity_set(x)
    vertex_sets = [vertex_enumerate(dyn.velocity_set(p)) for p in seq]
    vertex_sets = [verts for verts in vertex_sets if len(verts)]
    if not vertex_sets:
        raise EmptyVelocitySet("no velocity vertices anywhere along the probe sequence")
    candidates = vertex_sets[-1]

    best_witness, best_dist = None, 0.0
    for cand in candidates:
        chain = [verts[np.argmin(np.linalg.norm(verts - cand, axis=1))]
                 for verts in vertex_sets]
        tail_motion = float(np.linalg.norm(chain[-1] - chain[len(chain) // 2]))
        limit_dist = float(np.linalg.norm(chain[-1] - nearest_point(limit_set, chain[-1])))
        if limit_dist > max(tol, 4.0 * tail_motion) and limit_dist > best_dist:
            best_witness, best_dist = chain[-1], limit_dist
    return UscReport(point=x, passed=best_witness is None, witness=best_witness,
                     witness_distance=best_dist, candidates=len(candidates))
