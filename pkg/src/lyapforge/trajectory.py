"""Piecewise-linear trajectories of set-valued dynamics.

A trajectory is a uniformly sampled path that never leaves the nonnegative
orthant and moves no faster than its declared Lipschitz constant.  Paths are
produced by explicit Euler stepping with a per-step velocity chosen from the
admissible polytope by a selection rule, and the space of paths carries the
usual bounded-horizon metric: weighted sup distances over [0, N] for
N = 1, 2, ..., folded through x/(1+x) and a 2^-N taper.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .network import Polytope, as_dynamics, nearest_point, vertex_enumerate
from .reports import MarginReport, from_margins

# Relative slack on the per-step Lipschitz bound; absorbs clamp rounding.
LIPSCHITZ_SLACK = 1e-6
# States may carry this much negative float dust and still count as orthant.
ORTHANT_SLACK = 1e-12


class HorizonTooShort(ValueError):
    """The trajectory does not extend far enough for the requested window."""


class ShiftBeyondHorizon(ValueError):
    """A time shift exceeds the trajectory horizon."""


class EndpointMismatch(ValueError):
    """Concatenation endpoints disagree beyond tolerance."""


class IllegalClamp(RuntimeError):
    """Euler step tried to clamp a coordinate that was not near zero."""


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Uniformly sampled path with step ``step`` and samples ``(K+1, n)``.

    Construction enforces the two path-space invariants: samples stay in the
    orthant (up to float dust) and consecutive samples move at most
    ``lipschitz * step`` apart (small relative slack).
    """

    step: float
    samples: np.ndarray
    lipschitz: float

    def __post_init__(self):
        samples = np.atleast_2d(np.asarray(self.samples, dtype=float))
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "step", float(self.step))
        object.__setattr__(self, "lipschitz", float(self.lipschitz))
        if self.step <= 0:
            raise ValueError("step must be positive")
        if samples.min(initial=0.0) < -ORTHANT_SLACK:
            raise ValueError(f"samples leave the orthant: min {samples.min():.3g}")
        if len(samples) > 1:
            inc = np.linalg.norm(np.diff(samples, axis=0), axis=1)
            bound = self.lipschitz * self.step * (1.0 + LIPSCHITZ_SLACK)
            if inc.max() > bound:
                raise ValueError(
                    f"step increment {inc.max():.6g} exceeds Lipschitz bound {bound:.6g}")

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    @property
    def horizon(self) -> float:
        return (len(self.samples) - 1) * self.step

    @property
    def times(self) -> np.ndarray:
        return self.step * np.arange(len(self.samples))

    def value_at(self, t):
        """Linear interpolation between samples; t may be scalar or array."""
        t = np.asarray(t, dtype=float)
        idx = np.clip(t / self.step, 0.0, len(self.samples) - 1.0)
        k = np.minimum(idx.astype(int), len(self.samples) - 2) if len(self.samples) > 1 \
            else np.zeros_like(idx, dtype=int)
        w = idx - k
        out = (1.0 - w)[..., None] * self.samples[k] + w[..., None] * self.samples[k + 1] \
            if len(self.samples) > 1 else self.samples[k]
        return out

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.samples, axis=1)


class SelectionRule:
    """Picks one velocity from each admissible polytope.

    ``time_invariant`` rules depend only on the polytope, so simulation may
    reuse the choice whenever the polytope repeats.
    """

    time_invariant = True

    def select(self, poly: Polytope, t: float) -> np.ndarray:
        raise NotImplementedError

    def describe(self) -> str:
        return type(self).__name__


class MinNormRule(SelectionRule):
    """Least-speed admissible velocity (projection of the origin)."""

    def select(self, poly, t):
        return nearest_point(poly, np.zeros(poly.dim))

    def describe(self):
        return "min_norm"


class VertexRule(SelectionRule):
    """Fixed extreme velocity, indexed into the sorted vertex list.

    The index wraps modulo the vertex count so one rule family applies
    across states whose velocity sets have different numbers of corners.
    """

    def __init__(self, index: int):
        self.index = int(index)

    def select(self, poly, t):
        verts = vertex_enumerate(poly)
        return verts[self.index % len(verts)]

    def describe(self):
        return f"vertex:{self.index}"


class NearestTo(SelectionRule):
    """Velocity closest to a target, either fixed or a function of time."""

    def __init__(self, target):
        self.target = target
        self.time_invariant = not callable(target)

    def select(self, poly, t):
        goal = self.target(t) if callable(self.target) else self.target
        return nearest_point(poly, np.asarray(goal, dtype=float))

    def describe(self):
        return "nearest_to:path" if callable(self.target) else \
            f"nearest_to:{np.asarray(self.target).tolist()}"


def rule_from_name(name: str) -> SelectionRule:
    """Parse 'min_norm' or 'vertex:<k>' into a rule (CLI convenience)."""
    if name == "min_norm":
        return MinNormRule()
    if name.startswith("vertex:"):
        return VertexRule(int(name.split(":", 1)[1]))
    raise ValueError(f"unknown selection rule {name!r}")


def default_rule_set(model, probe_states=None) -> list[SelectionRule]:
    """Min-norm plus one vertex rule per corner of the richest probed set.

    Extreme velocities bound the reachable tube, so sweeping every vertex
    index alongside the min-norm choice covers the interesting selections.
    """
    dyn = as_dynamics(model)
    n = dyn.dim
    if probe_states is None:
        probe_states = [np.zeros(n), np.ones(n)] + [row for row in np.eye(n)]
    count = 1
    for x in probe_states:
        verts = vertex_enumerate(dyn.velocity_set(np.asarray(x, dtype=float)))
        count = max(count, len(verts))
    return [MinNormRule()] + [VertexRule(i) for i in range(count)]


def simulate(model, x0, step: float, horizon: float,
             rule: SelectionRule | None = None) -> Trajectory:
    """Explicit Euler path of a set-valued model from ``x0``.

    Each step takes the rule's velocity from the admissible set at the
    current state.  When the model lives in the orthant, coordinates that
    would cross zero are clamped to it; clamping is only legal for
    coordinates already within one step's travel of zero, anything else
    means the velocity set violated the orthant cone and raises
    :class:`IllegalClamp`.  Velocity sets repeat whenever the model's
    activity pattern repeats, so selections are memoized per pattern.
    """
    dyn = as_dynamics(model)
    rule = rule or MinNormRule()
    x = np.asarray(x0, dtype=float).reshape(-1).copy()
    if x.size != dyn.dim:
        raise ValueError(f"start has dimension {x.size}, model expects {dyn.dim}")
    steps = int(np.ceil(horizon / step - 1e-9))
    L = dyn.lipschitz
    clamp_band = L * step * (1.0 + LIPSCHITZ_SLACK)

    poly_cache: dict = {}
    choice_cache: dict = {}
    out = np.empty((steps + 1, x.size))
    out[0] = x
    for k in range(steps):
        key = dyn.pattern(x)
        if key is not None and key in poly_cache:
            poly = poly_cache[key]
        else:
            poly = dyn.velocity_set(x)
            if key is not None:
                poly_cache[key] = poly
        if rule.time_invariant and key is not None:
            v = choice_cache.get(key)
            if v is None:
                v = np.asarray(rule.select(poly, k * step), dtype=float)
                choice_cache[key] = v
        else:
            v = np.asarray(rule.select(poly, k * step), dtype=float)
        nxt = x + step * v
        if dyn.clamp_to_orthant and (nxt < 0.0).any():
            low = nxt < 0.0
            if (x[low] > clamp_band).any():
                raise IllegalClamp(
                    f"step {k}: coordinate at {x[low].max():.6g} would cross zero "
                    f"but is not within {clamp_band:.3g} of it")
            nxt[low] = 0.0
        x = nxt
        out[k + 1] = x
    return Trajectory(step=step, samples=out, lipschitz=L)


def scale(tr: Trajectory, r: float) -> Trajectory:
    """Path ``t -> tr(r t) / r`` on the same step grid (horizon shrinks by r).

    Interpolates the source linearly; the Lipschitz constant is preserved
    because time and space are stretched by the same factor.
    """
    if r <= 0:
        raise ValueError("scale factor must be positive")
    steps = int(np.floor(tr.horizon / (r * tr.step) + 1e-9))
    t = tr.step * np.arange(steps + 1)
    return Trajectory(step=tr.step, samples=tr.value_at(r * t) / r, lipschitz=tr.lipschitz)


def shift(tr: Trajectory, t: float) -> Trajectory:
    """Path ``s -> tr(t + s)`` on the same grid, cut at the old horizon."""
    if t < -1e-12 or t > tr.horizon + 1e-12:
        raise ShiftBeyondHorizon(f"shift {t:.6g} outside [0, {tr.horizon:.6g}]")
    t = min(max(t, 0.0), tr.horizon)
    steps = int(np.floor((tr.horizon - t) / tr.step + 1e-9))
    times = t + tr.step * np.arange(steps + 1)
    return Trajectory(step=tr.step, samples=tr.value_at(times), lipschitz=tr.lipschitz)


def concat(tr1: Trajectory, tr2: Trajectory, t_star: float,
           tol: float = 1e-8) -> Trajectory:
    """Follow ``tr1`` until ``t_star``, then continue along ``tr2``.

    ``t_star`` must sit on the step grid of ``tr1`` and the handoff states
    must agree within ``tol``.
    """
    if abs(tr1.step - tr2.step) > 1e-15:
        raise ValueError("concatenation requires equal step sizes")
    k = int(round(t_star / tr1.step))
    if abs(k * tr1.step - t_star) > 1e-9 or k < 0 or k >= len(tr1.samples):
        raise ValueError(f"t_star {t_star:.6g} is not on the step grid")
    gap = float(np.linalg.norm(tr1.samples[k] - tr2.samples[0]))
    if gap > tol:
        raise EndpointMismatch(f"states differ by {gap:.3g} at the junction (tol {tol:.3g})")
    samples = np.vstack([tr1.samples[:k], tr2.samples])
    L = max(tr1.lipschitz, tr2.lipschitz)
    if k > 0:
        junction = float(np.linalg.norm(tr2.samples[0] - tr1.samples[k - 1])) / tr1.step
        L = max(L, junction / (1.0 + LIPSCHITZ_SLACK))
    return Trajectory(step=tr1.step, samples=samples, lipschitz=L)


def zero_trajectory(dim: int, step: float, horizon: float,
                    lipschitz: float = 0.0) -> Trajectory:
    steps = int(np.ceil(horizon / step - 1e-9))
    return Trajectory(step=step, samples=np.zeros((steps + 1, dim)), lipschitz=lipschitz)


def metric_d(tr1: Trajectory, tr2: Trajectory, n_max: int = 8) -> float:
    """Bounded-horizon path distance.

    ``max_N 2^-N * |tr1 - tr2|_N / (1 + |tr1 - tr2|_N)`` for N = 1..n_max,
    where the inner norm is the sup over the union of sample times in
    [0, N].  Both paths must reach N_max.
    """
    if n_max < 1:
        raise ValueError("n_max must be at least 1")
    if tr1.horizon < n_max - 1e-9 or tr2.horizon < n_max - 1e-9:
        raise HorizonTooShort(
            f"metric over [0, {n_max}] needs horizons >= {n_max}, "
            f"got {tr1.horizon:.6g} and {tr2.horizon:.6g}")
    grid = np.union1d(tr1.times, tr2.times)
    grid = grid[grid <= n_max + 1e-12]
    gaps = np.linalg.norm(tr1.value_at(grid) - tr2.value_at(grid), axis=1)
    best = 0.0
    for N in range(1, n_max + 1):
        r = float(gaps[grid <= N + 1e-12].max(initial=0.0))
        best = max(best, 2.0 ** (-N) * r / (1.0 + r))
    return best


def distance_to_zero(tr: Trajectory, n_max: int = 8) -> float:
    """Path distance to the rest trajectory at the origin."""
    return metric_d(tr, zero_trajectory(tr.dim, tr.step, max(tr.horizon, n_max)), n_max)


def sup_norm(tr: Trajectory, upto: float | None = None) -> float:
    """Largest state norm on [0, upto] (whole horizon when upto is None)."""
    norms = tr.norms()
    if upto is not None:
        norms = norms[tr.times <= upto + 1e-12]
    return float(norms.max(initial=0.0))


def lipschitz_check(tr: Trajectory, lipschitz: float | None = None) -> MarginReport:
    """Report the worst per-step speed against a candidate Lipschitz bound."""
    L = tr.lipschitz if lipschitz is None else float(lipschitz)
    if len(tr.samples) < 2:
        return MarginReport("lipschitz", True, -np.inf, 0.0)
    speed = np.linalg.norm(np.diff(tr.samples, axis=0), axis=1) / tr.step
    margins = speed - L
    return from_margins("lipschitz", margins, tolerance=L * LIPSCHITZ_SLACK,
                        locations=tr.times[:-1])


def dump_trajectory(tr: Trajectory, path) -> None:
    """Write ``t,x1,...,xn`` rows with 12 significant digits."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"x{i + 1}" for i in range(tr.dim)])
        for t, row in zip(tr.times, tr.samples):
            writer.writerow([f"{t:.11e}"] + [f"{v:.11e}" for v in row])


def load_trajectory(path, lipschitz: float | None = None) -> Trajectory:
    """Read a trajectory written by :func:`dump_trajectory`.

    The Lipschitz constant is not stored in the CSV; pass one or accept the
    tightest bound consistent with the samples.
    """
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    times, samples = data[:, 0], data[:, 1:]
    if len(times) < 2:
        raise ValueError("trajectory file needs at least two samples")
    steps = np.diff(times)
    h = float(steps[0])
    if np.max(np.abs(steps - h)) > 1e-9 * max(1.0, h):
        raise ValueError("trajectory file is not uniformly sampled")
    if lipschitz is None:
        lipschitz = float(np.linalg.norm(np.diff(samples, axis=0), axis=1).max() / h)
    return Trajectory(step=h, samples=samples, lipschitz=lipschitz)
