"""Lyapunov candidates built from drain integrals, stored on grids.

The canonical candidate assigns to each state the worst accumulated norm
along admissible paths until the certified drain time: V(x) is the largest
value of the integral of |phi| over [0, tau |x|] over the sampled selection
rules.  Values live on regular grids (ScalarField) so they can be extended
evenly across the origin, mollified, and glued later.  Decrease is checked
two ways: an integral form along trajectories that needs no derivatives,
and a differential form for smoothed fields using symmetric difference
quotients.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from functools import cached_property
from itertools import product

import numpy as np

from .network import as_dynamics
from .reports import MarginReport, from_margins
from .stability import StabilityCertificate
from .trajectory import SelectionRule, Trajectory, default_rule_set, simulate

_trapz = getattr(np, "trapezoid", None) or np.trapz


class OutsideBox(ValueError):
    """A query point left the field's grid box."""


class AsymmetricGrid(ValueError):
    """Even extension needs every axis to start exactly at zero."""


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Scalar values on a regular grid with multilinear interpolation.

    ``values[i1, ..., in]`` sits at ``lo + spacing * (i1, ..., in)``.
    ``smooth`` marks fields produced by mollification (or analytically
    smooth tabulations) whose difference quotients are trustworthy.
    """

    lo: np.ndarray
    hi: np.ndarray
    spacing: np.ndarray
    values: np.ndarray
    name: str = "field"
    smooth: bool = False

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        spacing = np.atleast_1d(np.asarray(self.spacing, dtype=float))
        if spacing.size == 1 and lo.size > 1:
            spacing = np.full(lo.size, spacing[0])
        values = np.asarray(self.values, dtype=float)
        if values.ndim != lo.size:
            raise ValueError(f"values have {values.ndim} axes for a {lo.size}-d box")
        if np.any(spacing <= 0):
            raise ValueError("grid spacing must be positive")
        expect = lo + spacing * (np.array(values.shape) - 1)
        if np.any(np.abs(expect - hi) > 1e-9 * np.maximum(1.0, np.abs(hi))):
            raise ValueError("hi does not sit on the grid implied by lo and spacing")
        if min(values.shape) < 2:
            raise ValueError("each axis needs at least two nodes")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", expect)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.lo.size

    def axes(self) -> list[np.ndarray]:
        return [self.lo[a] + self.spacing[a] * np.arange(self.values.shape[a])
                for a in range(self.dim)]

    def nodes(self) -> np.ndarray:
        """All grid nodes as an (M, n) array in C order."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack(mesh, axis=-1).reshape(-1, self.dim)

    def _locate(self, X: np.ndarray):
        pos = (X - self.lo) / self.spacing
        slack = 1e-9 * np.maximum(1.0, (self.hi - self.lo) / self.spacing)
        top = np.array(self.values.shape) - 1.0
        if np.any(pos < -slack) or np.any(pos > top + slack):
            bad = X[np.any((pos < -slack) | (pos > top + slack), axis=1)][0]
            raise OutsideBox(f"point {bad.tolist()} is outside the field box")
        pos = np.clip(pos, 0.0, top)
        base = np.minimum(pos.astype(int), (top - 1).astype(int))
        return base, pos - base

    def _interpolate(self, grid: np.ndarray, X: np.ndarray) -> np.ndarray:
        base, frac = self._locate(X)
        out = np.zeros(len(X))
        for corner in product((0, 1), repeat=self.dim):
            weight = np.ones(len(X))
            for a, bit in enumerate(corner):
                weight *= frac[:, a] if bit else 1.0 - frac[:, a]
            idx = tuple((base[:, a] + corner[a]) for a in range(self.dim))
            out += weight * grid[idx]
        return out

    def value(self, X):
        """Multilinear interpolation; accepts one point or a batch."""
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        out = self._interpolate(self.values, X)
        return float(out[0]) if single else out

    @cached_property
    def _grad_grids(self) -> tuple:
        if self.dim == 1:
            return (np.gradient(self.values, self.spacing[0]),)
        return tuple(np.gradient(self.values, *self.spacing))

    def gradient(self, X):
        """Central-difference gradient grids, interpolated like the values."""
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        out = np.stack([self._interpolate(g, X) for g in self._grad_grids], axis=-1)
        return out[0] if single else out


def tabulate(fn, lo, hi, spacing, name: str = "field", smooth: bool = False) -> ScalarField:
    """Sample a vectorized function of (M, n) batches onto a grid."""
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    spacing = np.atleast_1d(np.asarray(spacing, dtype=float))
    if spacing.size == 1 and lo.size > 1:
        spacing = np.full(lo.size, spacing[0])
    shape = tuple(int(round((hi[a] - lo[a]) / spacing[a])) + 1 for a in range(lo.size))
    hi = lo + spacing * (np.array(shape) - 1)
    axes = [lo[a] + spacing[a] * np.arange(shape[a]) for a in range(lo.size)]
    nodes = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, lo.size)
    values = np.asarray(fn(nodes), dtype=float).reshape(shape)
    return ScalarField(lo, hi, spacing, values, name=name, smooth=smooth)


def norm_field(lo, hi, spacing, name: str = "W") -> ScalarField:
    """The default decrease rate: W(x) = |x|."""
    return tabulate(lambda X: np.linalg.norm(X, axis=1), lo, hi, spacing, name=name)


def value_function(model, cert: StabilityCertificate, x,
                   rules: list[SelectionRule] | None = None,
                   step: float = 1e-3) -> float:
    """Accumulated norm until the certified drain time, worst rule wins.

    Integrates |phi| over [0, tau |x|] by the trapezoid rule along each
    sampled selection and returns the maximum.  Zero at the origin by
    construction.
    """
    dyn = as_dynamics(model)
    x = np.asarray(x, dtype=float).reshape(-1)
    norm0 = float(np.linalg.norm(x))
    if norm0 == 0.0:
        return 0.0
    horizon = cert.tau * norm0
    if rules is None:
        rules = default_rule_set(dyn)
    best = 0.0
    for rule in rules:
        tr = simulate(dyn, x, step, horizon, rule)
        best = max(best, float(_trapz(tr.norms(), dx=step)))
    return best


def tabulate_value_function(model, cert: StabilityCertificate, lo, hi, spacing,
                            rules: list[SelectionRule] | None = None,
                            step: float = 1e-3, name: str = "V") -> ScalarField:
    """Tabulate :func:`value_function` on a grid (orthant boxes only)."""
    dyn = as_dynamics(model)
    if rules is None:
        rules = default_rule_set(dyn)

    def batch(nodes):
        return np.array([value_function(dyn, cert, x, rules=rules, step=step)
                         for x in nodes])

    field = tabulate(batch, lo, hi, spacing, name=name)
    return field


def extend_even(field: ScalarField) -> ScalarField:
    """Reflect a field on [0, b]^n across every axis to [-b, b]^n.

    The source grid must start exactly at zero on each axis so the mirror
    image lands on grid nodes.
    """
    if np.any(np.abs(field.lo) > 1e-12):
        raise AsymmetricGrid(f"grid starts at {field.lo.tolist()}, expected the origin")
    values = field.values
    for a in range(field.dim):
        head = np.flip(values, axis=a)
        head = np.take(head, np.arange(values.shape[a] - 1), axis=a)
        values = np.concatenate([head, values], axis=a)
    return ScalarField(-field.hi, field.hi, field.spacing, values,
                       name=f"{field.name}_even", smooth=False)


def dini_subderivative(field: ScalarField, x, direction,
                       eps_ladder=(0.2, 0.1, 0.05, 0.025),
                       jitter: float = 1e-3) -> float:
    """Lower directional difference quotient estimate.

    Minimizes (f(x + eps d') - f(x)) / eps over the epsilon ladder and a
    small bundle of directions around ``direction``.  A finite sample of an
    infimum, so this is an upper estimate of the true lower derivative.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    d = np.asarray(direction, dtype=float).reshape(-1)
    bundle = [d]
    for a in range(x.size):
        e = np.zeros(x.size)
        e[a] = jitter
        bundle.extend([d + e, d - e])
    f0 = field.value(x)
    best = np.inf
    for eps in eps_ladder:
        for dd in bundle:
            best = min(best, (field.value(x + eps * dd) - f0) / eps)
    return float(best)


def verify_integral_decrease(v_field: ScalarField, w_field: ScalarField,
                             tr: Trajectory, tol: float = 5e-3) -> MarginReport:
    """Check V(phi(t)) - V(phi(s)) <= -int_s^t W(phi) for all grid s <= t.

    Equivalent to requiring g(t) = V(phi(t)) + int_0^t W(phi) to be
    nonincreasing, so the margin at t is g(t) minus its running minimum.
    """
    V = v_field.value(tr.samples)
    W = w_field.value(tr.samples)
    accumulated = np.concatenate([[0.0], np.cumsum((W[1:] + W[:-1]) * tr.step / 2.0)])
    g = V + accumulated
    margins = g - np.minimum.accumulate(g)
    return from_margins("integral_decrease", margins, tol, locations=tr.times)


def verify_differential_decrease(v_field: ScalarField, w_field: ScalarField,
                                 tr: Trajectory, tol: float = 1e-2) -> MarginReport:
    """Check dV/dt <= -W along a path by symmetric difference quotients.

    Only meaningful for smooth fields; raw drain integrals have corners
    where the quotient underestimates one-sided slopes.
    """
    if not v_field.smooth:
        raise ValueError("differential decrease needs a smooth (mollified) field")
    V = v_field.value(tr.samples)
    quotient = (V[2:] - V[:-2]) / (2.0 * tr.step)
    margins = quotient + w_field.value(tr.samples[1:-1])
    return from_margins("differential_decrease", margins, tol, locations=tr.times[1:-1])


def dump_field(field: ScalarField, path) -> None:
    """Write nodes and values as CSV plus a JSON sidecar (<path>.json)."""
    nodes = field.nodes()
    flat = field.values.reshape(-1)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i + 1}" for i in range(field.dim)] + ["value"])
        for point, val in zip(nodes, flat):
            writer.writerow([f"{c:.11e}" for c in point] + [f"{val:.11e}"])
    sidecar = {
        "box": {"lo": field.lo.tolist(), "hi": field.hi.tolist()},
        "spacing": field.spacing.tolist(),
        "tag": field.name,
        "smooth": field.smooth,
    }
    with open(f"{path}.json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_field(path) -> ScalarField:
    with open(f"{path}.json") as fh:
        sidecar = json.load(fh)
    lo = np.asarray(sidecar["box"]["lo"], dtype=float)
    hi = np.asarray(sidecar["box"]["hi"], dtype=float)
    spacing = np.asarray(sidecar["spacing"], dtype=float)
    shape = tuple(int(round((hi[a] - lo[a]) / spacing[a])) + 1 for a in range(lo.size))
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    values = data[:, -1].reshape(shape)
    return ScalarField(lo, hi, spacing, values,
                       name=sidecar["tag"], smooth=bool(sidecar["smooth"]))
