"""Drain-time stability certificates.

A model is stable in the drain-time sense when one constant tau works for
every trajectory: starting anywhere, the path is identically zero after
tau times the starting norm.  The certificate produced here records the
smallest such tau observed over a family of sampled starts and selection
rules, together with the residual fluid left after the claimed drain time.
Two consequences of the definition double as consistency checks: the norm
envelope bound |phi(s+t)| <= L tau |phi(s)| and the path-space contraction
d(0, shift(phi, t)) <= ceil(L tau) d(0, phi).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .network import as_dynamics
from .reports import MarginReport, from_margins
from .trajectory import (
    HorizonTooShort,
    SelectionRule,
    Trajectory,
    default_rule_set,
    simulate,
)


class Unstable(RuntimeError):
    """Some sampled trajectory never drains and is not even decreasing."""


@dataclass(frozen=True)
class StabilityCertificate:
    """Uniform drain-time bound observed on a sample of trajectories.

    ``tau`` scales starting norm to drain time, ``max_residual`` is the
    largest state norm seen after the claimed drain times, and
    ``tolerance`` is the drain threshold the estimate used.  ``samples``
    lists the (start, rule, drain time) triples behind the bound.
    """

    tau: float
    lipschitz: float
    max_residual: float
    tolerance: float
    samples: tuple

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "lipschitz": self.lipschitz,
            "max_residual": self.max_residual,
            "samples": [dict(s) for s in self.samples],
        }

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def load_certificate(path) -> StabilityCertificate:
    with open(path) as fh:
        raw = json.load(fh)
    samples = tuple(tuple(sorted(s.items())) for s in raw["samples"])
    tol = max((dict(s).get("drain_tol", 0.0) for s in samples), default=0.0)
    return StabilityCertificate(tau=float(raw["tau"]), lipschitz=float(raw["lipschitz"]),
                                max_residual=float(raw["max_residual"]),
                                tolerance=tol, samples=samples)


def default_drain_tol(start_norm: float, lipschitz: float, step: float) -> float:
    """Threshold below which a state counts as drained.

    The state-relative part handles scale; the ``2 L h`` floor covers the
    one-step chatter that aggressive selections produce at the origin,
    which no grid path can undercut.
    """
    return max(1e-6 * (1.0 + start_norm), 2.0 * lipschitz * step)


def drain_time(tr: Trajectory, tol: float) -> float | None:
    """First grid time after which the path never exceeds ``tol``."""
    norms = tr.norms()
    suffix = np.maximum.accumulate(norms[::-1])[::-1]
    hits = np.flatnonzero(suffix <= tol)
    if not len(hits):
        return None
    return float(hits[0] * tr.step)


def sample_unit_starts(dim: int, count: int, seed: int = 0) -> np.ndarray:
    """Deterministic unit-norm starts spread over the nonnegative orthant."""
    rng = np.random.default_rng(seed)
    starts = np.abs(rng.normal(size=(count, dim)))
    starts /= np.linalg.norm(starts, axis=1, keepdims=True)
    return starts


def estimate_tau(model, starts, step: float, horizon: float,
                 rules: list[SelectionRule] | None = None,
                 drain_tol: float | None = None) -> StabilityCertificate:
    """Estimate the uniform drain-time constant over starts and rules.

    Every (start, rule) pair is simulated; tau is the largest drain time
    divided by the starting norm.  Raises :class:`Unstable` when a path
    neither drains nor shrinks over the horizon, and
    :class:`HorizonTooShort` when a path is still shrinking undrained, so
    a longer run could settle the question.
    """
    dyn = as_dynamics(model)
    if rules is None:
        rules = default_rule_set(dyn)
    runs = []
    growing, undecided = [], []
    for x0 in starts:
        x0 = np.asarray(x0, dtype=float).reshape(-1)
        norm0 = float(np.linalg.norm(x0))
        tol = drain_tol if drain_tol is not None else \
            default_drain_tol(norm0, dyn.lipschitz, step)
        for rule in rules:
            tr = simulate(dyn, x0, step, horizon, rule)
            td = drain_time(tr, tol)
            tag = f"start {np.round(x0, 6).tolist()} rule {rule.describe()}"
            if td is None:
                norms = tr.norms()
                if norms[-1] <= norms[0] - max(1e-9, 1e-6 * norms[0]):
                    undecided.append(tag)
                else:
                    growing.append(tag)
                continue
            runs.append((x0, rule, tr, td, norm0, tol))
    if growing:
        raise Unstable("no drain and no decrease for: " + "; ".join(growing))
    if undecided:
        raise HorizonTooShort("still draining at the horizon: " + "; ".join(undecided))

    tau = max(td / max(n0, 1e-300) for _, _, _, td, n0, _ in runs)
    residual = 0.0
    samples = []
    for x0, rule, tr, td, norm0, tol in runs:
        k = int(np.ceil(tau * norm0 / step - 1e-9))
        tail = tr.norms()[min(k, len(tr.samples) - 1):]
        residual = max(residual, float(tail.max(initial=0.0)))
        samples.append((("drain_time", td), ("drain_tol", tol),
                        ("rule", rule.describe()), ("start", x0.tolist())))
    tol_used = max(t for *_, t in runs)
    return StabilityCertificate(tau=tau, lipschitz=dyn.lipschitz,
                                max_residual=residual, tolerance=tol_used,
                                samples=tuple(samples))


def _zero_certified_tail(norms: np.ndarray, drain_tol: float) -> np.ndarray:
    """Treat everything past the drain point as exactly drained.

    Grid chatter below the certificate's resolution would otherwise defeat
    envelope checks whose slack is much finer than one Euler step.
    """
    suffix = np.maximum.accumulate(norms[::-1])[::-1]
    out = norms.copy()
    out[suffix <= drain_tol] = 0.0
    return out


def drain_envelope_margin(tr: Trajectory, cert: StabilityCertificate,
                          slack: float = 1e-6) -> MarginReport:
    """Check ``|phi(s+t)| <= L tau |phi(s)|`` along one trajectory.

    The left side is the running future sup; samples the certificate
    already counts as drained are zeroed first (see certificate
    ``tolerance``).
    """
    norms = _zero_certified_tail(tr.norms(), cert.tolerance)
    future = np.maximum.accumulate(norms[::-1])[::-1]
    margins = future - cert.lipschitz * cert.tau * norms
    return from_margins("drain_envelope", margins, tolerance=slack, locations=tr.times)


def distance_to_zero_fast(norms: np.ndarray, step: float, n_max: int) -> float:
    """Path distance to rest for a sampled path given its norm profile."""
    best = 0.0
    for N in range(1, n_max + 1):
        k = int(round(N / step))
        r = float(norms[: k + 1].max(initial=0.0))
        best = max(best, 2.0 ** (-N) * r / (1.0 + r))
    return best


def verify_epsilon_delta(tr: Trajectory, cert: StabilityCertificate,
                         n_max: int = 2, tol: float = 1e-6) -> MarginReport:
    """Shift contraction along one path: d(0, shift) <= ceil(L tau) d(0, .).

    Evaluated at every grid shift that still leaves an [0, n_max] window.
    """
    if tr.horizon < n_max - 1e-9:
        raise HorizonTooShort(f"need horizon >= {n_max}, got {tr.horizon:.6g}")
    factor = float(np.ceil(cert.lipschitz * cert.tau - 1e-12))
    norms = tr.norms()
    base = distance_to_zero_fast(norms, tr.step, n_max)
    window = int(round(n_max / tr.step))
    shifts = len(tr.samples) - 1 - window
    margins, times = [], []
    for k in range(max(shifts, 0) + 1):
        d = distance_to_zero_fast(norms[k:], tr.step, n_max)
        margins.append(d - factor * base)
        times.append(k * tr.step)
    return from_margins("shift_contraction", margins, tolerance=tol,
                        locations=np.asarray(times))
