"""Neighbor tracking, deviation ratios, and the Filippov bound."""

import json
import math

import numpy as np
import pytest

from lyapforge.neighbor import (
    NeighborReport,
    StartOutsideOrthant,
    filippov_bound,
    track_neighbor,
    verify_assumption_a,
)
from lyapforge.network import CallableMap, convex_hull, single_station, validate_network
from lyapforge.trajectory import MinNormRule, Trajectory, simulate

H = 1e-3


@pytest.fixture(scope="module")
def station():
    return validate_network(single_station())


@pytest.fixture(scope="module")
def ref_from_two(station):
    return simulate(station, [2.0], step=H, horizon=3.0, rule=MinNormRule())


@pytest.fixture(scope="module")
def ref_from_zero(station):
    return simulate(station, [0.0], step=H, horizon=2.0, rule=MinNormRule())


class TestFilippovBound:
    def test_anchor_values(self):
        assert filippov_bound(1.0, 0.0) == 0.0
        assert filippov_bound(1.0, math.log(2.0)) == pytest.approx(1.0, rel=1e-12)

    def test_small_time_slope_is_lipschitz_constant(self):
        t = 1e-8
        assert filippov_bound(2.0, t) / t == pytest.approx(2.0, rel=1e-6)

    def test_vectorized_monotone_convex(self):
        t = np.linspace(0.0, 2.0, 101)
        c = filippov_bound(1.0, t)
        assert np.all(np.diff(c) >= 0.0)
        assert np.all(np.diff(c, 2) >= -1e-12)

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            filippov_bound(0.0, 1.0)
        with pytest.raises(ValueError):
            filippov_bound(1.0, -0.5)


class TestTrackNeighbor:
    def test_zero_perturbation_reproduces_reference(self, station, ref_from_two):
        psi = track_neighbor(station, ref_from_two, [0.0])
        assert np.allclose(psi.samples, ref_from_two.samples, atol=1e-12)

    def test_start_outside_orthant_rejected(self, station, ref_from_two):
        with pytest.raises(StartOutsideOrthant):
            track_neighbor(station, ref_from_two, [2.5])

    def test_dimension_mismatch_rejected(self, station, ref_from_two):
        with pytest.raises(ValueError):
            track_neighbor(station, ref_from_two, [0.1, 0.2])

    def test_drained_neighbor_matches_closed_form(self, station, ref_from_two):
        psi = track_neighbor(station, ref_from_two, [0.5])
        t = psi.times
        expected = np.maximum(1.5 - t, 0.0)
        assert np.max(np.abs(psi.samples[:, 0] - expected)) <= 2 * 3.0 * H
        # deviation vanishes while both paths drain in lockstep
        before = t <= 1.5 - H
        dev = ref_from_two.samples[before, 0] - 0.5 - psi.samples[before, 0]
        assert np.max(np.abs(dev)) <= 1e-12

    def test_zero_start_negative_perturbation(self, station, ref_from_zero):
        psi = track_neighbor(station, ref_from_zero, [-0.5])
        t = psi.times
        expected = np.maximum(0.5 - t, 0.0)
        assert np.max(np.abs(psi.samples[:, 0] - expected)) <= 2 * 3.0 * H

    def test_tracked_path_is_valid_trajectory(self, station, ref_from_two):
        psi = track_neighbor(station, ref_from_two, [-0.25])
        assert isinstance(psi, Trajectory)
        assert psi.lipschitz > 0
        assert np.all(psi.samples >= 0.0)
        assert psi.horizon == pytest.approx(ref_from_two.horizon)


class TestAssumptionA:
    def test_draining_reference_linear_bound(self, station, ref_from_two):
        ys = [[0.5], [-0.5], [0.25], [-0.25], [1.0]]
        report = verify_assumption_a(station, ref_from_two, ys, 3.0,
                                     c=lambda t: t / 2.0, c_tag="t/phi0")
        assert report.passed
        assert report.worst_margin <= 1e-3
        assert report.c_tag == "t/phi0"

    def test_zero_start_log_bound(self, station, ref_from_zero):
        report = verify_assumption_a(station, ref_from_zero, [[-0.5]], 2.0,
                                     c=lambda t: math.log(t + math.e),
                                     c_tag="log(t+e)")
        assert report.passed
        # deviation form of the same inequality
        deviation = report.ratios[0] * 0.5
        assert np.all(deviation <= np.log(report.times + math.e) * 0.5 + 1e-3)

    def test_too_tight_bound_fails(self, station, ref_from_two):
        report = verify_assumption_a(station, ref_from_two, [[1.0]], 3.0,
                                     c=lambda t: t / 10.0, c_tag="t/10")
        assert not report.passed
        assert report.worst_margin > 1e-3

    def test_slope_samples_positive_and_finite(self, station, ref_from_two):
        report = verify_assumption_a(station, ref_from_two, [[0.5]], 3.0,
                                     c=lambda t: t / 2.0, c_tag="t/phi0")
        assert len(report.c_slopes) == 3
        for s in report.c_slopes:
            assert math.isfinite(s) and s > 0.0

    def test_zero_perturbation_rejected(self, station, ref_from_two):
        with pytest.raises(ValueError):
            verify_assumption_a(station, ref_from_two, [[0.0]], 3.0,
                                c=lambda t: t, c_tag="t")

    def test_horizon_beyond_reference_rejected(self, station, ref_from_two):
        with pytest.raises(ValueError):
            verify_assumption_a(station, ref_from_two, [[0.5]], 4.0,
                                c=lambda t: t, c_tag="t")

    def test_report_serialization(self, station, ref_from_two, tmp_path):
        report = verify_assumption_a(station, ref_from_two, [[0.5], [-0.5]], 3.0,
                                     c=lambda t: t / 2.0, c_tag="t/phi0")
        summary = tmp_path / "summary.json"
        table = tmp_path / "ratios.csv"
        report.dump_summary(summary)
        report.dump_csv(table)
        data = json.loads(summary.read_text())
        assert set(data) == {"pass", "worst_margin", "c_tag"}
        assert data["pass"] is True
        lines = table.read_text().strip().split("\n")
        assert lines[0] == "y_index,t,ratio,bound,margin"
        assert len(lines) == 1 + 2 * len(report.times)
        first = lines[1].split(",")
        assert int(first[0]) == 0
        assert float(first[2]) - float(first[3]) == pytest.approx(float(first[4]))


@pytest.fixture(scope="module")
def soft_drain():
    def rhs(x):
        pull = min(float(x[0]), 1.0)
        return convex_hull(np.array([[-pull], [-pull / 2.0]]))

    return CallableMap(rhs, dim=1, lipschitz=1.0)


class TestLipschitzMapGronwall:
    def test_tracked_ratios_stay_under_exponential(self, soft_drain):
        ref = simulate(soft_drain, [2.0], step=2e-3, horizon=2.0, rule=MinNormRule())
        rng = np.random.default_rng(3)
        ys = [[s * m] for s, m in zip(np.resize([1.0, -1.0], 10),
                                      rng.uniform(0.05, 0.5, size=10))]
        report = verify_assumption_a(soft_drain, ref, ys, 2.0,
                                     c=lambda t: filippov_bound(1.0, t),
                                     c_tag="filippov:L=1", tol=1e-2)
        assert report.passed
        assert report.worst_margin <= 1e-2

    def test_discrete_gronwall_is_exact_cap(self, soft_drain):
        # one-step errors compound at (1 + hL) per step, below exp(Lt) - 1
        h, L, k = 2e-3, 1.0, 700
        discrete = (1.0 + h * L) ** k - 1.0
        assert discrete <= filippov_bound(L, h * k)
