"""Scalar fields, drain-integral candidates, and decrease checks."""

import numpy as np
import pytest

from lyapforge.network import CallableMap, convex_hull, single_station, validate_network
from lyapforge.lyapunov import (
    AsymmetricGrid,
    OutsideBox,
    ScalarField,
    dini_subderivative,
    dump_field,
    extend_even,
    load_field,
    norm_field,
    tabulate,
    tabulate_value_function,
    value_function,
    verify_differential_decrease,
    verify_integral_decrease,
)
from lyapforge.stability import estimate_tau, sample_unit_starts
from lyapforge.trajectory import MinNormRule, Trajectory, default_rule_set, simulate


@pytest.fixture(scope="module")
def station():
    return validate_network(single_station())


@pytest.fixture(scope="module")
def cert(station):
    return estimate_tau(station, sample_unit_starts(1, 4), step=1e-3, horizon=2.5)


def quadratic(X):
    return 0.5 * np.linalg.norm(X, axis=1) ** 2


class TestScalarField:
    def test_nodes_and_interpolation(self):
        f = tabulate(quadratic, [0.0, 0.0], [2.0, 2.0], 0.5)
        assert f.value([1.0, 1.0]) == pytest.approx(1.0)
        # Between nodes multilinear interpolation averages the corners.
        corners = [quadratic(np.array([[a, b]]))[0] for a in (0.0, 0.5) for b in (0.0, 0.5)]
        assert f.value([0.25, 0.25]) == pytest.approx(np.mean(corners))

    def test_outside_box(self):
        f = tabulate(quadratic, [0.0], [1.0], 0.25)
        with pytest.raises(OutsideBox):
            f.value([1.5])

    def test_gradient_matches_analytic_interior(self):
        f = tabulate(quadratic, [-2.0, -2.0], [2.0, 2.0], 0.1)
        rng = np.random.default_rng(4)
        X = rng.uniform(-1.5, 1.5, size=(40, 2))
        grads = f.gradient(X)
        # Central differences are exact for quadratics away from the edges;
        # the remaining error is the interpolation of the gradient grid.
        assert np.abs(grads - X).max() <= 0.06

    def test_grid_consistency_guard(self):
        with pytest.raises(ValueError, match="grid"):
            ScalarField(np.array([0.0]), np.array([1.0]), np.array([0.3]),
                        np.zeros(4))


class TestValueFunction:
    def test_zero_at_origin(self, station, cert):
        assert value_function(station, cert, [0.0]) == 0.0

    def test_quadratic_drain_law(self, station, cert):
        # Draining at unit net rate accumulates x^2/2 worth of norm.
        for x in (0.5, 1.0, 2.0):
            v = value_function(station, cert, [x])
            assert v == pytest.approx(0.5 * x * x, rel=1e-3)

    def test_scaling_square_law(self, station, cert):
        v1 = value_function(station, cert, [1.0])
        for r in (0.25, 2.0, 3.0):
            assert value_function(station, cert, [r]) == pytest.approx(r * r * v1, rel=1e-3)

    def test_tabulated_field_positive_definite_and_monotone(self, station, cert):
        field = tabulate_value_function(station, cert, [0.0], [2.0], 0.25, step=2e-3)
        vals = field.values
        assert vals[0] == 0.0
        assert np.all(vals[1:] > 0.0)
        assert np.all(np.diff(vals) > 0.0)  # increasing along the ray

    def test_local_lipschitz_surrogate_stable_under_refinement(self, station, cert):
        # The fitted slope bound over a compact window should not blow up
        # when the grid is refined.
        coarse = tabulate_value_function(station, cert, [0.0], [2.0], 0.25, step=2e-3)
        fine = tabulate_value_function(station, cert, [0.0], [2.0], 0.125, step=2e-3)

        def worst_slope(field):
            v = field.values
            return np.abs(np.diff(v)).max() / field.spacing[0]

        assert worst_slope(fine) <= worst_slope(coarse) * 1.3 + 1e-9


class TestExtendEven:
    def test_mirror_values(self):
        f = tabulate(quadratic, [0.0, 0.0], [1.0, 1.0], 0.5)
        fe = extend_even(f)
        assert fe.lo.tolist() == [-1.0, -1.0]
        pts = np.array([[0.5, 1.0], [1.0, 0.5]])
        assert np.allclose(fe.value(-pts), fe.value(pts))
        assert np.allclose(fe.value(pts), f.value(pts))

    def test_needs_origin_anchor(self):
        f = tabulate(quadratic, [0.5], [1.5], 0.5)
        with pytest.raises(AsymmetricGrid):
            extend_even(f)


class TestDini:
    def test_absolute_value_kink(self):
        f = tabulate(lambda X: np.abs(X[:, 0]), [-1.0], [1.0], 0.01)
        est = dini_subderivative(f, [0.0], [1.0])
        assert est == pytest.approx(1.0, abs=5e-3)

    def test_smooth_quadratic(self):
        f = tabulate(quadratic, [-2.0], [2.0], 0.01)
        est = dini_subderivative(f, [1.0], [1.0])
        assert est == pytest.approx(1.0, abs=2e-2)
        est_down = dini_subderivative(f, [1.0], [-1.0])
        assert est_down == pytest.approx(-1.0, abs=2e-2)


class TestIntegralDecrease:
    def test_holds_along_drain_paths(self, station, cert):
        v = tabulate_value_function(station, cert, [0.0], [2.5], 0.05, step=2e-3)
        w = norm_field([0.0], [2.5], 0.05)
        for rule in default_rule_set(station):
            tr = simulate(station, [2.0], step=1e-3, horizon=2.2, rule=rule)
            report = verify_integral_decrease(v, w, tr, tol=5e-3)
            assert report.passed, f"{rule.describe()}: {report.worst_margin}"

    def test_flags_reversed_path(self, station, cert):
        v = tabulate_value_function(station, cert, [0.0], [2.5], 0.05, step=2e-3)
        w = norm_field([0.0], [2.5], 0.05)
        tr = simulate(station, [2.0], step=1e-2, horizon=2.2)
        backwards = Trajectory(step=tr.step, samples=tr.samples[::-1],
                               lipschitz=tr.lipschitz)
        report = verify_integral_decrease(v, w, backwards, tol=5e-3)
        assert not report.passed


class TestDifferentialDecrease:
    def test_requires_smooth_field(self, station):
        v = tabulate(quadratic, [0.0], [3.0], 0.05)  # not marked smooth
        w = norm_field([0.0], [3.0], 0.05)
        tr = simulate(station, [1.0], step=1e-2, horizon=1.5)
        with pytest.raises(ValueError, match="smooth"):
            verify_differential_decrease(v, w, tr)

    def test_holds_for_analytic_pair(self, station):
        v = tabulate(quadratic, [0.0], [3.0], 0.01, smooth=True)
        w = norm_field([0.0], [3.0], 0.01)
        tr = simulate(station, [2.0], step=1e-3, horizon=2.5)
        report = verify_differential_decrease(v, w, tr, tol=1e-2)
        assert report.passed

    def test_margin_error_is_first_order_in_step(self):
        # Exponential relaxation probes the Euler error directly: the
        # symmetric quotient of x^2/2 along x' = -x/2 runs h/8 x^2 below
        # the exact rate, so halving h halves the worst deviation.
        half = CallableMap(lambda x: convex_hull([[-x[0]], [-x[0] / 2.0]]),
                           dim=1, lipschitz=1.0)
        v = tabulate(quadratic, [0.0], [2.5], 0.002, smooth=True)
        w = tabulate(quadratic, [0.0], [2.5], 0.002)

        def worst(step):
            tr = simulate(half, [2.0], step=step, horizon=2.0, rule=MinNormRule())
            report = verify_differential_decrease(v, w, tr, tol=1e-2)
            assert report.passed
            return np.abs(report.margins).max()

        ratio = worst(0.01) / worst(0.02)
        assert 0.45 <= ratio <= 0.55


class TestSerialization:
    def test_round_trip(self, tmp_path):
        f = tabulate(quadratic, [0.0, 0.0], [1.0, 1.5], 0.25, name="V", smooth=True)
        path = tmp_path / "field.csv"
        dump_field(f, path)
        back = load_field(path)
        assert back.name == "V" and back.smooth
        assert np.allclose(back.values, f.values, rtol=1e-11)
        assert np.allclose(back.lo, f.lo) and np.allclose(back.spacing, f.spacing)

    def test_header(self, tmp_path):
        f = tabulate(quadratic, [0.0, 0.0], [1.0, 1.0], 0.5)
        dump_field(f, tmp_path / "f.csv")
        head = (tmp_path / "f.csv").read_text().splitlines()[0]
        assert head == "x1,x2,value"
