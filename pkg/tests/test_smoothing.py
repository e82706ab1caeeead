"""Mollifiers, smoothing convolution, partitions of unity, and gluing."""

import numpy as np
import pytest
from scipy.integrate import quad

from lyapforge.lyapunov import tabulate
from lyapforge.network import single_station, validate_network
from lyapforge.smoothing import (
    BoxTooSmall,
    DegenerateBox,
    NonpositiveRadius,
    PieceBoundUnachievable,
    _blend,
    build_partition,
    convolve,
    glue,
    gluing_error_report,
    make_mollifier,
    mollified_decrease_check,
    uoc_check,
)
from lyapforge.trajectory import MinNormRule, simulate

MASS_TOL = 1e-6
CONST_TOL = 1e-8


def unit_profile(y):
    return np.exp(-1.0 / (1.0 - y * y)) if abs(y) < 1.0 else 0.0


def quadratic(X):
    return 0.5 * np.sum(X * X, axis=1)


def absval(X):
    return np.abs(X[:, 0])


class TestMollifier:
    def test_rejects_nonpositive_radius(self):
        with pytest.raises(NonpositiveRadius):
            make_mollifier(1, 0.0)
        with pytest.raises(NonpositiveRadius):
            make_mollifier(2, -0.3)

    def test_rejects_high_dimension_and_coarse_grid(self):
        with pytest.raises(ValueError):
            make_mollifier(4, 0.1)
        with pytest.raises(ValueError):
            make_mollifier(1, 0.1, points=32)

    def test_unit_mass_across_radii_and_dims(self):
        # independent resolution so the check is not the fitting identity
        for dim in (1, 2):
            for r in (0.05, 0.1, 0.5):
                mol = make_mollifier(dim, r)
                assert abs(mol.integral(points=200) - 1.0) <= MASS_TOL

    def test_normalization_against_quad(self):
        raw = quad(unit_profile, -1.0, 1.0)[0]
        mol = make_mollifier(1, 0.3)
        assert abs(mol.norm_const - 1.0 / raw) <= 1e-7 / raw

    def test_normalization_against_quad_2d(self):
        raw = 2.0 * np.pi * quad(lambda p: p * unit_profile(p), 0.0, 1.0)[0]
        mol = make_mollifier(2, 0.2)
        assert abs(mol.norm_const - 1.0 / raw) <= 1e-6 / raw

    def test_second_moment_against_quad(self):
        raw = quad(unit_profile, -1.0, 1.0)[0]
        m2_ref = quad(lambda y: y * y * unit_profile(y), -1.0, 1.0)[0] / raw
        mol = make_mollifier(1, 1.0)
        assert abs(mol.moment(2) - m2_ref) <= 1e-6
        # moments scale with the radius power
        half = make_mollifier(1, 0.5)
        assert abs(half.moment(2) - 0.25 * m2_ref) <= 1e-6

    def test_kernel_symmetric_and_supported_in_ball(self):
        mol = make_mollifier(1, 0.4)
        xs = np.linspace(-0.6, 0.6, 31).reshape(-1, 1)
        vals = mol(xs)
        assert np.allclose(vals, vals[::-1], atol=1e-15)
        assert np.all(vals[np.abs(xs[:, 0]) >= 0.4] == 0.0)


class TestConvolve:
    def test_constant_field_passes_through(self):
        f = tabulate(lambda X: np.full(len(X), 3.7), [-1.0], [1.0], 0.1)
        g = convolve(f, make_mollifier(1, 0.3))
        assert g.smooth
        assert np.all(np.abs(g.values - 3.7) <= CONST_TOL)
        assert g.lo[0] == pytest.approx(-0.7) and g.hi[0] == pytest.approx(0.7)

    def test_constant_field_2d(self):
        f = tabulate(lambda X: np.full(len(X), -1.25), [-1.0, -1.0], [1.0, 1.0], 0.25)
        g = convolve(f, make_mollifier(2, 0.4), points=32)
        assert np.all(np.abs(g.values + 1.25) <= CONST_TOL)

    def test_quadratic_shifts_by_second_moment(self):
        f = tabulate(quadratic, [-1.5], [1.5], 0.005)
        mol = make_mollifier(1, 0.2)
        g = convolve(f, mol)
        shift = 0.5 * mol.moment(2)
        diff = g.values.reshape(-1) - f.value(g.nodes())
        assert np.all(np.abs(diff - shift) <= 0.01 * shift)

    def test_kink_value_is_first_moment(self):
        f = tabulate(absval, [-1.0], [1.0], 0.005)
        mol = make_mollifier(1, 0.25)
        g = convolve(f, mol)
        at_zero = float(g.value([0.0]))
        assert at_zero == pytest.approx(mol.moment(1), rel=0.02)

    def test_box_too_small(self):
        f = tabulate(quadratic, [-1.0], [1.0], 0.1)
        with pytest.raises(BoxTooSmall):
            convolve(f, make_mollifier(1, 0.95))
        with pytest.raises(BoxTooSmall):
            convolve(f, make_mollifier(1, 0.2), restrict_lo=[0.4], restrict_hi=[0.45])

    def test_dimension_mismatch(self):
        f = tabulate(quadratic, [-1.0], [1.0], 0.1)
        with pytest.raises(ValueError):
            convolve(f, make_mollifier(2, 0.1))


class TestUocLadder:
    def test_distances_shrink_quadratically(self):
        f = tabulate(quadratic, [-2.0], [2.0], 0.005)
        report = uoc_check(f, [0.4, 0.2, 0.1], lo=[-1.0], hi=[1.0], final_bound=1e-3)
        assert report.passed
        d = report.distances
        assert d[0] > d[1] > d[2]
        # quadratic field: distance tracks r^2 m2 / 2, so each step quarters
        assert d[1] / d[0] == pytest.approx(0.25, abs=0.05)

    def test_ladder_must_decrease(self):
        f = tabulate(quadratic, [-2.0], [2.0], 0.01)
        with pytest.raises(ValueError):
            uoc_check(f, [0.1, 0.2])

    def test_unreachable_bound_fails(self):
        f = tabulate(quadratic, [-2.0], [2.0], 0.01)
        report = uoc_check(f, [0.4, 0.2], final_bound=1e-9)
        assert not report.passed
        assert report.to_dict()["final_bound"] == 1e-9


class TestPartition:
    def test_three_piece_boxes(self):
        pou = build_partition([-3.0], [3.0], pieces=3, overlap=0.25, spacing=0.05)
        assert pou.n_pieces == 3
        lo0, hi0 = pou.piece_box(0)
        lo1, hi1 = pou.piece_box(1)
        lo2, hi2 = pou.piece_box(2)
        assert (lo0[0], hi0[0]) == pytest.approx((-3.5, -0.5))
        assert (lo1[0], hi1[0]) == pytest.approx((-1.5, 1.5))
        assert (lo2[0], hi2[0]) == pytest.approx((0.5, 3.5))

    def test_weights_sum_to_one(self):
        pou = build_partition([-3.0], [3.0], pieces=3, overlap=0.25, spacing=0.05)
        rng = np.random.default_rng(7)
        X = rng.uniform(-3.0, 3.0, size=(200, 1))
        sums = pou.weights(X).sum(axis=1)
        assert np.all(np.abs(sums - 1.0) <= 1e-9)

    def test_weights_sum_to_one_2d(self):
        pou = build_partition([0.0, 0.0], [2.0, 2.0], pieces=2, overlap=0.3, spacing=0.1)
        assert pou.n_pieces == 4
        rng = np.random.default_rng(11)
        X = rng.uniform(0.0, 2.0, size=(150, 2))
        sums = pou.weights(X).sum(axis=1)
        assert np.all(np.abs(sums - 1.0) <= 1e-9)

    def test_weights_vanish_outside_support(self):
        pou = build_partition([-3.0], [3.0], pieces=3, overlap=0.25, spacing=0.05)
        W = pou.weights(np.array([[-2.0], [0.0], [2.0]]))
        assert W[0, 2] == 0.0 and W[2, 0] == 0.0
        assert W[1, 1] == pytest.approx(1.0, abs=1e-9)

    def test_gradient_bounds_are_moderate(self):
        pou = build_partition([-3.0], [3.0], pieces=3, overlap=0.25, spacing=0.05)
        assert np.all(pou.q > 0.5)
        assert np.all(pou.q < 10.0)

    def test_budgets_quarter_of_field_minimum(self):
        v = tabulate(quadratic, [-3.75], [3.75], 0.05)
        w = tabulate(absval, [-3.75], [3.75], 0.05)
        pou = build_partition([-3.0], [3.0], 3, 0.25, 0.05, v_field=v, w_field=w)
        # outer pieces: min V on the closed piece is at |x| = 0.5
        assert pou.eps[0] == pytest.approx(0.25 * 0.125, abs=1e-12)
        assert pou.eps[2] == pytest.approx(0.25 * 0.125, abs=1e-12)
        # the middle piece touches the origin, so its budget collapses
        assert abs(pou.eps[1]) <= 1e-12

    def test_degenerate_requests_rejected(self):
        with pytest.raises(DegenerateBox):
            build_partition([1.0], [1.0], 2, 0.25, 0.05)
        with pytest.raises(DegenerateBox):
            build_partition([-1.0], [1.0], 0, 0.25, 0.05)
        with pytest.raises(DegenerateBox):
            build_partition([-1.0], [1.0], 2, 0.0, 0.05)
        with pytest.raises(DegenerateBox):
            build_partition([-1.0], [1.0], 2, 0.6, 0.05)


@pytest.fixture(scope="module")
def fields():
    v = tabulate(quadratic, [-3.75], [3.75], 0.05, name="V_even")
    w = tabulate(absval, [-3.75], [3.75], 0.05, name="W_even")
    return v, w


@pytest.fixture(scope="module")
def pou(fields):
    v, w = fields
    return build_partition([-3.0], [3.0], 3, 0.25, 0.05, v_field=v, w_field=w)


@pytest.fixture(scope="module")
def result(fields, pou):
    v, w = fields
    return glue(v, w, pou)


class TestGlue:
    def test_blend_of_exact_pieces_is_identity(self, fields, pou):
        v, _ = fields
        axes = [ax[(ax >= -3.0 - 1e-9) & (ax <= 3.0 + 1e-9)] for ax in v.axes()]
        nodes = axes[0].reshape(-1, 1)
        pieces = []
        for i in range(pou.n_pieces):
            plo, phi = pou.piece_box(i)
            mask = (nodes[:, 0] > plo[0] + 1e-9) & (nodes[:, 0] < phi[0] - 1e-9)
            pieces.append((mask, v.value(nodes[mask])))
        blended = _blend(pou, axes, pieces)
        assert np.all(np.abs(blended - v.value(nodes)) <= 1e-12)

    def test_all_pieces_resolved(self, result):
        assert len(result.pieces) == 3
        assert [p.index for p in result.pieces] == [1, 2, 3]
        for p in result.pieces:
            assert p.v_achieved <= p.v_target
            assert p.w_achieved <= p.w_target

    def test_origin_piece_hits_floors(self, result):
        mid = result.pieces[1]
        assert abs(mid.eps) <= 1e-12
        assert mid.v_target == 5e-7
        assert mid.w_target == 1e-3
        # the origin node forces many halvings before the value floor is met
        assert 2e-5 < mid.radius < 1e-4

    def test_outer_pieces_keep_coarse_radii(self, result):
        assert result.pieces[0].radius > 0.01
        assert result.pieces[2].radius > 0.01

    def test_glued_field_within_eighth_of_original(self, fields, result):
        v, _ = fields
        report = gluing_error_report(result.v_s, v)
        assert report.passed
        assert result.v_s.smooth and result.w_s.smooth

    def test_glued_rate_is_fifth_of_original(self, fields, result):
        _, w = fields
        nodes = result.w_s.nodes()
        diff = result.w_s.values.reshape(-1) - 0.2 * w.value(nodes)
        assert np.max(np.abs(diff)) <= 5e-4

    def test_report_serializes(self, result, tmp_path):
        path = tmp_path / "glue.json"
        result.dump_report(path)
        import json

        data = json.loads(path.read_text())
        assert len(data["pieces"]) == 3
        assert {"index", "radius", "eps", "q", "v_target", "v_achieved",
                "w_target", "w_achieved"} <= set(data["pieces"][0])

    def test_halving_cap_enforced(self, fields, pou):
        v, w = fields
        with pytest.raises(PieceBoundUnachievable):
            glue(v, w, pou, max_halvings=3)

    def test_thin_padding_rejected(self, pou):
        v = tabulate(quadratic, [-3.1], [3.1], 0.05)
        w = tabulate(absval, [-3.1], [3.1], 0.05)
        with pytest.raises(BoxTooSmall):
            glue(v, w, pou)


@pytest.fixture(scope="module")
def station():
    return validate_network(single_station())


class TestMollifiedDecrease:
    def test_smooth_pair_passes_at_first_radius(self, station):
        v = tabulate(quadratic, [-2.2], [2.2], 0.005)
        w = tabulate(absval, [-2.2], [2.2], 0.005)
        tr = simulate(station, [1.5], step=1e-3, horizon=2.0, rule=MinNormRule())
        report = mollified_decrease_check(v, w, [tr], [0.4, 0.2], eps=1e-2)
        assert report.passed
        assert report.first_passing_radius == 0.4
        assert all(m <= 1e-2 for m in report.worst_margins)

    def test_kinked_field_needs_fine_radius(self, station):
        v = tabulate(absval, [-2.2], [2.2], 0.005)
        w = tabulate(lambda X: np.minimum(1.0, 5.0 * np.abs(X[:, 0])),
                     [-2.2], [2.2], 0.005)
        tr = simulate(station, [1.0], step=1e-3, horizon=1.5, rule=MinNormRule())
        report = mollified_decrease_check(v, w, [tr], [0.8, 0.1], eps=1e-2)
        # the coarse radius smears the kink and loses the decrease
        assert report.worst_margins[0] > 1e-2
        assert report.first_passing_radius == 0.1
        data = report.to_dict()
        assert data["passed"] and len(data["worst_margins"]) == 2
