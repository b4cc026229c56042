"""Case-study checks: geometry, sampling, losses, constraint, metrics.

Quadrature oracles (scipy.integrate.quad) are independent of the samplers'
internal trapezoid tables; loss values are checked against hand arithmetic
and literal evaluation loops.
"""

import math

import numpy as np
import pytest
from scipy.integrate import quad

from qpgd import autodiff as ad
from qpgd import capacitor as cap
from qpgd.autodiff import AnalyticField, ConfigurationError


@pytest.fixture(scope="module")
def geom():
    return cap.capacitor_geometry()


ZERO_FIELD = AnalyticField(lambda x, y: 0.0 * x, lambda x, y: 0.0 * x)
HARMONIC_FIELD = AnalyticField(lambda x, y: x * x - y * y, lambda x, y: 0.0 * x)


class TestCurves:
    def test_upper_values(self):
        assert cap.f_upper(0.0) == 0.2
        assert abs(cap.f_upper(0.5) - (-0.8)) < 1e-15

    def test_lower_hand_value(self):
        # exp(0) * (1 - 0.25) - 1 = -0.25
        assert abs(cap.f_lower(-0.5) - (-0.25)) < 1e-15

    def test_out_of_range_rejected(self):
        with pytest.raises(cap.DomainRangeError):
            cap.f_upper(1.5)
        with pytest.raises(cap.DomainRangeError):
            cap.f_lower(np.array([0.0, -1.1]))

    def test_geometry_construction_and_bbox(self, geom):
        x0, x1, y0, y1 = geom.bbox
        assert (x0, x1) == (-1.0, 1.0)
        # box must cover the curve extrema (min lower = -1, max upper = 1.2)
        assert y0 <= -1.0 and y1 >= 1.2
        assert abs(y0 - (-1.0)) < 1e-2 and abs(y1 - 1.2) < 1e-2

    def test_crossing_curves_rejected(self):
        with pytest.raises(ConfigurationError):
            cap.DomainGeometry(lambda x: 0.0 * x - 1.0, lambda x: 0.0 * x + 1.0)


class TestInteriorSampling:
    def test_points_strictly_inside(self, geom):
        pts = cap.sample_interior(geom, 500, seed=1)
        assert np.all(geom.contains(pts[:, 0], pts[:, 1]))

    def test_acceptance_rate_matches_area(self, geom):
        # Monte-Carlo acceptance over the bounding box vs quadrature area.
        area, _ = quad(lambda x: cap.f_upper(x) - cap.f_lower(x), -1.0, 1.0, limit=200)
        box_area = (geom.x_max - geom.x_min) * (geom.y_max - geom.y_min)
        rng = np.random.default_rng(7)
        n = 100_000
        xs = rng.uniform(geom.x_min, geom.x_max, n)
        ys = rng.uniform(geom.y_min, geom.y_max, n)
        rate = np.mean(geom.contains(xs, ys))
        assert abs(rate - area / box_area) < 0.02

    def test_deterministic(self, geom):
        a = cap.sample_interior(geom, 100, seed=5)
        b = cap.sample_interior(geom, 100, seed=5)
        assert np.array_equal(a, b)


class TestBoundarySampling:
    def test_top_points_on_curve(self, geom):
        _, top = cap.sample_boundary(geom, 50, 40, seed=2)
        assert top.shape == (40, 2)
        assert np.max(np.abs(top[:, 1] - cap.f_upper(top[:, 0]))) <= 1e-12

    def test_grounded_points_on_segments(self, geom):
        grounded, _ = cap.sample_boundary(geom, 120, 10, seed=3)
        on_left = np.abs(grounded[:, 0] - geom.x_min) <= 1e-12
        on_right = np.abs(grounded[:, 0] - geom.x_max) <= 1e-12
        on_bottom = np.abs(grounded[:, 1] - cap.f_lower(grounded[:, 0])) <= 1e-12
        assert np.all(on_left | on_right | on_bottom)

    def test_arclength_allocation(self, geom):
        h = 1e-6

        def bottom_speed(x):
            lo = max(-1.0, x - h)
            hi = min(1.0, x + h)
            slope = (cap.f_lower(hi) - cap.f_lower(lo)) / (hi - lo)
            return math.sqrt(1.0 + slope * slope)

        bottom_len, _ = quad(bottom_speed, -1.0, 1.0, limit=400)
        side_len = cap.f_upper(-1.0) - cap.f_lower(-1.0)  # = 1.2 each side
        total = 2 * side_len + bottom_len
        n = 300
        grounded, _ = cap.sample_boundary(geom, n, 10, seed=4)
        n_left = int(np.sum(np.abs(grounded[:, 0] - geom.x_min) <= 1e-12))
        n_right = int(np.sum(np.abs(grounded[:, 0] - geom.x_max) <= 1e-12))
        n_bottom = n - n_left - n_right
        assert abs(n_left - n * side_len / total) <= 1.0
        assert abs(n_right - n * side_len / total) <= 1.0
        assert abs(n_bottom - n * bottom_len / total) <= 1.0

    def test_deterministic(self, geom):
        a = cap.sample_boundary(geom, 30, 20, seed=8)
        b = cap.sample_boundary(geom, 30, 20, seed=8)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


class TestMeasurements:
    def test_default_points_inside(self, geom):
        pts = cap.default_measurement_points(geom, seed=0)
        assert pts.shape == (4, 2)
        assert np.all(geom.contains(pts[:, 0], pts[:, 1]))
        # distinct locations even where several nominals fall outside
        assert len({tuple(p) for p in pts.round(12).tolist()}) == 4

    def test_zero_noise_labels_exact(self, geom):
        pts = cap.default_measurement_points(geom, seed=0)
        truth = AnalyticField(lambda x, y: x + 2 * y, lambda x, y: 0.0 * x)
        m = cap.make_measurements(truth, pts, delta=0.0, seed=3)
        assert np.array_equal(m.labels, truth.eval(pts[:, 0], pts[:, 1]))

    def test_noise_scale_statistics(self):
        pts = np.zeros((100_000, 2))
        truth = ZERO_FIELD
        m = cap.make_measurements(truth, pts, delta=0.1, seed=11)
        sd = np.std(m.labels)
        assert abs(sd - 0.1) < 0.002  # within 2%

    def test_deterministic(self, geom):
        pts = cap.default_measurement_points(geom, seed=0)
        a = cap.make_measurements(ZERO_FIELD, pts, 0.1, seed=5)
        b = cap.make_measurements(ZERO_FIELD, pts, 0.1, seed=5)
        assert np.array_equal(a.labels, b.labels)


class TestDataLoss:
    def test_exact_match_zero(self):
        pts = np.array([[0.1, 0.2], [0.3, 0.4]])
        m = cap.MeasurementSet(pts, labels=np.array([0.0, 0.0]))
        assert cap.loss_data(ZERO_FIELD, m) == 0.0

    def test_hand_value_p2(self):
        # four residuals of 0.1: sqrt(4 * 0.01 / 3)
        pts = np.zeros((4, 2))
        m = cap.MeasurementSet(pts, labels=np.full(4, -0.1))
        got = cap.loss_data(ZERO_FIELD, m, p=2)
        assert abs(got - 0.11547005383792516) < 1e-12

    def test_max_abs_for_p_inf(self):
        pts = np.zeros((4, 2))
        m = cap.MeasurementSet(pts, labels=np.array([-0.05, 0.2, -0.1, 0.0]))
        assert cap.loss_data(ZERO_FIELD, m, p=math.inf) == 0.2

    def test_single_point_finite_p_rejected(self):
        m = cap.MeasurementSet(np.zeros((1, 2)), labels=np.zeros(1))
        with pytest.raises(ConfigurationError):
            cap.loss_data(ZERO_FIELD, m, p=2)

    def test_hetero_unit_when_residuals_equal_scale(self):
        pts = np.zeros((3, 2))
        m = cap.MeasurementSet(pts, labels=np.full(3, -0.1), deltas=np.full(3, 0.1))
        assert abs(cap.loss_data_hetero(ZERO_FIELD, m, p=2) - 1.0) < 1e-15

    def test_hetero_hand_value(self):
        pts = np.zeros((2, 2))
        m = cap.MeasurementSet(pts, labels=np.array([-0.1, -0.3]), deltas=np.array([0.1, 0.1]))
        assert abs(cap.loss_data_hetero(ZERO_FIELD, m, p=2) - math.sqrt(5.0)) < 1e-14

    def test_hetero_zero_and_ordering_consistency(self):
        pts = np.zeros((4, 2))
        base = np.array([0.05, -0.1, 0.2, 0.0])
        m1 = cap.MeasurementSet(pts, labels=base, delta=0.1)
        m2 = cap.MeasurementSet(pts, labels=2 * base, delta=0.1)
        m0 = cap.MeasurementSet(pts, labels=np.zeros(4), delta=0.1)
        assert cap.loss_data(ZERO_FIELD, m0) == 0.0
        assert cap.loss_data_hetero(ZERO_FIELD, m0) == 0.0
        assert cap.loss_data(ZERO_FIELD, m2) > cap.loss_data(ZERO_FIELD, m1) > 0
        assert cap.loss_data_hetero(ZERO_FIELD, m2) > cap.loss_data_hetero(ZERO_FIELD, m1) > 0

    def test_hetero_nonpositive_scale_rejected(self):
        m = cap.MeasurementSet(np.zeros((2, 2)), labels=np.zeros(2), deltas=np.array([0.1, 0.0]))
        with pytest.raises(ConfigurationError):
            cap.loss_data_hetero(ZERO_FIELD, m)


class TestFieldLosses:
    def test_pde_harmonic_zero(self, geom):
        pts = cap.sample_interior(geom, 200, seed=1)
        assert cap.loss_pde(HARMONIC_FIELD, pts) <= 1e-20

    def test_pde_paraboloid(self, geom):
        field = AnalyticField(lambda x, y: x * x + y * y, lambda x, y: 4.0 + 0.0 * x)
        pts = cap.sample_interior(geom, 50, seed=2)
        assert cap.loss_pde(field, pts) == 16.0

    def test_pde_matches_direct_loop(self, geom):
        field = AnalyticField(lambda x, y: np.sin(x) * y, lambda x, y: -np.sin(x) * y)
        pts = cap.sample_interior(geom, 300, seed=3)
        direct = sum((-math.sin(x) * y) ** 2 for x, y in pts) / len(pts)
        assert abs(cap.loss_pde(field, pts) - direct) < 1e-12

    def test_bc_losses(self, geom):
        grounded, top = cap.sample_boundary(geom, 40, 30, seed=4)
        one = AnalyticField(lambda x, y: 1.0 + 0.0 * x, lambda x, y: 0.0 * x)
        half = AnalyticField(lambda x, y: 0.5 + 0.0 * x, lambda x, y: 0.0 * x)
        assert cap.loss_bc0(ZERO_FIELD, grounded) == 0.0
        assert cap.loss_bcv(ZERO_FIELD, top, 0.0) == 0.0
        assert cap.loss_bc0(one, grounded) == 1.0
        assert cap.loss_bcv(one, top, 1.0) == 0.0
        assert abs(cap.loss_bcv(half, top, 1.0) - 0.25) < 1e-15


def small_problem(geom, n_int=30, seed=0, p=2.0, fixed_v0=None, labels=None):
    spec = ad.MlpSpec(2, (6, 5), 1)
    interior = cap.sample_interior(geom, n_int, seed=seed)
    grounded, top = cap.sample_boundary(geom, 20, 10, seed=seed + 1)
    mpts = cap.default_measurement_points(geom, seed=seed + 2)
    if labels is None:
        labels = np.array([0.1, -0.05, 0.2, 0.0])
    m = cap.MeasurementSet(mpts, labels=labels, delta=0.1)
    points = cap.PointSets(interior, grounded, top, mpts)
    cfg = cap.ConstraintConfig(p=p, z=1.0, delta=0.1)
    prob = cap.CapacitorProblem(spec, points, m, cfg, fixed_v0=fixed_v0)
    return spec, prob


class TestConstrainedProblem:
    def test_constraint_sign_matches_tolerance(self, geom):
        spec, prob = small_problem(geom)
        params = ad.init_params(spec, 3)
        g, _, l_data = prob.constraint_with_grad(params)
        assert (g <= 0) == (l_data <= prob.constraint.z * prob.constraint.delta)

    def test_exact_fit_gives_minus_bound(self, geom):
        spec, prob = small_problem(geom, labels=np.zeros(4))
        params = np.zeros(ad.param_count(spec))
        g = prob.constraint_g(params)
        assert abs(g - (-0.01)) < 1e-16

    def test_hand_value_from_uniform_residuals(self, geom):
        spec, prob = small_problem(geom, labels=np.full(4, -0.1))
        params = np.zeros(ad.param_count(spec))  # network outputs zero
        g = prob.constraint_g(params)
        assert abs(g - (0.04 / 3 - 0.01)) < 1e-16

    def test_zero_network_objective_zero(self, geom):
        spec, prob = small_problem(geom)
        params = np.zeros(ad.param_count(spec))
        f, _, parts = prob.objective_with_grad(params)
        assert f == 0.0
        assert parts["l_pde"] == 0.0 and parts["l_bc0"] == 0.0 and parts["l_bcv"] == 0.0

    def test_naive_equals_f_plus_data_sq(self, geom):
        spec, prob = small_problem(geom)
        params = ad.init_params(spec, 9)
        f = prob.objective_f(params)
        g, _, l_data = prob.constraint_with_grad(params)
        naive, _, parts = prob.naive_with_grad(params)
        assert abs(naive - (f + l_data**2)) < 1e-14
        assert abs(parts["l_data_sq"] - l_data**2) < 1e-16

    def test_frozen_sets_bit_identical(self, geom):
        spec, prob = small_problem(geom)
        params = ad.init_params(spec, 12)
        assert prob.objective_f(params) == prob.objective_f(params)
        assert prob.constraint_g(params) == prob.constraint_g(params)

    def test_gradients_match_fd(self, geom):
        spec, prob = small_problem(geom, n_int=10)
        params = ad.init_params(spec, 4)
        params[-1] = 0.3
        for val_grad, pure in [
            (prob.objective_with_grad, prob.objective_f),
            (prob.naive_with_grad, prob.naive_loss),
        ]:
            _, g, _ = val_grad(params)
            h = 1e-6
            for i in [0, 5, len(params) // 2, len(params) - 1]:
                pp = params.copy()
                pp[i] += h
                pm = params.copy()
                pm[i] -= h
                fd = (pure(pp) - pure(pm)) / (2 * h)
                assert abs(g[i] - fd) <= 1e-5 * max(abs(fd), 1.0) + 1e-8

    def test_fixed_v0_removes_vhat_gradient(self, geom):
        spec, prob = small_problem(geom, fixed_v0=1.0)
        params = ad.init_params(spec, 6)
        _, gf, _ = prob.objective_with_grad(params)
        assert gf[-1] == 0.0

    def test_trainable_vhat_gradient_present(self, geom):
        spec, prob = small_problem(geom)
        params = ad.init_params(spec, 6)
        params[-1] = 0.4  # top outputs ~0, so bcv term pulls v_hat
        _, gf, _ = prob.objective_with_grad(params)
        assert gf[-1] != 0.0

    def test_p_inf_constraint(self, geom):
        spec, prob = small_problem(geom, p=math.inf, labels=np.array([0.05, -0.2, 0.1, 0.0]))
        params = np.zeros(ad.param_count(spec))
        g, _, l_data = prob.constraint_with_grad(params)
        assert abs(l_data - 0.2) < 1e-15
        assert abs(g - (0.04 - 0.01)) < 1e-15


class TestMetrics:
    def test_identical_fields_zero_error(self, geom):
        truth = HARMONIC_FIELD
        rep = cap.metrics(truth, truth, geom, resolution=60)
        assert rep.avg_abs_error_interior == 0.0
        assert rep.avg_abs_laplacian == 0.0

    def test_constant_shift(self, geom):
        truth = HARMONIC_FIELD
        shifted = AnalyticField(lambda x, y: x * x - y * y + 0.05, lambda x, y: 0.0 * x)
        rep = cap.metrics(shifted, truth, geom, resolution=60)
        assert abs(rep.avg_abs_error_interior - 0.05) < 1e-13
        assert rep.avg_abs_laplacian == 0.0

    def test_network_field_carries_vhat(self, geom):
        spec = ad.MlpSpec(2, (4,), 1)
        p = ad.init_params(spec, 0)
        p[-1] = 0.9
        rep = cap.metrics(ad.NetworkField(p, spec), ZERO_FIELD, geom, resolution=40)
        assert rep.v_hat == 0.9

    def test_grid_export(self, geom, tmp_path):
        path = tmp_path / "grid.csv"
        cap.export_grid(path, HARMONIC_FIELD, HARMONIC_FIELD, geom, resolution=30)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "x,y,phi,laplacian,error"
        assert len(lines) > 100


class TestPointSerialization:
    def test_round_trip_positions(self, geom, tmp_path):
        pts = cap.sample_interior(geom, 25, seed=6)
        path = tmp_path / "interior.txt"
        cap.save_points(path, "interior", 6, pts)
        name, seed, back, labels, deltas = cap.load_points(path)
        assert name == "interior" and seed == 6
        assert np.array_equal(back, pts)
        assert labels is None and deltas is None

    def test_round_trip_measurements(self, geom, tmp_path):
        pts = cap.default_measurement_points(geom, seed=1)
        m = cap.make_measurements(ZERO_FIELD, pts, 0.1, seed=2)
        path = tmp_path / "meas.txt"
        cap.save_points(path, "measurements", 2, m.points, labels=m.labels,
                        deltas=np.full(4, m.delta))
        _, _, back, labels, deltas = cap.load_points(path)
        assert np.array_equal(back, m.points)
        assert np.array_equal(labels, m.labels)
        assert np.array_equal(deltas, np.full(4, 0.1))
