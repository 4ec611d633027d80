"""Online latency model, per-ReLU cost regression and accuracy-per-ReLU."""

import numpy as np
import pytest
from scipy import stats

from snl.latency import (
    LatencyModel,
    accuracy_per_relu,
    backsolve_linear_time,
    estimate_online_latency,
    estimates_csv,
    fit_per_relu_cost,
    measure_linear_time,
    read_points_csv,
)
from snl.network import build_network, mlp_descriptor

# (K ReLUs, seconds) rows of the published comparison table
BASELINE_ROWS = [(12.3, 0.45), (28.7, 0.56), (49.2, 1.19), (197.0, 3.94), (229.4, 4.61)]
SNL_RESNET18_ROWS = [(12.9, 0.291), (15.0, 0.334), (24.9, 0.542), (49.9, 1.066)]
SNL_WRN_ROWS = [(120.0, 2.802), (150.0, 3.398), (180.0, 4.054)]


class TestEstimate:
    def test_per_thousand(self):
        assert estimate_online_latency(1000, LatencyModel(0.021, 0.0)) == 0.021

    def test_linear_only(self):
        assert estimate_online_latency(0, LatencyModel(0.021, 0.5)) == 0.5

    def test_table_row(self):
        lt = backsolve_linear_time(49900, 1.066)
        assert lt == pytest.approx(0.018, abs=5e-4)
        assert estimate_online_latency(49900, LatencyModel(0.021, lt)) == pytest.approx(1.066, rel=1e-12)

    @pytest.mark.parametrize("rows", [SNL_RESNET18_ROWS, SNL_WRN_ROWS])
    def test_rows_reproduced_within_5_percent(self, rows):
        k0, s0 = rows[-1] if rows is SNL_RESNET18_ROWS else rows[0]
        model = LatencyModel(0.021, backsolve_linear_time(k0 * 1000, s0))
        for k, s in rows:
            assert abs(estimate_online_latency(k * 1000, model) - s) / s < 0.05

    def test_affine(self):
        m = LatencyModel(0.021, 0.37)
        rng = np.random.default_rng(0)
        for a, b in rng.integers(0, 10**6, (100, 2)):
            lhs = estimate_online_latency(a + b, m) - estimate_online_latency(a, m)
            rhs = estimate_online_latency(b, m) - estimate_online_latency(0, m)
            assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            estimate_online_latency(-1)
        with pytest.raises(ValueError):
            LatencyModel(-0.1, 0.0)
        with pytest.raises(ValueError):
            LatencyModel(0.021, -1.0)


class TestFit:
    def test_exact_line(self):
        slope, icept = fit_per_relu_cost([(0, 0.1), (1000, 0.2)])
        assert slope == pytest.approx(1e-4, rel=1e-12)
        assert icept == pytest.approx(0.1, rel=1e-12)

    def test_baseline_rows(self):
        slope, icept = fit_per_relu_cost([(k * 1000, s) for k, s in BASELINE_ROWS])
        ref = stats.linregress([k * 1000 for k, _ in BASELINE_ROWS], [s for _, s in BASELINE_ROWS])
        assert slope == pytest.approx(ref.slope, rel=1e-12)
        assert icept == pytest.approx(ref.intercept, rel=1e-10)
        assert abs(slope * 1000 - 0.019) <= 0.002

    def test_duplicate_point_unweighted(self):
        pts = [(0, 0.0), (1000, 0.1), (2000, 0.3)]
        one = fit_per_relu_cost(pts)
        dup = fit_per_relu_cost(pts + [pts[2]])
        ref = np.polyfit([0, 1000, 2000, 2000], [0.0, 0.1, 0.3, 0.3], 1)
        assert dup == pytest.approx(tuple(ref), rel=1e-10)
        assert dup != pytest.approx(one)

    def test_round_trip_noiseless(self):
        xs = np.linspace(1000, 250000, 12)
        slope, icept = fit_per_relu_cost(zip(xs, 2.3e-5 * xs + 0.07))
        assert slope == pytest.approx(2.3e-5, abs=1e-9)
        assert icept == pytest.approx(0.07, abs=1e-9)

    def test_round_trip_noisy(self):
        rng = np.random.default_rng(1)
        xs = rng.uniform(1e3, 3e5, 200)
        sigma = 0.01
        ys = 1.9e-5 * xs + 0.2 + sigma * rng.standard_normal(200)
        slope, icept = fit_per_relu_cost(zip(xs, ys))
        se = sigma / np.sqrt(((xs - xs.mean()) ** 2).sum())
        assert abs(slope - 1.9e-5) < 3 * se

    @pytest.mark.parametrize("pts", [[(5, 1.0), (5, 2.0)], [(5, 1.0)], []])
    def test_degenerate(self, pts):
        with pytest.raises(ValueError):
            fit_per_relu_cost(pts)


class TestAccuracyPerRelu:
    def test_table_row(self):
        assert accuracy_per_relu(73.75, 49.9) == pytest.approx(1.478, abs=5e-4)

    def test_column_definition_not_table_typo(self):
        assert accuracy_per_relu(66.53, 12.9) == pytest.approx(5.157, abs=1e-3)
        assert accuracy_per_relu(66.53, 12.9) != pytest.approx(5.517, abs=1e-2)

    def test_trivial(self):
        assert accuracy_per_relu(100, 100) == 1.0

    def test_zero(self):
        with pytest.raises(ValueError):
            accuracy_per_relu(50, 0)


class TestIO:
    def test_points_csv(self):
        text = "# measurements\nrelu_count,latency\n1000,0.5\n2000,0.7\n"
        assert read_points_csv(text) == [(1000.0, 0.5), (2000.0, 0.7)]

    def test_bad_row(self):
        with pytest.raises(ValueError):
            read_points_csv("1000,0.5\nabc,1\n")

    def test_estimates_csv(self):
        out = estimates_csv([0, 1000], LatencyModel(0.021, 0.0)).splitlines()
        assert out[0] == "# schema: latency-estimate/1"
        assert out[1] == "relu_count,latency_s"
        assert out[3] == "1000,0.021"

    def test_measure_linear_time(self):
        net = build_network(mlp_descriptor([4, 8, 2]))
        t = measure_linear_time(net, (4,), repeats=5)
        assert 0 < t < 1
