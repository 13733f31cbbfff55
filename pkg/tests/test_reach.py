import csv
import json

import numpy as np
import pytest

from certreach import (CertifiedValue, NetConfig, ValueNet, classify,
                       classify_batch, epsilon_total, export_grid,
                       monotonicity_diagnostic, sample_monotonicity_triples)
from certreach.reach import IN_OVER_ONLY, IN_UNDER, OUTSIDE, grid_points
from certreach.valuenet import save_checkpoint


def make_cv(eps1=0.015, eps2=0.285, seed=11, bias=None):
    net = ValueNet(NetConfig(state_dim=2, hidden=(16,), omega=6.0, seed=seed))
    if bias is not None:
        flat = net.params_flat()
        flat[-1] = bias
        net.set_params_flat(flat)
    return CertifiedValue(net=net, eps1=eps1, eps2=eps2, t0=0.0, horizon=1.0,
                          domain_lo=np.array([-1.0, -1.0]),
                          domain_hi=np.array([1.0, 1.0]))


class TestEpsilonTotal:
    def test_paper_values(self):
        cv = make_cv(eps1=0.015, eps2=0.285)
        assert epsilon_total(cv, 0.0) == pytest.approx(0.300, abs=1e-15)

    def test_at_horizon(self):
        cv = make_cv(eps1=0.015, eps2=0.285)
        assert epsilon_total(cv, 1.0) == 0.015

    def test_zero_thresholds(self):
        cv = make_cv(eps1=0.0, eps2=0.0)
        assert epsilon_total(cv, 0.3) == 0.0

    def test_affine_slope(self):
        cv = make_cv(eps1=0.01, eps2=0.5)
        ts = np.linspace(0.0, 1.0, 100)
        vals = np.array([epsilon_total(cv, t) for t in ts])
        slopes = np.diff(vals) / np.diff(ts)
        assert np.allclose(slopes, -0.5, atol=1e-12)

    def test_out_of_horizon(self):
        cv = make_cv()
        with pytest.raises(ValueError):
            epsilon_total(cv, 1.5)


class TestClassify:
    def test_deep_inside(self):
        cv = make_cv(bias=-1.0)
        cv.net.set_params_flat(np.concatenate(
            [np.zeros(cv.net.num_params - 1), [-1.0]]))
        assert classify(cv, 0.5, [0.0, 0.0]) == IN_UNDER

    def test_outside(self):
        cv = make_cv()
        cv.net.set_params_flat(np.concatenate(
            [np.zeros(cv.net.num_params - 1), [1.0]]))
        assert classify(cv, 0.5, [0.0, 0.0]) == OUTSIDE

    def test_indeterminate_band(self):
        cv = make_cv()
        cv.net.set_params_flat(np.zeros(cv.net.num_params))
        assert classify(cv, 0.5, [0.0, 0.0]) == IN_OVER_ONLY

    def test_out_of_domain_rejected(self):
        cv = make_cv()
        with pytest.raises(ValueError):
            classify(cv, 0.5, [2.0, 0.0])

    def test_nesting(self):
        """in-under points are a subset of the over-approximation."""
        cv = make_cv(eps1=0.002, eps2=0.01, seed=3)
        pts = grid_points(cv, 41)
        codes = classify_batch(cv, 0.4, pts)
        v = cv.net.forward(0.4, pts)
        eps = epsilon_total(cv, 0.4)
        assert np.all((codes == 0) == (v <= -eps))
        assert np.all((codes == 2) == (v > eps))
        assert not np.any((codes == 0) & (codes == 2))


class TestExportGrid:
    def test_single_point_resolution(self, tmp_path):
        cv = make_cv()
        pts, values, codes = export_grid(cv, 0.5, 1)
        assert pts.shape == (1, 2)
        assert np.allclose(pts[0], [0.0, 0.0])

    def test_row_count(self):
        cv = make_cv()
        pts, _, _ = export_grid(cv, 0.5, 101)
        assert pts.shape[0] == 10201

    def test_csv_and_json_outputs(self, tmp_path):
        cv = make_cv()
        csv_path = tmp_path / "grid.csv"
        json_path = tmp_path / "grid.json"
        export_grid(cv, 0.0, 11, csv_path=csv_path, json_path=json_path)
        with open(csv_path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["x1", "x2", "value", "class"]
        assert len(rows) == 1 + 121
        summary = json.loads(json_path.read_text())
        assert summary["epsilon"] == pytest.approx(0.300)
        assert sum(summary["counts"].values()) == 121
        area = summary["areas"]
        assert area[IN_UNDER] <= summary["over_approximation_area"] + 1e-12

    def test_deterministic_golden_rows(self, tmp_path):
        cv = make_cv(seed=5)
        a = export_grid(cv, 0.25, 7)
        b = export_grid(cv, 0.25, 7)
        assert np.array_equal(a[0], b[0])
        assert np.array_equal(a[1], b[1])
        assert np.array_equal(a[2], b[2])

    def test_zero_resolution_rejected(self):
        cv = make_cv()
        with pytest.raises(ValueError):
            export_grid(cv, 0.5, 0)


class TestMonotonicityDiagnostic:
    def test_huge_eps2_vacuous(self):
        cv = make_cv(eps1=0.0, eps2=100.0)
        rng = np.random.default_rng(0)
        samples = sample_monotonicity_triples(cv, 1000, rng)
        violations, worst = monotonicity_diagnostic(cv, samples)
        assert violations == 0
        assert worst < 0

    def test_sigma_zero_always_holds(self):
        cv = make_cv(eps1=0.015, eps2=0.285)
        rng = np.random.default_rng(1)
        t = rng.uniform(0, 1, 500)
        x = rng.uniform(-1, 1, (500, 2))
        sigma = np.zeros(500)
        violations, worst = monotonicity_diagnostic(cv, (t, x, sigma))
        assert violations == 0

    def test_violation_detected_for_fake_bounds(self):
        """With eps1 = eps2 = 0 the inequality demands exact monotonicity,
        which a random network does not satisfy."""
        cv = make_cv(eps1=0.0, eps2=0.0, seed=2)
        rng = np.random.default_rng(3)
        samples = sample_monotonicity_triples(cv, 2000, rng)
        violations, worst = monotonicity_diagnostic(cv, samples)
        assert violations > 0
        assert worst > 0

    def test_bad_triples_rejected(self):
        cv = make_cv()
        with pytest.raises(ValueError):
            monotonicity_diagnostic(cv, (np.array([0.9]), np.zeros((1, 2)),
                                         np.array([0.5])))


class TestCertifiedValue:
    def test_checkpoint_round_trip(self, tmp_path, double_integrator):
        net = ValueNet(NetConfig(state_dim=2, hidden=(16,), omega=6.0, seed=4))
        path = tmp_path / "ck.json"
        save_checkpoint(net, path)
        cv = CertifiedValue.from_checkpoint(
            path, eps1=0.015, eps2=0.285, t0=0.0, horizon=1.0,
            domain=double_integrator.domain)
        probe = np.array([0.3, -0.2])
        assert cv.net.forward(0.5, probe) == net.forward(0.5, probe)

    def test_negative_thresholds_rejected(self):
        with pytest.raises(ValueError):
            make_cv(eps1=-0.1)
