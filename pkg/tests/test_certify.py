import numpy as np
import pytest

from certreach import (CertifierConfig, ExprPool, IntervalBox, NetConfig, Query,
                       SystemSpec, ValueNet, branch_and_prune, build_queries,
                       build_residuals, certify_residuals, empirical_violations)
from certreach.certify import export_queries_smtlib


def xbox(lo, hi):
    return IntervalBox((0,), np.array([lo]), np.array([hi]))


@pytest.fixture()
def cfg():
    return CertifierConfig(delta=1e-4, max_boxes=200_000, batch_size=512)


class TestBuildQueries:
    def test_double_integrator_query_shapes(self, double_integrator, small_net):
        spec = double_integrator
        closure = small_net.to_expr(spec.pool, (0, 1, 2))
        pair = build_residuals(spec, closure)
        queries = build_queries(pair, spec, 0.015, 0.285)
        assert [q.label for q in queries] == ["R1+", "R1-", "R2+", "R2-"]
        assert queries[0].box.dim == 2
        assert queries[2].box.dim == 3
        assert queries[0].threshold == 0.015
        assert queries[2].threshold == 0.285

    def test_equal_thresholds(self, double_integrator):
        spec = double_integrator
        pair = build_residuals(spec, spec.pool.const(0.0))
        queries = build_queries(pair, spec, 0.1, 0.1)
        assert all(q.threshold == 0.1 for q in queries)

    def test_one_dim_system_box(self):
        spec = SystemSpec.create(1, 0, 0, 0.0, 1.0, ["0"], "x1", [(-1, 1)])
        pair = build_residuals(spec, spec.pool.const(0.0))
        queries = build_queries(pair, spec, 0.1, 0.1)
        assert queries[2].box.dim == 2

    def test_threshold_must_be_positive(self):
        pool = ExprPool(["x"])
        with pytest.raises(ValueError):
            Query(pool.var("x"), "greater", 0.0, xbox(-1, 1), "R1+")


class TestBranchAndPrune:
    def test_zero_residual_unsat_one_box(self, cfg):
        pool = ExprPool(["x"])
        q = Query(pool.const(0.0), "greater", 0.5, xbox(-1, 1), "R1+")
        res = branch_and_prune(q, cfg)
        assert res.verdict == "unsat"
        assert res.boxes_explored == 1

    def test_half_box_violation(self, cfg):
        pool = ExprPool(["x"])
        q = Query(pool.var("x"), "greater", 0.5, xbox(-1, 1), "R1+")
        res = branch_and_prune(q, cfg)
        assert res.verdict == "delta-sat"
        assert res.witness.point[0] > 0.5
        assert res.witness.residual > 0.5 - cfg.delta

    def test_less_direction(self, cfg):
        pool = ExprPool(["x"])
        q = Query(pool.var("x"), "less", 0.5, xbox(-1, 1), "R1-")
        res = branch_and_prune(q, cfg)
        assert res.verdict == "delta-sat"
        assert res.witness.point[0] < -0.5
        assert res.witness.residual < -(0.5 - cfg.delta)

    def test_dedup_degenerate_difference(self, cfg):
        pool = ExprPool(["x"])
        x = pool.var("x")
        e = pool.pow(x, 2) - pool.pow(x, 2)
        q = Query(e, "greater", 1e-6, xbox(-1, 1), "R1+")
        res = branch_and_prune(q, cfg)
        assert res.verdict == "unsat"
        assert res.boxes_explored == 1

    def test_near_threshold_unsat(self, cfg):
        # sup of sin on the box is sin(1) ~ 0.841; threshold above it
        pool = ExprPool(["x"])
        q = Query(pool.sin(pool.var("x")), "greater", 0.85, xbox(-1, 1), "R+")
        res = branch_and_prune(q, cfg)
        assert res.verdict == "unsat"

    def test_near_threshold_sat(self, cfg):
        pool = ExprPool(["x"])
        q = Query(pool.sin(pool.var("x")), "greater", 0.84, xbox(-1, 1), "R+")
        res = branch_and_prune(q, cfg)
        assert res.verdict == "delta-sat"
        assert np.sin(res.witness.point[0]) > 0.84 - cfg.delta

    def test_budget_exhaustion(self):
        # threshold just below the supremum: neither prunable at coarse
        # scale nor witnessed by early midpoints within an 8-box budget
        pool = ExprPool(["x", "y"])
        e = pool.sin(10.0 * pool.var("x")) * pool.sin(10.0 * pool.var("y"))
        box = IntervalBox((0, 1), np.array([-3.0, -3.0]), np.array([3.0, 3.0]))
        tight = CertifierConfig(delta=1e-12, max_boxes=8, batch_size=4)
        res = branch_and_prune(Query(e, "greater", 1.0 - 1e-9, box, "R+"), tight)
        assert res.verdict == "budget"
        assert res.frontier_summary["pending_boxes"] > 0

    def test_determinism(self, cfg):
        pool = ExprPool(["x", "y"])
        e = pool.sin(3.0 * pool.var("x")) + pool.cos(2.0 * pool.var("y"))
        box = IntervalBox((0, 1), np.array([-1.0, -1.0]), np.array([1.0, 1.0]))
        q = Query(e, "greater", 1.2, box, "R+")
        r1 = branch_and_prune(q, cfg)
        r2 = branch_and_prune(q, cfg)
        assert r1.verdict == r2.verdict == "delta-sat"
        assert np.array_equal(r1.witness.point, r2.witness.point)

    def test_unsat_monotone_in_threshold(self, cfg):
        pool = ExprPool(["x", "y"])
        e = pool.sin(3.0 * pool.var("x")) * pool.cos(pool.var("y"))
        box = IntervalBox((0, 1), np.array([-1.0, -1.0]), np.array([1.0, 1.0]))
        verdicts = {}
        for thr in (1.05, 1.2, 1.5):
            res = branch_and_prune(Query(e, "greater", thr, box, "R+"), cfg)
            verdicts[thr] = res.verdict
        assert verdicts[1.05] == "unsat"
        assert verdicts[1.2] == "unsat" and verdicts[1.5] == "unsat"

    def test_unsat_empirically_sound(self, cfg):
        pool = ExprPool(["x", "y"])
        e = pool.sin(3.0 * pool.var("x")) + 0.5 * pool.cos(2.0 * pool.var("y"))
        box = IntervalBox((0, 1), np.array([-1.0, -1.0]), np.array([1.0, 1.0]))
        thr = 1.55
        res = branch_and_prune(Query(e, "greater", thr, box, "R+"), cfg)
        assert res.verdict == "unsat"
        rng = np.random.default_rng(0)
        pts = rng.uniform(-1.0, 1.0, size=(200_000, 2))
        vals = pool.eval_batch([e], {0: pts[:, 0], 1: pts[:, 1]})[0]
        assert (vals > thr).sum() == 0

    def test_centered_form_prunes_dependent_expression(self):
        # x*sin(x) - x has heavy dependency; centered form certifies with a
        # modest budget where the natural extension alone would need far more
        pool = ExprPool(["x"])
        x = pool.var("x")
        e = x * pool.sin(x) - x * pool.sin(x)
        # rebuilt structurally different so hash-consing cannot collapse it
        e = pool.mul(x, pool.sin(x)) - pool.mul(pool.sin(x), x)
        res = branch_and_prune(Query(e, "greater", 1e-3, xbox(-2, 2), "R+"),
                               CertifierConfig(max_boxes=100_000))
        assert res.verdict == "unsat"


class TestCertifyResiduals:
    def test_exact_solution_zero_dynamics(self, cfg):
        spec = SystemSpec.create(2, 1, 0, 0.0, 1.0, ["0", "0"],
                                 "x1^2 + x2^2 - 0.5", [(-1, 1), (-1, 1)],
                                 [(-1, 1)])
        pair = build_residuals(spec, spec.target)
        res = certify_residuals(pair, spec, 0.01, 0.01, cfg)
        assert res.verdict == "unsat"
        assert set(res.per_query) == {"R1+", "R1-", "R2+", "R2-"}

    def test_first_delta_sat_cancels_rest(self, cfg, double_integrator):
        spec = double_integrator
        # a constant net violates R1 immediately; later queries are skipped
        pair = build_residuals(spec, spec.pool.const(5.0))
        res = certify_residuals(pair, spec, 0.015, 0.285, cfg)
        assert res.verdict == "delta-sat"
        assert res.witness.label == "R1+"
        skipped = [r for r in res.per_query.values() if r.verdict == "cancelled"]
        assert len(skipped) >= 1

    def test_parallel_workers_agree_on_unsat(self, double_integrator):
        spec = double_integrator
        pair = build_residuals(spec, spec.target)
        # net == g: R1 == 0; R2 = min(0, H(grad g)) with true dynamics,
        # bounded but nonzero; pick thresholds above its range
        cfg1 = CertifierConfig(max_boxes=500_000, workers=1)
        cfg4 = CertifierConfig(max_boxes=500_000, workers=4)
        r1 = certify_residuals(pair, spec, 10.0, 10.0, cfg1)
        r4 = certify_residuals(pair, spec, 10.0, 10.0, cfg4)
        assert r1.verdict == r4.verdict == "unsat"

    def test_empirical_violation_counter(self, double_integrator, small_net):
        spec = double_integrator
        closure = small_net.to_expr(spec.pool, (0, 1, 2))
        pair = build_residuals(spec, closure)
        v1, v2, m1, m2 = empirical_violations(pair, spec, eps1=1e9, eps2=1e9,
                                              n_samples=10_000, seed=1)
        assert v1 == 0 and v2 == 0
        assert m1 > 0 and m2 >= 0


class TestSmtlibExport:
    def test_one_file_per_query(self, tmp_path, double_integrator, small_net):
        spec = double_integrator
        closure = small_net.to_expr(spec.pool, (0, 1, 2))
        pair = build_residuals(spec, closure)
        queries = build_queries(pair, spec, 0.015, 0.285)
        paths = export_queries_smtlib(queries, tmp_path)
        assert len(paths) == 4
        for p in paths:
            text = p.read_text()
            assert text.startswith("(set-logic QF_NRA)")
            assert text.count("(") == text.count(")")
            assert "(check-sat)" in text

    def test_external_solver_accepts_script(self, tmp_path, double_integrator,
                                             small_net):
        import shutil
        import subprocess
        solver = shutil.which("dreal") or shutil.which("dReal")
        if solver is None:
            pytest.skip("no external delta-complete solver on PATH")
        spec = double_integrator
        closure = small_net.to_expr(spec.pool, (0, 1, 2))
        pair = build_residuals(spec, closure)
        queries = build_queries(pair, spec, 0.015, 0.285)
        path = export_queries_smtlib([queries[0]], tmp_path)[0]
        proc = subprocess.run([solver, str(path)], capture_output=True, text=True,
                              timeout=300)
        assert proc.returncode == 0
        assert "sat" in proc.stdout
