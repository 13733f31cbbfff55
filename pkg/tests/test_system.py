import numpy as np
import pytest

from certreach import (ConfigError, SystemSpec, UnsupportedSystemError,
                       build_hamiltonian, build_residuals, load_system)
from certreach.system import control_vertices, hamiltonian_values


def brute_force_hamiltonian(spec, t, x, p, n_grid=101):
    """Independent oracle: exhaustive grid max/min of f.p over the input
    boxes, vectorized over the full (u, d) product grid."""
    maximize_u = spec.orientation == "max-min"
    u_grids = [np.linspace(spec.control_lo[j], spec.control_hi[j], n_grid)
               for j in range(spec.control_dim)]
    d_grids = [np.linspace(spec.disturbance_lo[q], spec.disturbance_hi[q], n_grid)
               for q in range(spec.disturbance_dim)]
    mesh = np.meshgrid(*(u_grids + d_grids), indexing="ij") or [np.zeros(1)]
    n = mesh[0].size
    cols = {spec.t_index: np.full(n, t)}
    for i in range(spec.state_dim):
        cols[spec.x_index(i)] = np.full(n, x[i])
    for j in range(spec.control_dim):
        cols[spec.u_index(j)] = mesh[j].ravel()
    for q in range(spec.disturbance_dim):
        cols[spec.d_index(q)] = mesh[spec.control_dim + q].ravel()
    comps = spec.pool.eval_batch(spec.value_dynamics, cols)
    fp = sum(comps[i] * p[i] for i in range(spec.state_dim))
    shape = tuple(len(g) for g in (u_grids + d_grids)) or (1,)
    fp = fp.reshape(shape)
    d_axes = tuple(range(spec.control_dim, spec.control_dim + spec.disturbance_dim))
    if maximize_u:
        inner = fp.min(axis=d_axes) if d_axes else fp
        return float(inner.max())
    inner = fp.max(axis=d_axes) if d_axes else fp
    return float(inner.min())


class TestHamiltonian:
    def test_double_integrator_closed_form(self, backward_integrator):
        """max_u over {-1,1} of x2*p1 + u*p2 gives x2*p1 + |p2|."""
        spec = backward_integrator
        pool = spec.pool
        p = [pool.var("x1") * 0.0 + 0.7, pool.var("x2") * 0.0 - 1.3]
        h = build_hamiltonian(spec, p)
        for x2 in (-0.5, 0.0, 0.8):
            val = h.eval({"t": 0.0, "x1": 0.2, "x2": x2, "u1": 0.0})
            u_best = max(x2 * 0.7 + u * (-1.3) for u in (-1.0, 1.0))
            assert val == pytest.approx(u_best, abs=1e-12)

    def test_zero_dynamics(self):
        spec = SystemSpec.create(2, 1, 0, 0.0, 1.0, ["0", "0"], "x1",
                                 [(-1, 1), (-1, 1)], [(-1, 1)])
        p = [spec.pool.const(3.0), spec.pool.const(-2.0)]
        h = build_hamiltonian(spec, p)
        assert h.eval({"t": 0.0, "x1": 0.5, "x2": 0.5, "u1": 0.0}) == 0.0

    def test_degenerate_point_boxes(self):
        spec = SystemSpec.create(1, 1, 1, 0.0, 1.0, ["x1 + 2*u1 - d1"], "x1",
                                 [(-1, 1)], [(0.5, 0.5)], [(0.25, 0.25)])
        p = [spec.pool.const(1.0)]
        h = build_hamiltonian(spec, p)
        val = h.eval({"t": 0.0, "x1": 0.3, "u1": 0.0, "d1": 0.0})
        assert val == pytest.approx(0.3 + 2 * 0.5 - 0.25, abs=1e-12)

    def test_non_affine_control_rejected(self):
        spec = SystemSpec.create(1, 1, 0, 0.0, 1.0, ["u1^2"], "x1",
                                 [(-1, 1)], [(-1, 1)])
        with pytest.raises(UnsupportedSystemError):
            build_hamiltonian(spec, [spec.pool.const(1.0)])

    def test_bilinear_in_inputs_rejected(self):
        spec = SystemSpec.create(1, 1, 1, 0.0, 1.0, ["u1 * d1"], "x1",
                                 [(-1, 1)], [(-1, 1)], [(-1, 1)])
        with pytest.raises(UnsupportedSystemError):
            build_hamiltonian(spec, [spec.pool.const(1.0)])

    @pytest.mark.parametrize("orientation", ["max-min", "min-max"])
    def test_vertex_decomposition_matches_grid_search(self, orientation):
        """Exactness of the closed form for an input-affine system with
        state-dependent input coefficients and a disturbance: agree with a
        101-points-per-input-dimension exhaustive grid to 1e-9."""
        spec = SystemSpec.create(
            2, 2, 1, 0.0, 1.0,
            ["x2 + (1 + x1^2) * u1 - 0.5 * d1", "sin(x1) * u2 + x2 * d1"],
            "x1^2 + x2^2 - 0.5", [(-1, 1), (-1, 1)],
            [(-1, 1), (-2, 0.5)], [(-0.3, 0.7)], orientation=orientation)
        pool = spec.pool
        p_exprs = [pool.var("x2") + 0.4, pool.sin(pool.var("x1")) - 0.6]
        h = build_hamiltonian(spec, p_exprs)
        rng = np.random.default_rng(17)
        worst = 0.0
        for _ in range(60):
            t = rng.uniform(0, 1)
            x = rng.uniform(-1, 1, 2)
            assignment = {"t": t, "x1": x[0], "x2": x[1],
                          "u1": 0.0, "u2": 0.0, "d1": 0.0}
            p = [pe.eval(assignment) for pe in p_exprs]
            got = h.eval(assignment)
            want = brute_force_hamiltonian(spec, t, x, p)
            worst = max(worst, abs(got - want))
        assert worst <= 1e-9

    def test_vertex_decomposition_single_control_many_samples(self, double_integrator):
        """1e3 random (t, x, p) against the 101-point grid for the case
        study (single control dimension)."""
        spec = double_integrator
        pool = spec.pool
        p_exprs = [pool.var("x1") + 0.2, pool.var("x2") * 2.0]
        h = build_hamiltonian(spec, p_exprs)
        rng = np.random.default_rng(29)
        worst = 0.0
        for _ in range(1000):
            t = rng.uniform(0, 1)
            x = rng.uniform(-1, 1, 2)
            assignment = {"t": t, "x1": x[0], "x2": x[1], "u1": 0.0}
            p = [pe.eval(assignment) for pe in p_exprs]
            got = h.eval(assignment)
            want = brute_force_hamiltonian(spec, t, x, p)
            worst = max(worst, abs(got - want))
        assert worst <= 1e-9

    def test_numeric_matches_symbolic(self, double_integrator):
        spec = double_integrator
        pool = spec.pool
        p_exprs = [pool.var("x1") + 0.2, pool.var("x2") * 2.0]
        h_expr = build_hamiltonian(spec, p_exprs)
        rng = np.random.default_rng(3)
        t = rng.uniform(0, 1, 200)
        x = rng.uniform(-1, 1, (200, 2))
        p = np.stack([x[:, 0] + 0.2, 2.0 * x[:, 1]], axis=1)
        h_num = hamiltonian_values(spec, t, x, p)
        assignments = [{"t": t[i], "x1": x[i, 0], "x2": x[i, 1], "u1": 0.0}
                       for i in range(200)]
        h_sym = np.array([h_expr.eval(a) for a in assignments])
        assert np.abs(h_num - h_sym).max() <= 1e-9


class TestResiduals:
    def test_net_equals_target_gives_zero_r1(self, double_integrator):
        spec = double_integrator
        pair = build_residuals(spec, spec.target)
        # R1 = g - g collapses to the constant zero
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = rng.uniform(-1, 1, 2)
            assert pair.r1.eval({"x1": x[0], "x2": x[1]}) == 0.0

    def test_constant_net(self, double_integrator):
        spec = double_integrator
        pair = build_residuals(spec, spec.pool.const(2.5))
        rng = np.random.default_rng(1)
        for _ in range(20):
            t, x = rng.uniform(0, 1), rng.uniform(-1, 1, 2)
            a = {"t": t, "x1": x[0], "x2": x[1]}
            g = spec.target.eval(a)
            assert pair.r1.eval(a) == pytest.approx(2.5 - g, abs=1e-14)
            assert pair.r2.eval(a) == 0.0

    def test_r2_matches_trainer_loss_path(self, double_integrator, small_net):
        """Two-path agreement: symbolic R2 equals the trainer's numeric
        D_t V + min(0, H) at random samples."""
        spec = double_integrator
        net = small_net
        closure = net.to_expr(spec.pool, (0, 1, 2))
        pair = build_residuals(spec, closure)
        rng = np.random.default_rng(5)
        t = rng.uniform(0, 1, 300)
        x = rng.uniform(-1, 1, (300, 2))
        v, vt, vx = net.value_and_input_grads(t, x)
        h = hamiltonian_values(spec, t, x, vx)
        r2_num = vt + np.minimum(0.0, h)
        cols = {0: t, 1: x[:, 0], 2: x[:, 1]}
        r2_sym = spec.pool.eval_batch([pair.r2], cols)[0]
        assert np.abs(r2_num - r2_sym).max() <= 1e-9

    def test_variable_domains(self, double_integrator):
        spec = double_integrator
        closure = spec.pool.var("t") + spec.target
        pair = build_residuals(spec, closure)
        assert spec.t_index not in pair.r1.free_vars()
        assert pair.r2.free_vars() <= {spec.t_index, *spec.x_indices}


class TestForwardMode:
    def test_value_dynamics_reversed(self, double_integrator):
        spec = double_integrator
        # declared f = (x2, u); value-side dynamics must be (-x2, -u)
        a = {"t": 0.3, "x1": 0.1, "x2": 0.7, "u1": -0.4}
        vals = [f.eval(a) for f in spec.value_dynamics]
        assert vals[0] == pytest.approx(-0.7)
        assert vals[1] == pytest.approx(0.4)

    def test_time_reversal_substitutes_t(self):
        spec = SystemSpec.create(1, 0, 0, 0.0, 2.0, ["t"], "x1", [(-1, 1)],
                                 mode="forward-set")
        # f = t  ->  value dynamics -f(t0+T-t) = -(2 - t)
        val = spec.value_dynamics[0].eval({"t": 0.5, "x1": 0.0})
        assert val == pytest.approx(-(2.0 - 0.5))


class TestDeclarationFiles:
    def test_round_trip(self, tmp_path):
        text = """
[system]
state_dim = 2
control_dim = 1
t0 = 0.0
horizon = 1.0
mode = forward-set
orientation = min-max
f1 = x2
f2 = u1
g = x1^2 + x2^2 - 0.5
x1 = -1 1
x2 = -1 1
u1 = -1 1
"""
        path = tmp_path / "sys.ini"
        path.write_text(text)
        spec = load_system(path)
        assert spec.state_dim == 2
        assert spec.mode == "forward-set"
        assert spec.target.eval({"x1": 0.0, "x2": 0.0}) == -0.5

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_system(tmp_path / "nope.ini")

    def test_missing_field_named(self, tmp_path):
        path = tmp_path / "sys.ini"
        path.write_text("[system]\nstate_dim = 1\nhorizon = 1.0\nf1 = x1\nx1 = -1 1\n")
        with pytest.raises(ConfigError, match="'g'"):
            load_system(path)

    def test_bad_interval(self, tmp_path):
        path = tmp_path / "sys.ini"
        path.write_text("[system]\nstate_dim = 1\nhorizon = 1.0\nf1 = x1\n"
                        "g = x1\nx1 = -1\n")
        with pytest.raises(ConfigError, match="x1"):
            load_system(path)

    def test_horizon_before_t0_rejected(self):
        with pytest.raises(ConfigError):
            SystemSpec.create(1, 0, 0, 1.0, 0.5, ["x1"], "x1", [(-1, 1)])

    def test_target_with_time_rejected(self):
        with pytest.raises(ConfigError, match="state variables"):
            SystemSpec.create(1, 0, 0, 0.0, 1.0, ["x1"], "x1 + t", [(-1, 1)])
