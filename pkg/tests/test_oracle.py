import numpy as np
import pytest

from certreach import (CflError, SystemSpec, levelset_cfl_limit, levelset_solve,
                       sampled_reachable, simulate, simulate_ensemble)
from certreach.oracle import sample_initial_states


WIDE_BOX = (np.array([-10.0, -10.0]), np.array([10.0, 10.0]))


class TestSimulate:
    def test_double_integrator_closed_form(self, double_integrator):
        traj = simulate(double_integrator, [0.0, 0.0], np.array([1.0]), h=1e-3,
                        duration=1.0, safety_box=WIDE_BOX)
        assert traj.states[-1] == pytest.approx([0.5, 1.0], abs=1e-12)
        assert not traj.truncated

    def test_zero_control_stationary_velocity(self, double_integrator):
        traj = simulate(double_integrator, [0.3, 0.0], np.array([0.0]), h=1e-2,
                        duration=1.0, safety_box=WIDE_BOX)
        assert np.allclose(traj.states[:, 1], 0.0)
        assert np.allclose(traj.states[:, 0], 0.3)

    def test_step_halving_convergence(self, double_integrator):
        """RK4 self-consistency: halving h changes the endpoint < 1e-8."""
        controls = np.array([[0.7], [-1.0], [0.25], [1.0]])
        a = simulate(double_integrator, [0.1, -0.2], controls, h=1e-3,
                     duration=1.0, safety_box=WIDE_BOX)
        b = simulate(double_integrator, [0.1, -0.2], controls, h=5e-4,
                     duration=1.0, safety_box=WIDE_BOX)
        assert np.abs(a.states[-1] - b.states[-1]).max() <= 1e-8

    def test_truncation_at_safety_box(self, double_integrator):
        box = (np.array([-0.2, -2.0]), np.array([0.2, 2.0]))
        traj = simulate(double_integrator, [0.0, 0.0], np.array([1.0]), h=1e-2,
                        duration=1.0, safety_box=box)
        assert traj.truncated
        assert np.all(np.abs(traj.states[:, 0]) <= 0.2)

    def test_nonlinear_state_dynamics(self):
        # dx = -x^3: compare against a fine reference run
        spec = SystemSpec.create(1, 0, 0, 0.0, 1.0, ["-x1^3"], "x1", [(-2, 2)])
        a = simulate(spec, [1.5], np.zeros((1, 0)), h=1e-3, duration=1.0)
        b = simulate(spec, [1.5], np.zeros((1, 0)), h=1e-4, duration=1.0)
        assert abs(a.states[-1, 0] - b.states[-1, 0]) <= 1e-9

    def test_displacement_respects_speed_bound(self, double_integrator):
        # |f| <= sqrt(x2^2 + u^2) <= sqrt(2) on the box; C1 = 1.5 covers it
        h = 1e-2
        traj = simulate(double_integrator, [0.2, 0.4], np.array([1.0]), h=h,
                        duration=0.5, safety_box=WIDE_BOX)
        steps = np.linalg.norm(np.diff(traj.states, axis=0), axis=1)
        assert steps.max() <= 1.5 * h * (1 + 1e-6)


class TestSampledReachable:
    def test_empty_cloud(self, double_integrator):
        cloud = sampled_reachable(double_integrator, 0, seed=0)
        assert cloud.stamps.size == 0

    def test_requires_forward_mode(self, backward_integrator):
        with pytest.raises(ValueError, match="forward-set"):
            sampled_reachable(backward_integrator, 10, seed=0)

    def test_initial_states_inside_target(self, double_integrator):
        rng = np.random.default_rng(0)
        x0 = sample_initial_states(double_integrator, 500, rng)
        g = x0[:, 0] ** 2 + x0[:, 1] ** 2 - 0.5
        assert np.all(g <= 0.0)

    def test_stamps_native_convention(self, double_integrator):
        cloud = sampled_reachable(double_integrator, 20, seed=1, h=1e-2,
                                  record_every=5)
        assert cloud.stamps.max() == pytest.approx(1.0)   # elapsed 0 -> T
        assert cloud.stamps.min() >= 0.0
        assert cloud.states.shape[1] == 2

    def test_zero_control_cloud_is_drifted_initial_set(self):
        # degenerate U = {0}: ensemble just drifts with f = (x2, 0)
        spec = SystemSpec.create(2, 1, 0, 0.0, 1.0, ["x2", "u1"],
                                 "x1^2 + x2^2 - 0.5", [(-1, 1), (-1, 1)],
                                 [(0.0, 0.0)], mode="forward-set",
                                 orientation="min-max")
        cloud = sampled_reachable(spec, 50, seed=2, h=1e-2, record_every=100)
        # every recorded state still satisfies x2 unchanged within its start
        assert np.all(np.abs(cloud.states[:, 1]) <= np.sqrt(0.5) + 1e-9)

    def test_all_recorded_states_in_safety_box(self, double_integrator):
        cloud = sampled_reachable(double_integrator, 100, seed=3, h=1e-2)
        assert np.all(cloud.states >= -1.0 - 1e-12)
        assert np.all(cloud.states <= 1.0 + 1e-12)


class TestLevelset:
    def test_frozen_dynamics_keeps_target(self):
        spec = SystemSpec.create(1, 0, 0, 0.0, 1.0, ["0"], "x1^2 - 0.25",
                                 [(-1, 1)])
        res = levelset_solve(spec, 41, dt=0.1)
        xs = res.x_axes[0]
        assert np.abs(res.values_on_x() - (xs ** 2 - 0.25)).max() == 0.0

    def test_inactive_freeze_keeps_linear_target(self):
        # drift +1 with g = x1 + 10 >= 0: H = p1 = 1 > 0, min(0, H) = 0
        spec = SystemSpec.create(1, 0, 0, 0.0, 1.0, ["1"], "x1 + 10.0",
                                 [(-1, 1)])
        res = levelset_solve(spec, 21, dt=0.01)
        xs = res.x_axes[0]
        assert np.abs(res.values_on_x() - (xs + 10.0)).max() <= 1e-12

    def test_cfl_violation_reports_required_step(self, double_integrator):
        limit = levelset_cfl_limit(double_integrator, 51)
        with pytest.raises(CflError) as err:
            levelset_solve(double_integrator, 51, dt=2 * limit)
        assert err.value.required == pytest.approx(limit)

    def test_backward_monotone_in_time(self, double_integrator):
        res = levelset_solve(double_integrator, 41,
                             dt=0.9 * levelset_cfl_limit(double_integrator, 41),
                             save_times=[0.0, 0.25, 0.5, 0.75, 1.0])
        slices = [res.values_on_x(t) for t in (0.0, 0.25, 0.5, 0.75, 1.0)]
        for earlier, later in zip(slices, slices[1:]):
            assert np.all(earlier <= later + 1e-12)

    def test_terminal_slice_is_target(self, double_integrator):
        res = levelset_solve(double_integrator, 21,
                             dt=0.9 * levelset_cfl_limit(double_integrator, 21),
                             save_times=[1.0])
        xs = res.x_axes
        want = xs[0][:, None] ** 2 + xs[1][None, :] ** 2 - 0.5
        assert np.abs(res.values_on_x(1.0) - want).max() == 0.0

    def test_cloud_inside_grid_subzero_set(self, double_integrator):
        """Sampled reachable states lie in the grid solver's sub-zero set up
        to one grid cell of slack."""
        res = levelset_solve(double_integrator, 81,
                             dt=0.9 * levelset_cfl_limit(double_integrator, 81),
                             save_times=list(np.linspace(0, 1, 21)))
        cloud = sampled_reachable(double_integrator, 300, seed=7, h=1e-2,
                                  record_every=5)
        cell = 2.0 / 80
        # one-cell slack via the local value variation ~ |grad V| * h <= 3h
        for t_save in np.linspace(0, 1, 21):
            mask = np.abs(cloud.stamps - t_save) <= 0.025 + 1e-9
            if not mask.any():
                continue
            vals = res.interpolate(t_save, cloud.states[mask])
            assert vals.max() <= 3.0 * cell

    def test_resolution_must_be_positive(self, double_integrator):
        with pytest.raises(ValueError):
            levelset_solve(double_integrator, 1, dt=0.01)
