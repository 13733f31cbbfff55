"""Independent ground truth: trajectory integration, sampled reachable
clouds, and a small finite-difference level-set solver.

* ``simulate`` integrates the declared (physical) dynamics with classical
  fixed-step RK4 under piecewise-constant inputs.
* ``sampled_reachable`` (forward-set mode) draws start states from the
  initial set {g <= 0}, applies bang-bang controls on a switching grid, and
  records every visited state.  Recorded states carry time stamps in the
  value function's native convention (stamp = T - elapsed), so they can be
  classified directly against a certified value.
* ``levelset_solve`` marches the first-order Lax-Friedrichs scheme for
  ``D_t V + min(0, H) = 0`` backward from ``V(T, .) = g`` on a grid padded
  beyond X by the dynamics' reach, so the restriction to X is free of
  artificial-boundary error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .system import MODE_FORWARD, SystemSpec, control_vertices, hamiltonian_values

__all__ = [
    "Trajectory",
    "PointCloud",
    "CflError",
    "simulate",
    "simulate_ensemble",
    "sampled_reachable",
    "LevelsetResult",
    "levelset_solve",
]


class CflError(ValueError):
    """Time step violates the CFL bound; carries the largest admissible step."""

    def __init__(self, dt: float, required: float):
        super().__init__(f"time step {dt} violates CFL; need dt <= {required}")
        self.required = required


@dataclass
class Trajectory:
    times: np.ndarray          # (k+1,) physical times, uniform step
    states: np.ndarray         # (k+1, m)
    controls: np.ndarray       # (k, dim_u), held on [t_i, t_{i+1})
    truncated: bool = False    # left the safety bounding box


@dataclass
class PointCloud:
    """Visited states with native-convention time stamps."""

    stamps: np.ndarray         # (N,), t = T - elapsed
    states: np.ndarray         # (N, m)
    n_trajectories: int = 0
    n_truncated: int = 0


def _dynamics_columns(spec: SystemSpec, t, x, u, d):
    cols = {spec.t_index: t}
    for i in range(spec.state_dim):
        cols[spec.x_index(i)] = x[:, i]
    for j in range(spec.control_dim):
        cols[spec.u_index(j)] = u[:, j]
    for q in range(spec.disturbance_dim):
        cols[spec.d_index(q)] = d[:, q]
    return cols


def _eval_dynamics(spec: SystemSpec, t, x, u, d) -> np.ndarray:
    n = x.shape[0]
    t = np.broadcast_to(np.asarray(t, float), (n,))
    vals = spec.pool.eval_batch(spec.dynamics, _dynamics_columns(spec, t, x, u, d))
    return np.stack(vals, axis=1)


def simulate_ensemble(
    spec: SystemSpec,
    x0: np.ndarray,
    control_values: np.ndarray,
    h: float,
    duration: float | None = None,
    disturbance_values: np.ndarray | None = None,
    safety_box: tuple[np.ndarray, np.ndarray] | None = None,
    record_every: int = 1,
):
    """Vectorized RK4 over an ensemble of trajectories.

    ``control_values`` has shape (n, segments, dim_u): each control is held
    constant over an equal share of the duration.  Returns (times (k+1,),
    states (k+1, n, m), active (k+1, n)); a trajectory whose state leaves the
    safety box stops being recorded from the first outside sample on.
    """
    x0 = np.atleast_2d(np.asarray(x0, float))
    n, m = x0.shape
    duration = spec.horizon - spec.t0 if duration is None else float(duration)
    n_steps = max(1, int(round(duration / h)))
    segments = control_values.shape[1] if spec.control_dim else 1
    if disturbance_values is None:
        d_ctr = 0.5 * (spec.disturbance_lo + spec.disturbance_hi)
        disturbance_values = np.broadcast_to(d_ctr, (n, segments, spec.disturbance_dim))

    times = spec.t0 + h * np.arange(n_steps + 1)
    rec = list(range(0, n_steps + 1, record_every))
    if rec[-1] != n_steps:
        rec.append(n_steps)
    states = np.empty((len(rec), n, m))
    active = np.ones((len(rec), n), dtype=bool)
    alive = np.ones(n, dtype=bool)

    x = x0.copy()
    if safety_box is not None:
        lo, hi = safety_box
        alive &= np.all((x >= lo) & (x <= hi), axis=1)
    states[0] = x
    active[0] = alive
    ri = 1
    for step in range(n_steps):
        t = times[step]
        seg = min(int(segments * step / n_steps), segments - 1)
        u = control_values[:, seg, :] if spec.control_dim else np.zeros((n, 0))
        d = disturbance_values[:, seg, :] if spec.disturbance_dim else np.zeros((n, 0))
        k1 = _eval_dynamics(spec, t, x, u, d)
        k2 = _eval_dynamics(spec, t + 0.5 * h, x + 0.5 * h * k1, u, d)
        k3 = _eval_dynamics(spec, t + 0.5 * h, x + 0.5 * h * k2, u, d)
        k4 = _eval_dynamics(spec, t + h, x + h * k3, u, d)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if safety_box is not None:
            alive = alive & np.all((x >= lo) & (x <= hi), axis=1)
        if step + 1 == rec[ri]:
            states[ri] = x
            active[ri] = alive
            ri += 1
    return times[rec], states, active


def simulate(
    spec: SystemSpec,
    x0,
    controls,
    h: float,
    duration: float | None = None,
    safety_box: tuple[np.ndarray, np.ndarray] | None = None,
) -> Trajectory:
    """Integrate one trajectory of the declared dynamics.

    ``controls`` is a constant vector or an array (segments, dim_u) of
    piecewise-constant values spread uniformly over the duration.
    """
    x0 = np.asarray(x0, float)
    u = np.asarray(controls, float)
    if spec.control_dim == 0:
        u = np.zeros((1, 1, 0))
    elif u.ndim == 1:
        u = u[None, None, :]
    else:
        u = u[None, :, :]
    times, states, active = simulate_ensemble(
        spec, x0[None, :], u, h, duration=duration, safety_box=safety_box)
    n_steps = len(times) - 1
    segments = u.shape[1]
    seg_idx = np.minimum((segments * np.arange(n_steps) / n_steps).astype(int),
                         segments - 1)
    ctrl = u[0, seg_idx, :]
    truncated = not bool(active[-1, 0])
    if truncated:
        last = int(np.argmin(active[:, 0])) if not active[:, 0].all() else len(times)
        times, states = times[:last], states[:last]
        ctrl = ctrl[:max(0, last - 1)]
    return Trajectory(times=times, states=states[:, 0, :], controls=ctrl,
                      truncated=truncated)


def sample_initial_states(spec: SystemSpec, n: int, rng: np.random.Generator,
                          max_tries: int = 1000) -> np.ndarray:
    """Uniform rejection sampling from {g <= 0} intersected with X."""
    pool = spec.pool
    out = np.empty((n, spec.state_dim))
    have = 0
    for _ in range(max_tries):
        if have >= n:
            break
        cand = rng.uniform(spec.domain.lo, spec.domain.hi,
                           size=(max(n - have, 32), spec.state_dim))
        cols = {spec.x_index(i): cand[:, i] for i in range(spec.state_dim)}
        g = pool.eval_batch([spec.target], cols)[0]
        good = cand[g <= 0.0]
        take = min(len(good), n - have)
        out[have:have + take] = good[:take]
        have += take
    if have < n:
        raise RuntimeError("initial set {g <= 0} appears to have negligible volume in X")
    return out


def sampled_reachable(
    spec: SystemSpec,
    n_trajectories: int,
    seed: int,
    h: float = 1e-3,
    switches: int = 8,
    record_every: int = 1,
    safety_box: tuple[np.ndarray, np.ndarray] | None = None,
) -> PointCloud:
    """Empirical under-approximation of the forward reachable tube.

    Start states are uniform in {g <= 0}; controls are bang-bang (a random
    vertex of U per switching segment).  Every recorded state is reachable by
    construction (up to integration error).  Stamps are native-convention:
    ``stamp = T - elapsed`` so a state visited after elapsed time e belongs
    to the sub-zero set of V(T - e, .).
    """
    if spec.mode != MODE_FORWARD:
        raise ValueError("sampled_reachable requires forward-set mode")
    rng = np.random.default_rng(seed)
    if n_trajectories == 0:
        return PointCloud(np.empty(0), np.empty((0, spec.state_dim)), 0, 0)
    if safety_box is None:
        safety_box = (spec.domain.lo, spec.domain.hi)
    x0 = sample_initial_states(spec, n_trajectories, rng)
    verts = control_vertices(spec)
    choice = rng.integers(0, len(verts), size=(n_trajectories, switches))
    controls = verts[choice]
    times, states, active = simulate_ensemble(
        spec, x0, controls, h, duration=spec.horizon - spec.t0,
        safety_box=safety_box, record_every=record_every)
    elapsed = times - spec.t0
    stamps = spec.horizon - elapsed
    mask = active.ravel()
    rep_stamps = np.repeat(stamps, n_trajectories)[mask]
    rep_states = states.reshape(-1, spec.state_dim)[mask]
    n_trunc = int((~active[-1]).sum())
    return PointCloud(stamps=rep_stamps, states=rep_states,
                      n_trajectories=n_trajectories, n_truncated=n_trunc)


# -- level-set solver ---------------------------------------------------------------


@dataclass
class LevelsetResult:
    axes: list[np.ndarray]             # padded node coordinates per dimension
    x_slice: tuple[slice, ...]         # indexing the X sub-grid
    values_t0: np.ndarray              # V(t0, .) on the padded grid
    saved: dict[float, np.ndarray]     # time -> V on the padded grid
    dt: float
    cfl_limit: float
    dissipation: np.ndarray
    residual_estimate: float

    @property
    def x_axes(self) -> list[np.ndarray]:
        return [ax[s] for ax, s in zip(self.axes, self.x_slice)]

    def values_on_x(self, t: float | None = None) -> np.ndarray:
        v = self.values_t0 if t is None else self.saved[self._nearest(t)]
        return v[self.x_slice]

    def _nearest(self, t: float) -> float:
        keys = list(self.saved)
        return keys[int(np.argmin([abs(k - t) for k in keys]))]

    def interpolate(self, t: float, points: np.ndarray) -> np.ndarray:
        """Multilinear interpolation of the saved slice nearest to t."""
        v = self.saved[self._nearest(t)]
        return _multilinear(self.axes, v, np.atleast_2d(points))


def _multilinear(axes, grid, pts):
    m = len(axes)
    idx = []
    frac = []
    for j in range(m):
        ax = axes[j]
        i = np.clip(np.searchsorted(ax, pts[:, j]) - 1, 0, len(ax) - 2)
        idx.append(i)
        frac.append(np.clip((pts[:, j] - ax[i]) / (ax[i + 1] - ax[i]), 0.0, 1.0))
    out = np.zeros(pts.shape[0])
    for corner in range(1 << m):
        weight = np.ones(pts.shape[0])
        coords = []
        for j in range(m):
            if corner >> j & 1:
                weight = weight * frac[j]
                coords.append(idx[j] + 1)
            else:
                weight = weight * (1.0 - frac[j])
                coords.append(idx[j])
        out += weight * grid[tuple(coords)]
    return out


def _speed_bounds(spec: SystemSpec, pad: np.ndarray) -> np.ndarray:
    """Interval bound on |f_i| (value convention) over [t0,T] x (X grown by
    pad) x U x D."""
    pool = spec.pool
    lo_cols = {spec.t_index: np.array([spec.t0])}
    hi_cols = {spec.t_index: np.array([spec.horizon])}
    for i in range(spec.state_dim):
        lo_cols[spec.x_index(i)] = np.array([spec.domain.lo[i] - pad[i]])
        hi_cols[spec.x_index(i)] = np.array([spec.domain.hi[i] + pad[i]])
    for j in range(spec.control_dim):
        lo_cols[spec.u_index(j)] = np.array([spec.control_lo[j]])
        hi_cols[spec.u_index(j)] = np.array([spec.control_hi[j]])
    for q in range(spec.disturbance_dim):
        lo_cols[spec.d_index(q)] = np.array([spec.disturbance_lo[q]])
        hi_cols[spec.d_index(q)] = np.array([spec.disturbance_hi[q]])
    los, his = pool.eval_interval_batch(spec.value_dynamics, lo_cols, hi_cols)
    return np.array([max(abs(float(l[0])), abs(float(h[0]))) for l, h in zip(los, his)])


def _auto_padding(spec: SystemSpec) -> np.ndarray:
    """Domain-of-dependence padding: fixed-point of pad = span * sup|f|."""
    span = spec.horizon - spec.t0
    if spec.c1 is not None:
        return np.full(spec.state_dim, spec.c1 * span)
    pad = np.zeros(spec.state_dim)
    for _ in range(5):
        new = span * _speed_bounds(spec, pad)
        if np.all(new <= pad * (1 + 1e-9) + 1e-12):
            return new
        pad = new
    return pad


def levelset_cfl_limit(spec: SystemSpec, resolution: int,
                       pad: np.ndarray | None = None) -> float:
    """Largest admissible time step for :func:`levelset_solve`."""
    if pad is None:
        pad = _auto_padding(spec)
    h = (spec.domain.hi - spec.domain.lo) / (resolution - 1)
    diss = _dissipation_coefficients(spec, np.asarray(pad, float))
    cfl_sum = float((diss / h).sum())
    return np.inf if cfl_sum == 0.0 else 1.0 / cfl_sum


def _dissipation_coefficients(spec: SystemSpec, pad: np.ndarray) -> np.ndarray:
    """Global bounds on |dH/dp_i| over the padded domain."""
    parts = spec.affine_parts()
    diss = _coef_bounds(spec, parts.alpha, pad)
    u_w = np.abs(0.5 * (spec.control_lo + spec.control_hi)) + 0.5 * (
        spec.control_hi - spec.control_lo)
    d_w = np.abs(0.5 * (spec.disturbance_lo + spec.disturbance_hi)) + 0.5 * (
        spec.disturbance_hi - spec.disturbance_lo)
    for i in range(spec.state_dim):
        for j in range(spec.control_dim):
            diss[i] += u_w[j] * _coef_bounds(spec, [parts.B[i][j]], pad)[0]
        for q in range(spec.disturbance_dim):
            diss[i] += d_w[q] * _coef_bounds(spec, [parts.C[i][q]], pad)[0]
    return diss


def levelset_solve(
    spec: SystemSpec,
    resolution: int,
    dt: float,
    save_times=None,
    pad: np.ndarray | None = None,
    residual_stride: int = 10,
) -> LevelsetResult:
    """First-order Lax-Friedrichs scheme for the frozen HJ equation, marching
    backward from V(T, .) = g.

    The update takes the minimum of the previous slice and one dissipated
    unfrozen step, ``V <- V + dt * min(0, H(x, p_bar) + dissipation)``, with
    global dissipation coefficients from interval bounds on dH/dp; the freeze
    makes V non-increasing backward in time by construction.  The step count
    is ``ceil(span/dt)`` with a uniform step <= dt.  Raises :class:`CflError`
    when dt exceeds the admissible bound.
    """
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    m = spec.state_dim
    pool = spec.pool
    if pad is None:
        pad = _auto_padding(spec)
    pad = np.asarray(pad, float)

    h = (spec.domain.hi - spec.domain.lo) / (resolution - 1)
    n_pad = np.ceil(pad / h - 1e-9).astype(int)
    axes = []
    for i in range(m):
        left = spec.domain.lo[i] - n_pad[i] * h[i]
        count = resolution + 2 * n_pad[i]
        axes.append(left + h[i] * np.arange(count))
    x_slice = tuple(slice(n_pad[i], n_pad[i] + resolution) for i in range(m))

    diss = _dissipation_coefficients(spec, pad)
    cfl_sum = float((diss / h).sum())
    cfl_limit = np.inf if cfl_sum == 0.0 else 1.0 / cfl_sum
    if dt > cfl_limit:
        raise CflError(dt, cfl_limit)

    span = spec.horizon - spec.t0
    n_steps = max(1, int(np.ceil(span / dt - 1e-12)))
    dt_eff = span / n_steps

    mesh = np.meshgrid(*axes, indexing="ij")
    flat_x = np.stack([g.ravel() for g in mesh], axis=1)
    g_cols = {spec.x_index(i): flat_x[:, i] for i in range(m)}
    V = pool.eval_batch([spec.target], g_cols)[0].reshape(mesh[0].shape)

    save_times = sorted(set(float(t) for t in (save_times or [])), reverse=True)
    saved: dict[float, np.ndarray] = {}
    for st in save_times:
        if st >= spec.horizon - 1e-12:
            saved[st] = V.copy()
    residual_max = 0.0

    t = spec.horizon
    for step in range(n_steps):
        t_next = spec.horizon - (step + 1) * dt_eff
        dm, dp = _one_sided_diffs(V, h)
        pbar = np.stack([(0.5 * (dm[i] + dp[i])).ravel() for i in range(m)], axis=1)
        t_col = np.full(flat_x.shape[0], t)
        ham = hamiltonian_values(spec, t_col, flat_x, pbar).reshape(V.shape)
        d_total = np.zeros_like(V)
        for i in range(m):
            d_total += 0.5 * diss[i] * (dp[i] - dm[i])
        # min(previous, dissipated unfrozen step): non-increasing backward in t
        update = np.minimum(0.0, ham + d_total)
        if residual_stride and step % residual_stride == 0:
            interior = tuple(slice(1, -1) for _ in range(m))
            residual_max = max(residual_max, float(np.abs(update[interior]
                                                          - np.minimum(0.0, ham[interior])).max()))
        V = V + dt_eff * update
        t = t_next
        for st in save_times:
            if st not in saved and t <= st + 0.5 * dt_eff:
                saved[st] = V.copy()

    return LevelsetResult(axes=axes, x_slice=x_slice, values_t0=V, saved=saved,
                          dt=dt_eff, cfl_limit=cfl_limit, dissipation=diss,
                          residual_estimate=residual_max)


def _coef_bounds(spec: SystemSpec, exprs, pad: np.ndarray) -> np.ndarray:
    pool = spec.pool
    lo_cols = {spec.t_index: np.array([spec.t0])}
    hi_cols = {spec.t_index: np.array([spec.horizon])}
    for i in range(spec.state_dim):
        lo_cols[spec.x_index(i)] = np.array([spec.domain.lo[i] - pad[i]])
        hi_cols[spec.x_index(i)] = np.array([spec.domain.hi[i] + pad[i]])
    los, his = pool.eval_interval_batch(list(exprs), lo_cols, hi_cols)
    return np.array([max(abs(float(l[0])), abs(float(h[0]))) for l, h in zip(los, his)])


def _one_sided_diffs(V: np.ndarray, h: np.ndarray):
    """Backward/forward differences with linear-extrapolation ghost cells."""
    m = V.ndim
    dms, dps = [], []
    for axis in range(m):
        ghost_lo = 2.0 * np.take(V, [0], axis) - np.take(V, [1], axis)
        ghost_hi = 2.0 * np.take(V, [-1], axis) - np.take(V, [-2], axis)
        ext = np.concatenate([ghost_lo, V, ghost_hi], axis=axis)
        diff = np.diff(ext, axis=axis) / h[axis]
        index_lo = [slice(None)] * m
        index_lo[axis] = slice(0, V.shape[axis])
        index_hi = [slice(None)] * m
        index_hi[axis] = slice(1, V.shape[axis] + 1)
        dms.append(diff[tuple(index_lo)])
        dps.append(diff[tuple(index_hi)])
    return dms, dps
