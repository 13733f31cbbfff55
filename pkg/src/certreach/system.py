"""Control-system declaration and residual construction.

A :class:`SystemSpec` owns one expression pool whose variable table is
``(t, x1..xm, u1..uk, d1..dl)``.  From it we build the closed-form
Hamiltonian (exact for dynamics jointly affine in control and disturbance)
and the two residuals the trainer minimizes and the certifier bounds:

* ``R1(x)   = V(T, x) - g(x)``                       (boundary mismatch)
* ``R2(t,x) = D_t V + min(0, H(t, x, D_x V))``       (PDE defect)

Forward reachable sets are realized by time reversal: the backward-tube
machinery runs on the reversed dynamics ``-f(t0+T-t, x, u, d)``, so the value
function's native time axis has ``t = T`` at the initial set and ``t = t0``
at the full-horizon tube.  All residuals, certificates and the level-set
oracle share this convention.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .expr import Expr, ExprPool, IntervalBox
from .formula import parse_formula

__all__ = [
    "SystemSpec",
    "ResidualPair",
    "AffineParts",
    "UnsupportedSystemError",
    "ConfigError",
    "build_hamiltonian",
    "build_residuals",
    "load_system",
]

MODE_BACKWARD = "backward-tube"
MODE_FORWARD = "forward-set"
ORIENT_MAX_MIN = "max-min"   # max over controls, min over disturbances
ORIENT_MIN_MAX = "min-max"


class UnsupportedSystemError(ValueError):
    """Dynamics are not jointly affine in (u, d); the closed-form Hamiltonian
    (and therefore sound certification) is unavailable."""


class ConfigError(ValueError):
    """A declaration file is malformed; message names the offending field."""


@dataclass
class SystemSpec:
    """The control system: dynamics, input boxes, target function, domain."""

    pool: ExprPool
    state_dim: int
    control_dim: int
    disturbance_dim: int
    t0: float
    horizon: float
    dynamics: list[Expr]
    target: Expr
    domain: IntervalBox
    control_lo: np.ndarray
    control_hi: np.ndarray
    disturbance_lo: np.ndarray
    disturbance_hi: np.ndarray
    mode: str = MODE_BACKWARD
    orientation: str = ORIENT_MAX_MIN
    c1: float | None = None
    c2: float | None = None
    _value_dynamics: list[Expr] | None = field(default=None, repr=False)
    _affine: "AffineParts | None" = field(default=None, repr=False)

    # variable index helpers -------------------------------------------------
    @property
    def t_index(self) -> int:
        return 0

    def x_index(self, i: int) -> int:
        return 1 + i

    def u_index(self, j: int) -> int:
        return 1 + self.state_dim + j

    def d_index(self, l: int) -> int:
        return 1 + self.state_dim + self.control_dim + l

    @property
    def x_indices(self) -> tuple[int, ...]:
        return tuple(range(1, 1 + self.state_dim))

    def __post_init__(self):
        m = self.state_dim
        if self.horizon < self.t0:
            raise ConfigError("horizon must satisfy T >= t0")
        if len(self.dynamics) != m:
            raise ConfigError(f"dynamics needs {m} components, got {len(self.dynamics)}")
        if self.domain.var_indices != self.x_indices:
            raise ConfigError("domain box must cover exactly the state variables")
        for name, lo, hi, n in (("control", self.control_lo, self.control_hi, self.control_dim),
                                ("disturbance", self.disturbance_lo, self.disturbance_hi,
                                 self.disturbance_dim)):
            lo, hi = np.asarray(lo, float), np.asarray(hi, float)
            if lo.shape != (n,) or hi.shape != (n,):
                raise ConfigError(f"{name} box has wrong dimension")
            if n and (not np.isfinite(lo).all() or not np.isfinite(hi).all() or np.any(lo > hi)):
                raise ConfigError(f"{name} box must be finite with lo <= hi")
        if self.mode not in (MODE_BACKWARD, MODE_FORWARD):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.orientation not in (ORIENT_MAX_MIN, ORIENT_MIN_MAX):
            raise ConfigError(f"unknown orientation {self.orientation!r}")
        bad = self.pool.free_vars(self.target) - set(self.x_indices)
        if bad:
            names = [self.pool.variables[i] for i in sorted(bad)]
            raise ConfigError(f"g may depend only on state variables, found {names}")

    # -------------------------------------------------------------------------
    @classmethod
    def create(
        cls,
        state_dim: int,
        control_dim: int,
        disturbance_dim: int,
        t0: float,
        horizon: float,
        dynamics: Sequence[str],
        target: str,
        domain: Sequence[tuple[float, float]],
        control_box: Sequence[tuple[float, float]] = (),
        disturbance_box: Sequence[tuple[float, float]] = (),
        mode: str = MODE_BACKWARD,
        orientation: str = ORIENT_MAX_MIN,
        c1: float | None = None,
        c2: float | None = None,
    ) -> "SystemSpec":
        names = (["t"] + [f"x{i+1}" for i in range(state_dim)]
                 + [f"u{j+1}" for j in range(control_dim)]
                 + [f"d{l+1}" for l in range(disturbance_dim)])
        pool = ExprPool(names)
        f = [parse_formula(src, pool) for src in dynamics]
        g = parse_formula(target, pool)
        if len(domain) != state_dim:
            raise ConfigError("domain needs one interval per state variable")
        box = IntervalBox(tuple(range(1, 1 + state_dim)),
                          np.array([d[0] for d in domain], float),
                          np.array([d[1] for d in domain], float))
        return cls(
            pool=pool, state_dim=state_dim, control_dim=control_dim,
            disturbance_dim=disturbance_dim, t0=float(t0), horizon=float(horizon),
            dynamics=f, target=g, domain=box,
            control_lo=np.array([b[0] for b in control_box], float),
            control_hi=np.array([b[1] for b in control_box], float),
            disturbance_lo=np.array([b[0] for b in disturbance_box], float),
            disturbance_hi=np.array([b[1] for b in disturbance_box], float),
            mode=mode, orientation=orientation, c1=c1, c2=c2,
        )

    # -------------------------------------------------------------------------
    @property
    def value_dynamics(self) -> list[Expr]:
        """Dynamics as seen by the value machinery: the declared f for
        backward tubes, the time-reversed ``-f(t0+T-t, ...)`` for forward
        sets."""
        if self._value_dynamics is None:
            if self.mode == MODE_FORWARD:
                pool = self.pool
                t_rev = pool.const(self.t0 + self.horizon) - pool.var(self.t_index)
                self._value_dynamics = [
                    -pool.substitute(f_i, {self.t_index: t_rev}) for f_i in self.dynamics
                ]
            else:
                self._value_dynamics = list(self.dynamics)
        return self._value_dynamics

    def affine_parts(self) -> "AffineParts":
        if self._affine is None:
            self._affine = AffineParts.from_system(self)
        return self._affine

    def time_space_box(self) -> IntervalBox:
        """[t0, T] x X as one box."""
        return IntervalBox((self.t_index,) + self.x_indices,
                           np.concatenate(([self.t0], self.domain.lo)),
                           np.concatenate(([self.horizon], self.domain.hi)))


@dataclass(frozen=True)
class ResidualPair:
    """Boundary residual R1 (over x) and PDE residual R2 (over (t, x))."""

    r1: Expr
    r2: Expr

    def validate(self, spec: SystemSpec) -> None:
        if spec.t_index in spec.pool.free_vars(self.r1):
            raise ValueError("R1 must not depend on t")
        allowed = {spec.t_index, *spec.x_indices}
        if not spec.pool.free_vars(self.r2) <= allowed:
            raise ValueError("R2 may only depend on (t, x)")


@dataclass(frozen=True)
class AffineParts:
    """Exact decomposition ``f_i = alpha_i(t,x) + sum_j B_ij(t,x) u_j +
    sum_l C_il(t,x) d_l`` of the value-convention dynamics.

    Construction fails with :class:`UnsupportedSystemError` when any
    coefficient expression still mentions an input variable (the structural
    affineness check)."""

    alpha: tuple[Expr, ...]
    B: tuple[tuple[Expr, ...], ...]   # [i][j]
    C: tuple[tuple[Expr, ...], ...]   # [i][l]

    @classmethod
    def from_system(cls, spec: SystemSpec) -> "AffineParts":
        pool = spec.pool
        m, k, l = spec.state_dim, spec.control_dim, spec.disturbance_dim
        inputs = {spec.u_index(j) for j in range(k)} | {spec.d_index(q) for q in range(l)}
        zero_inputs = {idx: 0.0 for idx in inputs}

        def input_free(e: Expr, what: str) -> Expr:
            hit = pool.free_vars(e) & inputs
            if hit:
                names = [pool.variables[i] for i in sorted(hit)]
                raise UnsupportedSystemError(
                    f"dynamics are not affine in the inputs: {what} still depends on {names}")
            return e

        alpha, B, C = [], [], []
        for i, f_i in enumerate(spec.value_dynamics):
            alpha.append(input_free(pool.substitute(f_i, zero_inputs), f"f{i+1}(u=0,d=0)"))
            B.append(tuple(input_free(pool.differentiate(f_i, spec.u_index(j)),
                                      f"df{i+1}/du{j+1}") for j in range(k)))
            C.append(tuple(input_free(pool.differentiate(f_i, spec.d_index(q)),
                                      f"df{i+1}/dd{q+1}") for q in range(l)))
        return cls(tuple(alpha), tuple(B), tuple(C))

    def arrays(self, spec: SystemSpec, t: np.ndarray, x: np.ndarray):
        """Evaluate the coefficients on a batch: returns alpha (n, m),
        B (n, m, k), C (n, m, l)."""
        n = t.shape[0]
        m, k, l = spec.state_dim, spec.control_dim, spec.disturbance_dim
        cols = {spec.t_index: t}
        for i in range(m):
            cols[spec.x_index(i)] = x[:, i]
        roots = list(self.alpha) + [b for row in self.B for b in row] \
            + [c for row in self.C for c in row]
        flat = spec.pool.eval_batch(roots, cols)
        alpha = np.stack(flat[:m], axis=1)
        B = np.stack(flat[m:m + m * k], axis=1).reshape(n, m, k) if k else np.zeros((n, m, 0))
        C = np.stack(flat[m + m * k:], axis=1).reshape(n, m, l) if l else np.zeros((n, m, 0))
        return alpha, B, C


def _vertex_terms(spec: SystemSpec, coeff: Expr, lo: float, hi: float, maximize: bool) -> Expr:
    """Closed form of extremizing ``coeff * w`` over w in [lo, hi]."""
    pool = spec.pool
    ctr, hw = 0.5 * (lo + hi), 0.5 * (hi - lo)
    term = coeff * ctr if ctr != 0.0 else pool.const(0.0)
    if hw != 0.0:
        mag = pool.absolute(coeff) * hw
        term = term + mag if maximize else term - mag
    return term


def build_hamiltonian(spec: SystemSpec, p: Sequence[Expr]) -> Expr:
    """Closed-form ``max_u min_d  f . p`` (orientation-dependent) for
    input-affine systems; exact by vertex decomposition."""
    if len(p) != spec.state_dim:
        raise ValueError(f"p needs {spec.state_dim} components")
    parts = spec.affine_parts()
    pool = spec.pool
    maximize_u = spec.orientation == ORIENT_MAX_MIN
    h = pool.const(0.0)
    for i in range(spec.state_dim):
        h = h + parts.alpha[i] * p[i]
    for j in range(spec.control_dim):
        b_j = pool.const(0.0)
        for i in range(spec.state_dim):
            b_j = b_j + parts.B[i][j] * p[i]
        h = h + _vertex_terms(spec, b_j, float(spec.control_lo[j]),
                              float(spec.control_hi[j]), maximize_u)
    for q in range(spec.disturbance_dim):
        c_q = pool.const(0.0)
        for i in range(spec.state_dim):
            c_q = c_q + parts.C[i][q] * p[i]
        h = h + _vertex_terms(spec, c_q, float(spec.disturbance_lo[q]),
                              float(spec.disturbance_hi[q]), not maximize_u)
    return h


def build_residuals(spec: SystemSpec, net_expr: Expr) -> ResidualPair:
    """R1 = V(T, x) - g(x);  R2 = D_t V + min(0, H(t, x, D_x V))."""
    pool = spec.pool
    allowed = {spec.t_index, *spec.x_indices}
    if not pool.free_vars(net_expr) <= allowed:
        raise ValueError("net expression may only depend on (t, x)")
    r1 = pool.substitute(net_expr, {spec.t_index: spec.horizon}) - spec.target
    p = [pool.differentiate(net_expr, spec.x_index(i)) for i in range(spec.state_dim)]
    ham = build_hamiltonian(spec, p)
    r2 = pool.differentiate(net_expr, spec.t_index) + pool.minimum(pool.const(0.0), ham)
    pair = ResidualPair(r1, r2)
    pair.validate(spec)
    return pair


# -- numeric Hamiltonian for the trainer / oracle --------------------------------

def hamiltonian_values(spec: SystemSpec, t: np.ndarray, x: np.ndarray, p: np.ndarray,
                       want_grad: bool = False):
    """Vectorized H(t, x, p) from the affine decomposition; optionally also
    dH/dp with the same tie conventions as the symbolic form (sign(0) = +1)."""
    parts = spec.affine_parts()
    alpha, B, C = parts.arrays(spec, t, x)
    maximize_u = spec.orientation == ORIENT_MAX_MIN
    u_ctr = 0.5 * (spec.control_lo + spec.control_hi)
    u_hw = 0.5 * (spec.control_hi - spec.control_lo)
    d_ctr = 0.5 * (spec.disturbance_lo + spec.disturbance_hi)
    d_hw = 0.5 * (spec.disturbance_hi - spec.disturbance_lo)
    su = 1.0 if maximize_u else -1.0

    h = np.einsum("ni,ni->n", alpha, p)
    b = np.einsum("nij,ni->nj", B, p)
    c = np.einsum("nil,ni->nl", C, p)
    h = h + b @ u_ctr + su * (np.abs(b) @ u_hw)
    h = h + c @ d_ctr - su * (np.abs(c) @ d_hw)
    if not want_grad:
        return h
    sign_b = np.where(b >= 0.0, 1.0, -1.0)
    sign_c = np.where(c >= 0.0, 1.0, -1.0)
    dh = alpha.copy()
    if spec.control_dim:
        dh += np.einsum("nij,nj->ni", B, u_ctr + su * u_hw * sign_b)
    if spec.disturbance_dim:
        dh += np.einsum("nil,nl->ni", C, d_ctr - su * d_hw * sign_c)
    return h, dh


def control_vertices(spec: SystemSpec) -> np.ndarray:
    """All vertices of the control box (2^k rows, or a single zero row when
    there are no controls)."""
    k = spec.control_dim
    if k == 0:
        return np.zeros((1, 0))
    corners = np.stack(np.meshgrid(*[[spec.control_lo[j], spec.control_hi[j]]
                                     for j in range(k)], indexing="ij"), axis=-1)
    return corners.reshape(-1, k)


# -- declaration files ------------------------------------------------------------

def _parse_interval_field(raw: str, field_name: str) -> tuple[float, float]:
    parts = raw.replace(",", " ").split()
    if len(parts) != 2:
        raise ConfigError(f"field {field_name!r} must be two numbers 'lo hi'")
    try:
        lo, hi = float(parts[0]), float(parts[1])
    except ValueError:
        raise ConfigError(f"field {field_name!r} must be numeric") from None
    return lo, hi


def load_system(source: str | Path | configparser.SectionProxy) -> SystemSpec:
    """Load a system declaration.

    Accepts a path to an INI file with a ``[system]`` section, or the section
    itself.  Keys: ``state_dim``, ``control_dim``, ``disturbance_dim``,
    ``t0``, ``horizon``, ``mode``, ``orientation``, formulas ``f1..fm`` and
    ``g``, per-variable boxes ``x1..xm``, ``u1..uk``, ``d1..dl`` as ``lo hi``
    pairs, optional ``c1``/``c2`` metadata bounds.
    """
    if isinstance(source, (str, Path)):
        path = Path(source)
        if not path.exists():
            raise ConfigError(f"system file not found: {path}")
        cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if "system" not in cp:
            raise ConfigError(f"{path} is missing a [system] section")
        section = cp["system"]
    else:
        section = source

    def need(key: str) -> str:
        if key not in section:
            raise ConfigError(f"missing field {key!r} in [system]")
        return section[key]

    try:
        m = int(need("state_dim"))
        k = int(section.get("control_dim", "0"))
        l = int(section.get("disturbance_dim", "0"))
        t0 = float(section.get("t0", "0.0"))
        horizon = float(need("horizon"))
    except ValueError as exc:
        raise ConfigError(f"bad numeric field in [system]: {exc}") from exc
    dynamics = [need(f"f{i+1}") for i in range(m)]
    domain = [_parse_interval_field(need(f"x{i+1}"), f"x{i+1}") for i in range(m)]
    control = [_parse_interval_field(need(f"u{j+1}"), f"u{j+1}") for j in range(k)]
    dist = [_parse_interval_field(need(f"d{q+1}"), f"d{q+1}") for q in range(l)]
    try:
        return SystemSpec.create(
            state_dim=m, control_dim=k, disturbance_dim=l, t0=t0, horizon=horizon,
            dynamics=dynamics, target=need("g"), domain=domain,
            control_box=control, disturbance_box=dist,
            mode=section.get("mode", MODE_BACKWARD),
            orientation=section.get("orientation", ORIENT_MAX_MIN),
            c1=float(section["c1"]) if "c1" in section else None,
            c2=float(section["c2"]) if "c2" in section else None,
        )
    except Exception as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
