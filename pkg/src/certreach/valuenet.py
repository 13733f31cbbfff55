"""Sine-activated value network with a polynomial input layer.

The network computes ``V(t, x)``: the inputs ``(t, x)`` are expanded to pure
powers ``(t, x, t^2, x^2, ..)`` up to a configurable degree (no cross terms),
passed through sine-activated hidden layers (frequency factor omega on the
first layer only) and a linear output.

Everything is float64 numpy.  Input gradients use the layer-Jacobian
recursion; parameter gradients backpropagate through a combined
value-and-tangent forward pass, which covers objectives that mix ``V`` with
directional derivatives of ``V`` (the PDE residual losses).  ``to_expr``
emits the exact symbolic closure into a shared pool so the certified object
is the trained object.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .expr import Expr, ExprPool

__all__ = ["NetConfig", "ValueNet", "save_checkpoint", "load_checkpoint"]

CHECKPOINT_FORMAT = "certreach-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    state_dim: int
    hidden: tuple[int, ...] = (16,)
    omega: float = 30.0
    poly_degree: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.state_dim < 1:
            raise ValueError("state_dim must be >= 1")
        if not self.hidden or any(w < 1 for w in self.hidden):
            raise ValueError("hidden widths must be >= 1")
        if self.poly_degree < 1:
            raise ValueError("poly_degree must be >= 1")
        if not self.omega > 0:
            raise ValueError("omega must be > 0")
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))

    @property
    def input_dim(self) -> int:
        return 1 + self.state_dim

    @property
    def feature_dim(self) -> int:
        return self.poly_degree * self.input_dim


class ValueNet:
    """Parameters plus forward/gradient passes for the value function."""

    def __init__(self, config: NetConfig, params: Sequence[np.ndarray] | None = None):
        self.config = config
        if params is None:
            params = _siren_init(config)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        it = iter(params)
        dims = [config.feature_dim, *config.hidden]
        for fan_in, width in zip(dims[:-1], dims[1:]):
            W = np.asarray(next(it), dtype=float).reshape(width, fan_in)
            b = np.asarray(next(it), dtype=float).reshape(width)
            self.weights.append(W)
            self.biases.append(b)
        self.w_out = np.asarray(next(it), dtype=float).reshape(config.hidden[-1])
        self.b_out = float(np.asarray(next(it), dtype=float).reshape(()))
        self._check_finite()

    def _check_finite(self):
        for arr in (*self.weights, *self.biases, self.w_out):
            if not np.isfinite(arr).all():
                raise ValueError("network parameters must be finite")
        if not np.isfinite(self.b_out):
            raise ValueError("network parameters must be finite")

    # -- flat parameter vector ------------------------------------------------
    @property
    def num_params(self) -> int:
        n = sum(W.size + b.size for W, b in zip(self.weights, self.biases))
        return n + self.w_out.size + 1

    def params_flat(self) -> np.ndarray:
        chunks = []
        for W, b in zip(self.weights, self.biases):
            chunks.append(W.ravel())
            chunks.append(b)
        chunks.append(self.w_out)
        chunks.append(np.array([self.b_out]))
        return np.concatenate(chunks)

    def set_params_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.num_params,):
            raise ValueError(f"expected {self.num_params} parameters, got {flat.shape}")
        pos = 0
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[i] = flat[pos:pos + W.size].reshape(W.shape).copy()
            pos += W.size
            self.biases[i] = flat[pos:pos + b.size].copy()
            pos += b.size
        self.w_out = flat[pos:pos + self.w_out.size].copy()
        pos += self.w_out.size
        self.b_out = float(flat[pos])
        self._check_finite()

    def copy(self) -> "ValueNet":
        net = ValueNet.__new__(ValueNet)
        net.config = self.config
        net.weights = [W.copy() for W in self.weights]
        net.biases = [b.copy() for b in self.biases]
        net.w_out = self.w_out.copy()
        net.b_out = self.b_out
        return net

    # -- feature expansion ------------------------------------------------------
    def _features(self, inputs: np.ndarray) -> np.ndarray:
        q = self.config.poly_degree
        return np.concatenate([inputs ** p for p in range(1, q + 1)], axis=1)

    def _feature_derivs(self, inputs: np.ndarray) -> np.ndarray:
        """d(s_j^p)/ds_j laid out as (n, q, D); the full feature Jacobian is
        diagonal per power block, so it is never materialized."""
        q = self.config.poly_degree
        return np.stack([p * inputs ** (p - 1) for p in range(1, q + 1)], axis=1)

    def _w1_blocks(self) -> np.ndarray:
        """First-layer weights reshaped (H, q, D) to match the power blocks."""
        W1 = self.weights[0]
        q, D = self.config.poly_degree, self.config.input_dim
        return W1.reshape(W1.shape[0], q, D)

    def _stack_inputs(self, t, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.config.state_dim:
            raise ValueError(f"x must have {self.config.state_dim} columns")
        t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
        return np.concatenate([t[:, None], x], axis=1)

    # -- forward / gradients ------------------------------------------------------
    def forward(self, t, x):
        """V at (t, x); scalars in, scalar out; arrays in, array out."""
        scalar = np.isscalar(t) and np.asarray(x).ndim == 1
        inputs = self._stack_inputs(t, x)
        v = self._forward_inputs(inputs)
        return float(v[0]) if scalar else v

    def _forward_inputs(self, inputs: np.ndarray) -> np.ndarray:
        h = self._hidden_activations(inputs)[-1]
        return h @ self.w_out + self.b_out

    def _hidden_activations(self, inputs: np.ndarray) -> list[np.ndarray]:
        phi = self._features(inputs)
        acts = []
        h = phi
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W.T + b
            if i == 0:
                z = self.config.omega * z
            h = np.sin(z)
            acts.append(h)
        return acts

    def input_gradients(self, t, x):
        """(dV/dt, dV/dx) by reverse of the same computation as forward."""
        scalar = np.isscalar(t) and np.asarray(x).ndim == 1
        inputs = self._stack_inputs(t, x)
        _, grads = self._value_and_input_grads(inputs)
        if scalar:
            return float(grads[0, 0]), grads[0, 1:].copy()
        return grads[:, 0], grads[:, 1:]

    def _value_and_input_grads(self, inputs: np.ndarray):
        omega = self.config.omega
        phi = self._features(inputs)
        pd = self._feature_derivs(inputs)          # (n, q, D)
        w1b = self._w1_blocks()                    # (H, q, D)
        h = phi
        # first layer: Jacobian contraction reduces over the power blocks only
        z = omega * (phi @ self.weights[0].T + self.biases[0])
        WJ = np.einsum("kpj,npj->nkj", w1b, pd)    # (n, H, D), tiny p axis
        J = (omega * np.cos(z))[:, :, None] * WJ
        h = np.sin(z)
        for W, b in zip(self.weights[1:], self.biases[1:]):
            z = h @ W.T + b
            WJ = (J.transpose(0, 2, 1) @ W.T).transpose(0, 2, 1)
            J = np.cos(z)[:, :, None] * WJ
            h = np.sin(z)
        v = h @ self.w_out + self.b_out
        grads = (J * self.w_out[None, :, None]).sum(axis=1)
        return v, grads

    def value_and_input_grads(self, t, x):
        """Batched (V, dV/dt, dV/dx) in one pass."""
        inputs = self._stack_inputs(t, x)
        v, grads = self._value_and_input_grads(inputs)
        return v, grads[:, 0], grads[:, 1:]

    def parameter_gradients(self, t, x, value_seed: np.ndarray,
                            grad_seed: np.ndarray) -> np.ndarray:
        """Gradient of ``sum_i value_seed_i * V_i + grad_seed_i . dV_i/ds``
        with respect to the flat parameter vector (standard backpropagation
        through a combined value/tangent forward pass)."""
        inputs = self._stack_inputs(t, x)
        n = inputs.shape[0]
        alpha = np.asarray(value_seed, dtype=float).reshape(n)
        gamma = np.asarray(grad_seed, dtype=float).reshape(n, self.config.input_dim)
        omega = self.config.omega

        phi = self._features(inputs)
        pd = self._feature_derivs(inputs)
        phidot = (pd * gamma[:, None, :]).reshape(n, self.config.feature_dim)

        hs: list[np.ndarray] = [phi]
        hdots: list[np.ndarray] = [phidot]
        zs: list[np.ndarray] = []
        zdots: list[np.ndarray] = []
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = hs[-1] @ W.T + b
            zdot = hdots[-1] @ W.T
            if i == 0:
                z = omega * z
                zdot = omega * zdot
            zs.append(z)
            zdots.append(zdot)
            hs.append(np.sin(z))
            hdots.append(np.cos(z) * zdot)

        dW = [np.zeros_like(W) for W in self.weights]
        db = [np.zeros_like(b) for b in self.biases]
        dw_out = (alpha[:, None] * hs[-1] + hdots[-1]).sum(axis=0)
        db_out = float(alpha.sum())
        g_h = alpha[:, None] * self.w_out[None, :]
        g_hd = np.broadcast_to(self.w_out, (n, self.w_out.size)).copy()
        for i in range(len(self.weights) - 1, -1, -1):
            cz, sz = np.cos(zs[i]), np.sin(zs[i])
            gz = g_h * cz - g_hd * sz * zdots[i]
            gzd = g_hd * cz
            scale = omega if i == 0 else 1.0
            dW[i] = scale * (gz.T @ hs[i] + gzd.T @ hdots[i])
            db[i] = scale * gz.sum(axis=0)
            if i > 0:
                g_h = gz @ self.weights[i]
                g_hd = gzd @ self.weights[i]

        chunks = []
        for Wg, bg in zip(dW, db):
            chunks.append(Wg.ravel())
            chunks.append(bg)
        chunks.append(dw_out)
        chunks.append(np.array([db_out]))
        return np.concatenate(chunks)

    # -- symbolic closure -----------------------------------------------------------
    def to_expr(self, pool: ExprPool | None = None,
                var_indices: Sequence[int] | None = None) -> Expr:
        """Exact symbolic closure over (t, x1..xm); numerically identical to
        forward up to float re-association."""
        cfg = self.config
        if pool is None:
            pool = ExprPool(["t"] + [f"x{i+1}" for i in range(cfg.state_dim)])
        if var_indices is None:
            var_indices = tuple(range(cfg.input_dim))
        if len(var_indices) != cfg.input_dim:
            raise ValueError(f"need {cfg.input_dim} variable indices")
        svars = [pool.var(i) for i in var_indices]
        feats: list[Expr] = []
        for p in range(1, cfg.poly_degree + 1):
            feats.extend(pool.pow(s, p) for s in svars)
        h = feats
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            nxt = []
            for k in range(W.shape[0]):
                acc = pool.const(float(b[k]))
                for f in range(W.shape[1]):
                    acc = acc + pool.const(float(W[k, f])) * h[f]
                if i == 0:
                    acc = pool.const(cfg.omega) * acc
                nxt.append(pool.sin(acc))
            h = nxt
        out = pool.const(self.b_out)
        for k in range(len(h)):
            out = out + pool.const(float(self.w_out[k])) * h[k]
        return out


def _siren_init(cfg: NetConfig) -> list[np.ndarray]:
    """Sine-network initialization: first affine layer uniform in
    [-1/fan_in, 1/fan_in]; later layers uniform in
    [-sqrt(6/fan_in)/omega, sqrt(6/fan_in)/omega]; biases uniform in
    [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    rng = np.random.default_rng(cfg.seed)
    params: list[np.ndarray] = []
    dims = [cfg.feature_dim, *cfg.hidden]
    for layer, (fan_in, width) in enumerate(zip(dims[:-1], dims[1:])):
        if layer == 0:
            bound = 1.0 / fan_in
        else:
            bound = np.sqrt(6.0 / fan_in) / cfg.omega
        params.append(rng.uniform(-bound, bound, size=(width, fan_in)))
        params.append(rng.uniform(-1.0 / np.sqrt(fan_in), 1.0 / np.sqrt(fan_in), size=width))
    fan_in = dims[-1]
    bound = np.sqrt(6.0 / fan_in) / cfg.omega
    params.append(rng.uniform(-bound, bound, size=fan_in))
    params.append(np.zeros(1))
    return params


# -- checkpoints -----------------------------------------------------------------

def save_checkpoint(net: ValueNet, path: str | Path, metadata: dict | None = None) -> None:
    """Versioned JSON dump: config + flat parameters + metadata.  JSON floats
    round-trip exactly (shortest-repr doubles)."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": {
            "state_dim": net.config.state_dim,
            "hidden": list(net.config.hidden),
            "omega": net.config.omega,
            "poly_degree": net.config.poly_degree,
            "seed": net.config.seed,
        },
        "params": net.params_flat().tolist(),
        "metadata": metadata or {},
    }
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path: str | Path) -> tuple[ValueNet, dict]:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read checkpoint {path}: {exc}") from exc
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    c = payload["config"]
    cfg = NetConfig(state_dim=c["state_dim"], hidden=tuple(c["hidden"]),
                    omega=c["omega"], poly_degree=c["poly_degree"], seed=c["seed"])
    net = ValueNet(cfg)
    net.set_params_flat(np.array(payload["params"]))
    return net, payload.get("metadata", {})
