"""Losses and the three-phase curriculum trainer.

Per-sample losses (scalar absolute values)::

    L1_i = |V(T, x_i) - g(x_i)|      applied only where t_i = T
    L2_i = |D_t V + min(0, H(t_i, x_i, D_x V))|

The batch objective is ``mean_i(L1_i + lam*L2_i) + lam_max * max_i(...)``;
lam_max is 10% during pretraining/curriculum and 30% during finetuning.

Phases: pretraining samples all t at T until max L1 < eps1; curriculum grows
the time window from [T, T] down to [t0, T] in steps of delta_t, expanding
whenever max L2 < eps2; finetuning samples the full window and stops once
more than ``patience_limit`` epochs have seen max L2 < lam_eps * eps2.
When a certification counterexample is supplied, a fixed fraction of every
batch is drawn near it (pinned to t = T for boundary counterexamples).
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .system import SystemSpec, hamiltonian_values
from .valuenet import ValueNet

__all__ = [
    "TrainConfig",
    "Phase",
    "BiasPoint",
    "TrainResult",
    "sample_batch",
    "loss_terms",
    "total_loss",
    "run_curriculum",
    "empirical_max_losses",
    "write_training_log",
]

PRETRAINING = "pretraining"
CURRICULUM = "curriculum"
FINETUNE = "finetune"


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 2048
    lam: float = 1.0
    lam_max_curriculum: float = 0.10
    lam_max_finetune: float = 0.30
    lam_eps: float = 0.95
    patience_limit: int = 1000
    delta_t: float | None = None       # default (T - t0) / 10
    learning_rate: float = 1e-4
    lr_decay: float = 1.0              # per-epoch multiplicative schedule
    finetune_lr: float | None = None   # gentler rate for finetune-only re-entries
    optimizer: str = "adam"
    seed: int = 0
    cex_fraction: float = 0.10
    cex_radius_frac: float = 0.10      # bias-box radius as fraction of side length
    boundary_fraction: float = 0.20    # t = T anchor share in curriculum/finetune
    eps1: float = 0.015
    eps2: float = 0.285
    max_epochs: int = 100_000

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 < self.lam_eps < 1.0:
            raise ValueError("lam_eps must lie in (0, 1)")
        if self.delta_t is not None and not self.delta_t > 0:
            raise ValueError("delta_t must be > 0")
        if not 0.0 <= self.cex_fraction <= 1.0:
            raise ValueError("cex_fraction must lie in [0, 1]")
        if self.optimizer != "adam":
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class Phase:
    """Training phase; curriculum carries its time frontier, finetune its
    patience counter."""

    kind: str
    t_current: float = 0.0
    patience: int = 0

    @classmethod
    def pretraining(cls) -> "Phase":
        return cls(PRETRAINING)

    @classmethod
    def curriculum(cls, t_current: float) -> "Phase":
        return cls(CURRICULUM, t_current=t_current)

    @classmethod
    def finetune(cls, patience: int = 0) -> "Phase":
        if patience < 0:
            raise ValueError("patience must be >= 0")
        return cls(FINETUNE, patience=patience)


@dataclass(frozen=True)
class BiasPoint:
    """Counterexample used to bias sampling; ``boundary`` pins t to T."""

    t: float
    x: np.ndarray
    boundary: bool = False


@dataclass
class TrainResult:
    net: ValueNet
    rows: list[dict]
    outcome: str                        # "converged" | "budget_exhausted"
    seconds: float
    final_phase: Phase


def sample_batch(
    cfg: TrainConfig,
    phase: Phase,
    spec: SystemSpec,
    rng: np.random.Generator,
    cex: BiasPoint | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw (t_i, x_i).  Bias samples (exactly round(fraction * N) of them,
    placed first) are uniform in the box of radius r_cex around the
    counterexample intersected with the domain."""
    n = cfg.batch_size
    m = spec.state_dim
    lo, hi = spec.domain.lo, spec.domain.hi
    x = rng.uniform(lo, hi, size=(n, m))
    if phase.kind == PRETRAINING:
        t = np.full(n, spec.horizon)
    elif phase.kind == CURRICULUM:
        t = rng.uniform(phase.t_current, spec.horizon, size=n)
    else:
        t = rng.uniform(spec.t0, spec.horizon, size=n)
    if phase.kind != PRETRAINING and cfg.boundary_fraction > 0.0:
        # anchor the terminal condition: without t = T samples nothing ties
        # V(T, .) to g once pretraining ends, and pure PDE-residual descent
        # admits degenerate solutions (constants solve R2 = 0 exactly)
        nb = int(round(cfg.boundary_fraction * n))
        if nb > 0:
            t[n - nb:] = spec.horizon
    if cex is not None and cfg.cex_fraction > 0.0:
        nb = int(round(cfg.cex_fraction * n))
        if nb > 0:
            r = cfg.cex_radius_frac * (hi - lo)
            blo = np.maximum(lo, cex.x - r)
            bhi = np.minimum(hi, cex.x + r)
            x[:nb] = rng.uniform(blo, bhi, size=(nb, m))
            if cex.boundary:
                t[:nb] = spec.horizon
            else:
                rt = cfg.cex_radius_frac * (spec.horizon - spec.t0)
                t[:nb] = rng.uniform(max(spec.t0, cex.t - rt),
                                     min(spec.horizon, cex.t + rt), size=nb)
    return t, x


def _target_values(spec: SystemSpec, x: np.ndarray) -> np.ndarray:
    cols = {spec.x_index(i): x[:, i] for i in range(spec.state_dim)}
    return spec.pool.eval_batch([spec.target], cols)[0]


def loss_terms(net: ValueNet, spec: SystemSpec, batch) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample (L1, L2) for a batch (t, x)."""
    t, x = batch
    v, vt, vx = net.value_and_input_grads(t, x)
    g = _target_values(spec, x)
    at_T = t == spec.horizon
    l1 = np.where(at_T, np.abs(v - g), 0.0)
    h = hamiltonian_values(spec, t, x, vx)
    l2 = np.abs(vt + np.minimum(0.0, h))
    return l1, l2


def total_loss(l1: np.ndarray, l2: np.ndarray, cfg: TrainConfig, phase: Phase) -> float:
    """mean_i(L1_i + lam*L2_i) + lam_max * max_i(L1_i + lam*L2_i)."""
    lam_max = cfg.lam_max_finetune if phase.kind == FINETUNE else cfg.lam_max_curriculum
    flat = l1 + cfg.lam * l2
    return float(flat.mean() + lam_max * flat.max())


class _Adam:
    """Plain Adam, bias-corrected, no weight decay."""

    def __init__(self, size: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.step_count = 0

    def step(self, params: np.ndarray, grad: np.ndarray, lr_scale: float = 1.0) -> np.ndarray:
        self.step_count += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.step_count)
        vhat = self.v / (1 - self.beta2 ** self.step_count)
        return params - self.lr * lr_scale * mhat / (np.sqrt(vhat) + self.eps)


def _sign0(r: np.ndarray) -> np.ndarray:
    # matches the symbolic abs subgradient: +1 at zero
    return np.where(r >= 0.0, 1.0, -1.0)


def _train_epoch(net: ValueNet, spec: SystemSpec, cfg: TrainConfig, phase: Phase,
                 batch, adam: _Adam, lr_scale: float):
    """One gradient step; returns per-sample (l1, l2)."""
    t, x = batch
    n = t.shape[0]
    v, vt, vx = net.value_and_input_grads(t, x)
    g = _target_values(spec, x)
    at_T = t == spec.horizon
    r1 = v - g
    h, dh = hamiltonian_values(spec, t, x, vx, want_grad=True)
    r2 = vt + np.minimum(0.0, h)
    l1 = np.where(at_T, np.abs(r1), 0.0)
    l2 = np.abs(r2)

    lam_max = cfg.lam_max_finetune if phase.kind == FINETUNE else cfg.lam_max_curriculum
    flat = l1 + cfg.lam * l2
    w = np.full(n, 1.0 / n)
    w[int(np.argmax(flat))] += lam_max

    alpha = w * at_T * _sign0(r1)
    d_l2 = w * cfg.lam * _sign0(r2)
    gamma = np.empty((n, 1 + spec.state_dim))
    gamma[:, 0] = d_l2
    gamma[:, 1:] = (d_l2 * (h < 0.0))[:, None] * dh
    grad = net.parameter_gradients(t, x, alpha, gamma)
    net.set_params_flat(adam.step(net.params_flat(), grad, lr_scale))
    return l1, l2


def run_curriculum(
    net: ValueNet,
    spec: SystemSpec,
    cfg: TrainConfig,
    start_phase: str = PRETRAINING,
    bias: BiasPoint | None = None,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Run the phase machine on ``net`` in place.

    ``start_phase=FINETUNE`` re-enters finetuning only (used by the CEGIS
    loop after a counterexample).  Non-convergence within ``max_epochs`` is
    reported as outcome ``budget_exhausted``, not an exception.
    """
    rng = np.random.default_rng(cfg.seed)
    lr = cfg.learning_rate
    if start_phase == FINETUNE and cfg.finetune_lr is not None:
        lr = cfg.finetune_lr
    adam = _Adam(net.num_params, lr)
    delta_t = cfg.delta_t if cfg.delta_t is not None else (spec.horizon - spec.t0) / 10.0
    span = spec.horizon - spec.t0
    n_steps = max(1, int(np.ceil(span / delta_t - 1e-12))) if span > 0 else 0

    if start_phase == PRETRAINING:
        phase = Phase.pretraining()
    elif start_phase == CURRICULUM:
        phase = Phase.curriculum(spec.horizon)
    elif start_phase == FINETUNE:
        phase = Phase.finetune(0)
    else:
        raise ValueError(f"unknown phase {start_phase!r}")
    expansions = 0

    rows: list[dict] = []
    outcome = "budget_exhausted"
    lr_scale = 1.0
    start = time.perf_counter()
    for epoch in range(cfg.max_epochs):
        batch = sample_batch(cfg, phase, spec, rng, cex=bias)
        l1, l2 = _train_epoch(net, spec, cfg, phase, batch, adam, lr_scale)
        lr_scale *= cfg.lr_decay
        max_l1, max_l2 = float(l1.max()), float(l2.max())
        rows.append({
            "epoch": epoch, "phase": phase.kind, "t_current": _frontier(phase, spec),
            "mean_L1": float(l1.mean()), "max_L1": max_l1,
            "mean_L2": float(l2.mean()), "max_L2": max_l2,
            "total_loss": total_loss(l1, l2, cfg, phase),
            "wall_seconds": time.perf_counter() - start,
        })
        if phase.kind == PRETRAINING and max_l1 < cfg.eps1:
            phase = Phase.curriculum(spec.horizon)
        elif phase.kind == CURRICULUM and max_l2 < cfg.eps2:
            expansions += 1
            t_current = max(spec.t0, spec.horizon - expansions * delta_t)
            if expansions >= n_steps:
                phase = Phase.finetune(0)
            else:
                phase = Phase.curriculum(t_current)
        elif phase.kind == FINETUNE and max_l2 < cfg.lam_eps * cfg.eps2:
            phase = Phase.finetune(phase.patience + 1)
            if phase.patience > cfg.patience_limit:
                outcome = "converged"
                break
    seconds = time.perf_counter() - start
    if log_path is not None:
        write_training_log(rows, log_path)
    return TrainResult(net=net, rows=rows, outcome=outcome, seconds=seconds,
                       final_phase=phase)


def _frontier(phase: Phase, spec: SystemSpec) -> float:
    if phase.kind == PRETRAINING:
        return spec.horizon
    if phase.kind == CURRICULUM:
        return phase.t_current
    return spec.t0


def empirical_max_losses(net: ValueNet, spec: SystemSpec, cfg: TrainConfig,
                         seed: int, n_samples: int | None = None) -> tuple[float, float]:
    """(max L1 at t = T, max L2 over [t0,T] x X) on a fresh seeded sample;
    the CEGIS empirical gate reads the L2 component."""
    rng = np.random.default_rng(seed)
    n = n_samples or cfg.batch_size
    x = rng.uniform(spec.domain.lo, spec.domain.hi, size=(n, spec.state_dim))
    t = rng.uniform(spec.t0, spec.horizon, size=n)
    l1b, _ = loss_terms(net, spec, (np.full(n, spec.horizon), x))
    _, l2 = loss_terms(net, spec, (t, x))
    return float(l1b.max()), float(l2.max())


def write_training_log(rows: Sequence[dict], path: str | Path) -> None:
    fields = ["epoch", "phase", "t_current", "mean_L1", "max_L1",
              "mean_L2", "max_L2", "total_loss", "wall_seconds"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in fields})
