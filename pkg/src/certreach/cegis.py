"""Counterexample-guided loop around training and certification.

Each iteration: (i) bring the model below the empirical gate
``max L2 < lam_eps * eps2`` (skipping training when the gate already holds
and the previous certification produced no counterexample, which logs a
blank training time); (ii) certify; (iii) on a certificate shrink eps by the
shrink factor and recompute (eps1, eps2) from the split fractions; (iv) on a
counterexample re-enter finetuning with samples biased near the witness.
The loop stops when finetuning exhausts its budget without reaching the
gate, or after the iteration cap, and returns the best certified eps with
its checkpoint.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .certify import (BUDGET, DELTA_SAT, UNSAT, CertifierConfig, CertResult,
                      certify_network)
from .system import SystemSpec
from .train import (FINETUNE, PRETRAINING, BiasPoint, TrainConfig,
                    empirical_max_losses, run_curriculum)
from .valuenet import NetConfig, ValueNet, save_checkpoint

__all__ = ["CegisConfig", "CegisRow", "CegisReport", "run_cegis", "write_report_csv"]

CERTIFIED = "Certified"
COUNTEREXAMPLE = "CounterexampleFound"
BUDGET_ROW = "Budget"


@dataclass(frozen=True)
class CegisConfig:
    initial_eps: float = 0.30
    eps1_fraction: float = 0.05
    eps2_fraction: float = 0.95
    shrink: float = 0.9
    max_iterations: int = 5
    seed: int = 0
    budget_relax_factor: float = 2.0   # applied to the box budget after a Budget row

    def __post_init__(self):
        if not 0.0 < self.shrink < 1.0:
            raise ValueError("shrink must lie in (0, 1)")
        if abs(self.eps1_fraction + self.eps2_fraction - 1.0) > 1e-12:
            raise ValueError("split fractions must sum to 1")
        if not self.initial_eps > 0:
            raise ValueError("initial eps must be > 0")


@dataclass
class CegisRow:
    iteration: int
    eps: float
    train_seconds: float | None
    verify_seconds: float
    result: str
    witness: dict | None = None
    witness_residual: float | None = None
    witness_query: str | None = None
    empirical_max_l2: float | None = None


@dataclass
class CegisReport:
    rows: list[CegisRow] = field(default_factory=list)
    best_eps: float | None = None
    best_checkpoint: str | None = None
    delta_sat_events: list[dict] = field(default_factory=list)

    @property
    def certified_rows(self) -> list[CegisRow]:
        return [r for r in self.rows if r.result == CERTIFIED]


def run_cegis(
    spec: SystemSpec,
    net_cfg: NetConfig,
    train_cfg: TrainConfig,
    cert_cfg: CertifierConfig,
    cegis_cfg: CegisConfig,
    out_dir: str | Path | None = None,
    certifier=None,
    trainer=None,
    gate=None,
    log=None,
) -> tuple[CegisReport, ValueNet | None]:
    """Run the full loop; returns the report and the best certified network.

    ``certifier``, ``trainer`` and ``gate`` may be replaced for testing:
    ``certifier(net, spec, eps1, eps2, cfg) -> CertResult``,
    ``trainer(net, spec, cfg, start_phase, bias) -> TrainResult``,
    ``gate(net, spec, cfg, seed) -> (max_l1, max_l2)``.
    """
    certifier = certifier or certify_network
    trainer = trainer or (lambda net, sp, cfg, start_phase, bias:
                          run_curriculum(net, sp, cfg, start_phase=start_phase,
                                         bias=bias))
    gate_fn = gate or (lambda net, sp, cfg, seed:
                       empirical_max_losses(net, sp, cfg, seed=seed))
    say = log or (lambda msg: None)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    net = ValueNet(net_cfg)
    report = CegisReport()
    best_net: ValueNet | None = None
    eps = cegis_cfg.initial_eps
    box_budget = cert_cfg.max_boxes
    bias: BiasPoint | None = None
    trained_once = False

    for iteration in range(1, cegis_cfg.max_iterations + 1):
        eps1 = cegis_cfg.eps1_fraction * eps
        eps2 = cegis_cfg.eps2_fraction * eps
        gate_value = train_cfg.lam_eps * eps2
        tc = _with_thresholds(train_cfg, eps1, eps2,
                              seed=train_cfg.seed + iteration - 1)
        _, max_l2 = gate_fn(net, spec, tc, cegis_cfg.seed + iteration)
        train_seconds: float | None = None
        if bias is not None or max_l2 >= gate_value or not trained_once:
            say(f"iter {iteration}: training toward gate {gate_value:.6g} "
                f"(empirical max L2 {max_l2:.6g})")
            start_phase = FINETUNE if trained_once else PRETRAINING
            tr = trainer(net, spec, tc, start_phase, bias)
            train_seconds = tr.seconds
            trained_once = True
            bias = None
            _, max_l2 = gate_fn(net, spec, tc, cegis_cfg.seed + iteration)
            if tr.outcome != "converged" and max_l2 >= gate_value:
                say(f"iter {iteration}: finetune budget exhausted above the gate; stopping")
                report.rows.append(CegisRow(iteration, eps, train_seconds, 0.0,
                                            BUDGET_ROW, empirical_max_l2=max_l2))
                break
        else:
            say(f"iter {iteration}: gate already holds "
                f"(max L2 {max_l2:.6g} < {gate_value:.6g})")

        cfg_iter = CertifierConfig(
            delta=cert_cfg.delta, min_width=cert_cfg.min_width, max_boxes=box_budget,
            timeout=cert_cfg.timeout, workers=cert_cfg.workers,
            batch_size=cert_cfg.batch_size, centered_form=cert_cfg.centered_form)
        t_verify = time.perf_counter()
        res: CertResult = certifier(net, spec, eps1, eps2, cfg_iter)
        verify_seconds = time.perf_counter() - t_verify

        if res.verdict == UNSAT:
            say(f"iter {iteration}: certified at eps={eps:.6g} "
                f"({res.boxes_explored} boxes, {verify_seconds:.1f}s)")
            report.rows.append(CegisRow(iteration, eps, train_seconds, verify_seconds,
                                        CERTIFIED, empirical_max_l2=max_l2))
            report.best_eps = eps
            best_net = net.copy()
            if out_dir is not None:
                path = out_dir / f"certified_eps_{eps:.6g}.json"
                save_checkpoint(best_net, path, metadata={
                    "eps": eps, "eps1": eps1, "eps2": eps2, "iteration": iteration})
                report.best_checkpoint = str(path)
            eps *= cegis_cfg.shrink
            bias = None
        elif res.verdict == DELTA_SAT:
            w = res.witness
            say(f"iter {iteration}: counterexample on {w.label} at eps={eps:.6g} "
                f"(residual {w.residual:.6g}, {verify_seconds:.1f}s)")
            wd = w.as_dict(spec.pool.variables)
            report.rows.append(CegisRow(iteration, eps, train_seconds, verify_seconds,
                                        COUNTEREXAMPLE, witness=wd,
                                        witness_residual=w.residual,
                                        witness_query=w.label,
                                        empirical_max_l2=max_l2))
            report.delta_sat_events.append({
                "iteration": iteration, "label": w.label, "residual": w.residual,
                "threshold": eps1 if w.label.startswith("R1") else eps2,
                "point": wd})
            x_w = np.array([wd[spec.pool.variables[i]] for i in spec.x_indices])
            boundary = w.label.startswith("R1")
            bias = BiasPoint(t=wd.get("t", spec.horizon), x=x_w, boundary=boundary)
        else:
            say(f"iter {iteration}: verification budget exhausted at eps={eps:.6g}")
            report.rows.append(CegisRow(iteration, eps, train_seconds, verify_seconds,
                                        BUDGET_ROW, empirical_max_l2=max_l2))
            box_budget = int(box_budget * cegis_cfg.budget_relax_factor)
            bias = None

    if out_dir is not None:
        write_report_csv(report, out_dir / "cegis_report.csv")
    return report, best_net


def _with_thresholds(cfg: TrainConfig, eps1: float, eps2: float, seed: int) -> TrainConfig:
    return TrainConfig(
        batch_size=cfg.batch_size, lam=cfg.lam,
        lam_max_curriculum=cfg.lam_max_curriculum, lam_max_finetune=cfg.lam_max_finetune,
        lam_eps=cfg.lam_eps, patience_limit=cfg.patience_limit, delta_t=cfg.delta_t,
        learning_rate=cfg.learning_rate, lr_decay=cfg.lr_decay,
        finetune_lr=cfg.finetune_lr, optimizer=cfg.optimizer,
        seed=seed, cex_fraction=cfg.cex_fraction, cex_radius_frac=cfg.cex_radius_frac,
        boundary_fraction=cfg.boundary_fraction,
        eps1=eps1, eps2=eps2, max_epochs=cfg.max_epochs)


def write_report_csv(report: CegisReport, path: str | Path) -> None:
    """Table-style CSV: iter, epsilon, train_s, verify_s, result."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "epsilon", "train_s", "verify_s", "result"])
        for r in report.rows:
            writer.writerow([
                r.iteration, repr(r.eps),
                "-" if r.train_seconds is None else f"{r.train_seconds:.2f}",
                f"{r.verify_seconds:.2f}", r.result])


def write_run_manifest(path: str | Path, **sections) -> None:
    """JSON manifest of configs/seeds/paths for byte-reproducible re-runs."""
    def clean(obj):
        if hasattr(obj, "__dataclass_fields__"):
            return {k: clean(getattr(obj, k)) for k in obj.__dataclass_fields__}
        if isinstance(obj, (np.floating, np.integer)):
            return obj.item()
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        if isinstance(obj, dict):
            return {k: clean(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [clean(v) for v in obj]
        return obj

    Path(path).write_text(json.dumps({k: clean(v) for k, v in sections.items()},
                                     indent=2, default=str))
