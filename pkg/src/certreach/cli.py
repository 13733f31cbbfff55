"""Operator entry point.

Subcommands drive training, certification, the CEGIS loop, grid export and
oracle comparison from one INI run-configuration file (sections ``[run]``,
``[system]`` or ``system = <path>`` under ``[run]``, ``[net]``, ``[train]``,
``[certifier]``, ``[cegis]``, ``[compare]``).

Exit codes: 0 success/certified, 1 counterexample or violation found,
2 usage/config error, 3 budget exhausted.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .cegis import (CegisConfig, run_cegis, write_report_csv, write_run_manifest)
from .certify import (BUDGET, DELTA_SAT, UNSAT, CertifierConfig, build_queries,
                      certify_network, export_queries_smtlib, result_to_dict)
from .oracle import levelset_cfl_limit, levelset_solve, sampled_reachable
from .reach import (OUTSIDE, CertifiedValue, classify_batch, epsilon_total,
                    export_grid)
from .system import ConfigError, SystemSpec, build_residuals, load_system
from .train import TrainConfig, run_curriculum, write_training_log
from .valuenet import NetConfig, ValueNet, load_checkpoint, save_checkpoint

EXIT_OK = 0
EXIT_FOUND = 1
EXIT_CONFIG = 2
EXIT_BUDGET = 3

WORKERS_ENV = "CERTREACH_WORKERS"


class _Run:
    """Parsed run configuration."""

    def __init__(self, path: Path):
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        self.path = path
        self.cp = cp
        run = cp["run"] if "run" in cp else {}
        self.out = Path(run.get("out", "runs/" + path.stem))
        self.seed = int(run.get("seed", "0"))
        if "system" in cp:
            self.spec = load_system(cp["system"])
        elif "system" in run:
            sys_path = Path(run["system"])
            if not sys_path.is_absolute():
                sys_path = path.parent / sys_path
            self.spec = load_system(sys_path)
        else:
            raise ConfigError(f"{path}: provide a [system] section or run.system = <path>")

    def section(self, name: str) -> dict:
        return dict(self.cp[name]) if name in self.cp else {}

    def net_config(self, seed: int | None = None) -> NetConfig:
        s = self.section("net")
        hidden = tuple(int(w) for w in s.get("hidden", "16").replace(",", " ").split())
        return NetConfig(
            state_dim=self.spec.state_dim,
            hidden=hidden,
            omega=float(s.get("omega", "30.0")),
            poly_degree=int(s.get("poly_degree", "2")),
            seed=seed if seed is not None else int(s.get("seed", str(self.seed))),
        )

    def train_config(self, seed: int | None = None) -> TrainConfig:
        s = self.section("train")
        kw = {}
        for key, cast in (("batch_size", int), ("lam", float),
                          ("lam_max_curriculum", float), ("lam_max_finetune", float),
                          ("lam_eps", float), ("patience_limit", int),
                          ("delta_t", float), ("learning_rate", float),
                          ("lr_decay", float), ("cex_fraction", float),
                          ("cex_radius_frac", float), ("eps1", float), ("eps2", float),
                          ("max_epochs", int)):
            if key in s:
                kw[key] = cast(s[key])
        kw["seed"] = seed if seed is not None else int(s.get("seed", str(self.seed)))
        return TrainConfig(**kw)

    def certifier_config(self, workers: int | None = None) -> CertifierConfig:
        s = self.section("certifier")
        if workers is None:
            workers = int(s.get("workers", os.environ.get(WORKERS_ENV, "1")))
        return CertifierConfig(
            delta=float(s.get("delta", "1e-4")),
            min_width=float(s["min_width"]) if "min_width" in s else None,
            max_boxes=int(float(s.get("max_boxes", "20000000"))),
            timeout=float(s["timeout"]) if "timeout" in s else None,
            workers=workers,
            batch_size=int(s.get("batch_size", "8192")),
            centered_form=s.get("centered_form", "true").lower() != "false",
        )

    def cegis_config(self, seed: int | None = None) -> CegisConfig:
        s = self.section("cegis")
        return CegisConfig(
            initial_eps=float(s.get("initial_eps", "0.30")),
            eps1_fraction=float(s.get("eps1_fraction", "0.05")),
            eps2_fraction=float(s.get("eps2_fraction", "0.95")),
            shrink=float(s.get("shrink", "0.9")),
            max_iterations=int(s.get("max_iterations", "5")),
            seed=seed if seed is not None else int(s.get("seed", str(self.seed))),
        )


def _load_run(args) -> _Run:
    run = _Run(Path(args.config))
    if getattr(args, "out", None):
        run.out = Path(args.out)
    if getattr(args, "seed", None) is not None:
        run.seed = args.seed
    run.out.mkdir(parents=True, exist_ok=True)
    return run


def _load_net(run: _Run, path: str) -> ValueNet:
    net, _ = load_checkpoint(path)
    if net.config.state_dim != run.spec.state_dim:
        raise ConfigError(
            f"checkpoint state dimension {net.config.state_dim} does not match "
            f"the system's {run.spec.state_dim}")
    return net


def _split_eps(args) -> tuple[float, float]:
    eps = args.eps
    f1 = args.eps1_frac
    return f1 * eps, (1.0 - f1) * eps


def cmd_train(args) -> int:
    run = _load_run(args)
    net = ValueNet(run.net_config(seed=run.seed))
    tc = run.train_config(seed=run.seed)
    result = run_curriculum(net, run.spec, tc, log_path=run.out / "training_log.csv")
    ck = run.out / "checkpoint.json"
    save_checkpoint(result.net, ck, metadata={
        "outcome": result.outcome, "seconds": result.seconds,
        "epochs": len(result.rows), "seed": run.seed})
    write_run_manifest(run.out / "manifest.json", command="train",
                       config_file=str(run.path), seed=run.seed,
                       net=net.config, train=tc, checkpoint=str(ck))
    print(f"outcome={result.outcome} epochs={len(result.rows)} "
          f"seconds={result.seconds:.1f} checkpoint={ck}")
    return EXIT_OK if result.outcome == "converged" else EXIT_BUDGET


def cmd_certify(args) -> int:
    run = _load_run(args)
    net = _load_net(run, args.checkpoint)
    eps1, eps2 = _split_eps(args)
    cfg = run.certifier_config(workers=args.workers)
    res = certify_network(net, run.spec, eps1, eps2, cfg)
    closure = net.to_expr(run.spec.pool, (run.spec.t_index, *run.spec.x_indices))
    queries = build_queries(build_residuals(run.spec, closure), run.spec, eps1, eps2)
    export_queries_smtlib(queries, run.out / "smt2")
    report = result_to_dict(res, run.spec, cfg)
    report["eps"] = args.eps
    report["eps1"], report["eps2"] = eps1, eps2
    (run.out / "certification.json").write_text(json.dumps(report, indent=2))
    print(f"verdict={res.verdict} boxes={res.boxes_explored} "
          f"seconds={res.wall_seconds:.1f}")
    if res.verdict == UNSAT:
        return EXIT_OK
    if res.verdict == DELTA_SAT:
        w = res.witness
        print(f"counterexample {w.label} at {w.as_dict(run.spec.pool.variables)} "
              f"residual={w.residual:.6g}")
        return EXIT_FOUND
    return EXIT_BUDGET


def cmd_cegis(args) -> int:
    run = _load_run(args)
    net_cfg = run.net_config(seed=run.seed)
    train_cfg = run.train_config(seed=run.seed)
    cert_cfg = run.certifier_config(workers=args.workers)
    cegis_cfg = run.cegis_config(seed=run.seed)
    report, best = run_cegis(run.spec, net_cfg, train_cfg, cert_cfg, cegis_cfg,
                             out_dir=run.out, log=lambda m: print(m, flush=True))
    write_report_csv(report, run.out / "cegis_report.csv")
    write_run_manifest(run.out / "manifest.json", command="cegis",
                       config_file=str(run.path), seed=run.seed, net=net_cfg,
                       train=train_cfg, certifier=cert_cfg, cegis=cegis_cfg,
                       best_eps=report.best_eps, best_checkpoint=report.best_checkpoint)
    if report.best_eps is not None:
        print(f"best certified eps={report.best_eps:.6g} "
              f"checkpoint={report.best_checkpoint}")
        return EXIT_OK
    if report.rows and report.rows[-1].result == "CounterexampleFound":
        return EXIT_FOUND
    return EXIT_BUDGET


def _certified_value(run: _Run, args) -> CertifiedValue:
    net = _load_net(run, args.checkpoint)
    eps1, eps2 = _split_eps(args)
    return CertifiedValue(net=net, eps1=eps1, eps2=eps2, t0=run.spec.t0,
                          horizon=run.spec.horizon, domain_lo=run.spec.domain.lo,
                          domain_hi=run.spec.domain.hi,
                          checkpoint_path=args.checkpoint)


def cmd_export(args) -> int:
    run = _load_run(args)
    cv = _certified_value(run, args)
    t = run.spec.t0 if args.time is None else args.time
    export_grid(cv, t, args.resolution,
                csv_path=run.out / f"grid_t{t:g}.csv",
                json_path=run.out / f"grid_t{t:g}.json")
    print(f"wrote {run.out / f'grid_t{t:g}.csv'} "
          f"({args.resolution ** run.spec.state_dim} rows)")
    return EXIT_OK


def cmd_compare(args) -> int:
    run = _load_run(args)
    cv = _certified_value(run, args)
    spec = run.spec
    s = run.section("compare")
    n_traj = args.trajectories if args.trajectories is not None else int(
        s.get("trajectories", "1000"))
    h = float(s.get("rk4_step", "1e-3"))
    resolution = int(s.get("grid_resolution", "101"))
    dt = float(s.get("grid_dt", "0"))

    violations = 0
    n_states = 0
    if n_traj > 0:
        cloud = sampled_reachable(spec, n_traj, seed=run.seed, h=h)
        codes = classify_batch(cv, cloud.stamps, cloud.states)
        violations = int((codes == 2).sum())
        n_states = len(cloud.stamps)

    grid = levelset_solve(spec, resolution, dt) if dt > 0 else \
        levelset_solve(spec, resolution, _default_dt(spec, resolution))
    vg = grid.values_on_x()
    axes = grid.x_axes
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in mesh], axis=1)
    vn = cv.net.forward(spec.t0, pts)
    max_diff = float(np.abs(vn - vg.ravel()).max())

    summary = {
        "trajectories": n_traj, "visited_states": n_states,
        "outside_violations": violations,
        "epsilon_at_t0": epsilon_total(cv, spec.t0),
        "grid_resolution": resolution, "grid_dt": grid.dt,
        "max_value_difference": max_diff,
        "grid_residual_estimate": grid.residual_estimate,
    }
    (run.out / "comparison.json").write_text(json.dumps(summary, indent=2))
    print(f"violations={violations}/{n_states} max|V_net - V_grid|={max_diff:.4f} "
          f"(eps_total={summary['epsilon_at_t0']:.4f})")
    return EXIT_FOUND if violations else EXIT_OK


def _default_dt(spec: SystemSpec, resolution: int) -> float:
    limit = levelset_cfl_limit(spec, resolution)
    if np.isinf(limit):
        return spec.horizon - spec.t0 or 1.0
    return 0.9 * limit


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="certreach",
        description="Train, certify and export reachable-set value functions.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False, eps=False):
        p.add_argument("--config", required=True, help="run configuration INI file")
        p.add_argument("--out", help="output directory (overrides [run] out)")
        p.add_argument("--seed", type=int, help="seed (overrides [run] seed)")
        p.add_argument("--workers", type=int, default=None,
                       help=f"certifier workers (default ${WORKERS_ENV} or 1)")
        if checkpoint:
            p.add_argument("--checkpoint", required=True)
        if eps:
            p.add_argument("--eps", type=float, required=True,
                           help="total certified bound eps")
            p.add_argument("--eps1-frac", dest="eps1_frac", type=float, default=0.05,
                           help="fraction of eps assigned to the boundary residual")

    common(sub.add_parser("train", help="run the curriculum trainer"))
    common(sub.add_parser("certify", help="certify a checkpoint"),
           checkpoint=True, eps=True)
    common(sub.add_parser("cegis", help="run the full CEGIS loop"))
    p_exp = sub.add_parser("export", help="export a classification grid")
    common(p_exp, checkpoint=True, eps=True)
    p_exp.add_argument("--time", type=float, default=None,
                       help="time slice (default t0)")
    p_exp.add_argument("--resolution", type=int, default=101)
    p_cmp = sub.add_parser("compare", help="compare against the oracle")
    common(p_cmp, checkpoint=True, eps=True)
    p_cmp.add_argument("--trajectories", type=int, default=None)

    args = parser.parse_args(argv)
    handlers = {"train": cmd_train, "certify": cmd_certify, "cegis": cmd_cegis,
                "export": cmd_export, "compare": cmd_compare}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
