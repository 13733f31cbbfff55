"""Interval branch-and-prune certification of global residual bounds.

Each query asks for a point where a residual violates its one-sided
threshold (``R > eps`` or ``R < -eps``).  A worklist of sub-boxes is
processed in vectorized batches:

* the midpoint of every box is tested first; a strict violation is returned
  immediately as a delta-sat witness,
* the natural interval extension (outward-rounded) prunes boxes whose upper
  bound stays on the non-violating side,
* surviving boxes are re-bounded by a first-order centered form built from
  interval enclosures of the residual's (Clarke) gradient,
* still-straddling boxes are bisected along the widest normalized dimension,
  until the width floor derived from delta is reached.

At the floor, a box either yields a witness whose actual residual exceeds
``threshold - delta`` or is pruned: the floor is chosen so the root-box
gradient bound caps the residual variation across such a box by ``delta/2``.
``Unsat`` therefore means no point of the box violates the threshold
(soundness rests on enclosure soundness), and every returned witness
violates the threshold up to delta, exactly the delta-sat contract.
"""

from __future__ import annotations

import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .expr import EnclosureError, Expr, IntervalBox, _up
from .system import ResidualPair, SystemSpec, build_residuals
from .valuenet import ValueNet

__all__ = [
    "Query",
    "CertifierConfig",
    "CertResult",
    "DeltaSatWitness",
    "build_queries",
    "branch_and_prune",
    "certify_residuals",
    "certify_network",
    "empirical_violations",
    "export_queries_smtlib",
]

UNSAT = "unsat"
DELTA_SAT = "delta-sat"
BUDGET = "budget"
CANCELLED = "cancelled"


@dataclass(frozen=True)
class Query:
    """One-sided violation search: residual > threshold (direction
    ``greater``) or residual < -threshold (direction ``less``) over ``box``."""

    residual: Expr
    direction: str
    threshold: float
    box: IntervalBox
    label: str

    def __post_init__(self):
        if self.direction not in ("greater", "less"):
            raise ValueError("direction must be 'greater' or 'less'")
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")
        free = self.residual.free_vars()
        if not free <= set(self.box.var_indices):
            raise ValueError("query box must cover the residual's free variables")


@dataclass(frozen=True)
class CertifierConfig:
    delta: float = 1e-4
    min_width: float | None = None     # normalized width floor override
    max_boxes: int = 20_000_000        # per query
    timeout: float | None = None       # wall seconds per query
    workers: int = 1
    batch_size: int = 8192
    centered_form: bool = True

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be > 0")
        if self.max_boxes < 1:
            raise ValueError("box budget must be >= 1")


@dataclass(frozen=True)
class DeltaSatWitness:
    var_indices: tuple[int, ...]
    point: np.ndarray
    residual: float
    label: str

    def as_dict(self, variables: Sequence[str]) -> dict:
        return {variables[i]: float(v) for i, v in zip(self.var_indices, self.point)}


@dataclass
class CertResult:
    verdict: str
    witness: DeltaSatWitness | None = None
    boxes_explored: int = 0
    wall_seconds: float = 0.0
    frontier_summary: dict | None = None
    per_query: dict[str, "CertResult"] = field(default_factory=dict)

    @property
    def is_unsat(self) -> bool:
        return self.verdict == UNSAT


def build_queries(residuals: ResidualPair, spec: SystemSpec,
                  eps1: float, eps2: float) -> list[Query]:
    """{R1 > eps1}, {R1 < -eps1} over X and {R2 > eps2}, {R2 < -eps2} over
    [t0, T] x X."""
    xbox = spec.domain
    txbox = spec.time_space_box()
    return [
        Query(residuals.r1, "greater", eps1, xbox, "R1+"),
        Query(residuals.r1, "less", eps1, xbox, "R1-"),
        Query(residuals.r2, "greater", eps2, txbox, "R2+"),
        Query(residuals.r2, "less", eps2, txbox, "R2-"),
    ]


def _normalized(query: Query):
    """Rewrite as F > tau with tau = threshold > 0."""
    pool = query.residual.pool
    if query.direction == "greater":
        return query.residual, 1.0
    return pool.neg(query.residual), -1.0


def branch_and_prune(query: Query, cfg: CertifierConfig,
                     cancel: threading.Event | None = None) -> CertResult:
    """Certify one query; deterministic for a fixed configuration."""
    start = time.perf_counter()
    pool = query.residual.pool
    F, orient = _normalized(query)
    tau = query.threshold
    d = query.box.dim
    idx = query.box.var_indices
    root_w = np.maximum(query.box.widths, 1e-300)

    grads = [pool.differentiate(F, v) for v in idx]
    roots = [F] + grads

    # crude root-box gradient bound -> width floor tied to delta
    grad_bound = np.full(d, np.inf)
    try:
        glo, ghi = pool.eval_interval_batch(
            grads,
            {v: np.array([query.box.lo[j]]) for j, v in enumerate(idx)},
            {v: np.array([query.box.hi[j]]) for j, v in enumerate(idx)})
        grad_bound = np.array([max(abs(float(l[0])), abs(float(h[0])))
                               for l, h in zip(glo, ghi)])
    except EnclosureError:
        pass
    finite_grad = bool(np.isfinite(grad_bound).all())
    if cfg.min_width is not None:
        floor = cfg.min_width
    elif finite_grad:
        total_var = float(grad_bound @ root_w)
        floor = cfg.delta / (1.0 + total_var)
    else:
        floor = 1e-12
    use_centered = cfg.centered_form and finite_grad

    blocks: list[tuple[np.ndarray, np.ndarray]] = [
        (query.box.lo[None, :].copy(), query.box.hi[None, :].copy())]
    explored = 0

    def result(verdict, witness=None, summary=None):
        return CertResult(verdict=verdict, witness=witness, boxes_explored=explored,
                          wall_seconds=time.perf_counter() - start,
                          frontier_summary=summary)

    def frontier_summary():
        n = sum(b[0].shape[0] for b in blocks)
        min_w = min((float((b[1] - b[0]).max()) for b in blocks), default=0.0)
        return {"pending_boxes": n, "min_max_width": min_w}

    while blocks:
        if cancel is not None and cancel.is_set():
            return result(CANCELLED)
        if cfg.timeout is not None and time.perf_counter() - start > cfg.timeout:
            return result(BUDGET, summary=frontier_summary())
        lo, hi = blocks.pop()
        if lo.shape[0] > cfg.batch_size:
            blocks.append((lo[cfg.batch_size:], hi[cfg.batch_size:]))
            lo, hi = lo[:cfg.batch_size], hi[:cfg.batch_size]
        nb = lo.shape[0]
        if explored + nb > cfg.max_boxes:
            blocks.append((lo, hi))
            return result(BUDGET, summary=frontier_summary())
        explored += nb

        mid = 0.5 * (lo + hi)
        mid_cols = {v: mid[:, j] for j, v in enumerate(idx)}
        fmid = pool.eval_batch([F], mid_cols)[0]
        worst = int(np.argmax(fmid))
        if fmid[worst] > tau:
            point = mid[worst]
            wit = DeltaSatWitness(idx, point.copy(), orient * float(fmid[worst]), query.label)
            return result(DELTA_SAT, witness=wit)

        lo_cols = {v: lo[:, j] for j, v in enumerate(idx)}
        hi_cols = {v: hi[:, j] for j, v in enumerate(idx)}
        if use_centered:
            los, his = pool.eval_interval_batch(roots, lo_cols, hi_cols)
            upper = his[0]
            # centered form: F(mid) + sum_j max|dF_j| * w_j / 2, outward-rounded
            fmlo, fmhi = pool.eval_interval_batch([F], mid_cols, mid_cols)
            slack = np.zeros(nb)
            for j in range(d):
                gmax = np.maximum(np.abs(los[1 + j]), np.abs(his[1 + j]))
                slack = _up(slack + _up(gmax * (0.5 * (hi[:, j] - lo[:, j]))))
            upper = np.minimum(upper, _up(fmhi[0] + slack))
        else:
            los, his = pool.eval_interval_batch([F], lo_cols, hi_cols)
            upper = his[0]

        keep = upper > tau
        if not keep.any():
            continue
        widths_n = (hi - lo) / root_w
        max_wn = widths_n.max(axis=1)
        at_floor = keep & (max_wn < floor)
        if at_floor.any():
            near = at_floor & (fmid > tau - cfg.delta)
            if near.any():
                worst = int(np.argmax(np.where(near, fmid, -np.inf)))
                wit = DeltaSatWitness(idx, mid[worst].copy(),
                                      orient * float(fmid[worst]), query.label)
                return result(DELTA_SAT, witness=wit)
            keep &= ~at_floor  # pruned: gradient bound caps variation below delta/2
            if not keep.any():
                continue

        klo, khi, kmid = lo[keep], hi[keep], mid[keep]
        split_dim = np.argmax(widths_n[keep], axis=1)
        rows = np.arange(klo.shape[0])
        left_hi = khi.copy()
        left_hi[rows, split_dim] = kmid[rows, split_dim]
        right_lo = klo.copy()
        right_lo[rows, split_dim] = kmid[rows, split_dim]
        blocks.append((np.concatenate([klo, right_lo]),
                       np.concatenate([left_hi, khi])))

    return result(UNSAT)


def certify_residuals(residuals: ResidualPair, spec: SystemSpec, eps1: float,
                      eps2: float, cfg: CertifierConfig) -> CertResult:
    """Run all four queries; the first delta-sat cancels the rest.  Unsat
    only when every query is unsat; any budget exhaustion without a witness
    is reported as budget."""
    start = time.perf_counter()
    queries = build_queries(residuals, spec, eps1, eps2)
    per_query: dict[str, CertResult] = {}
    cancel = threading.Event()

    if cfg.workers <= 1:
        for q in queries:
            if cancel.is_set():
                per_query[q.label] = CertResult(verdict=CANCELLED)
                continue
            res = branch_and_prune(q, cfg)
            per_query[q.label] = res
            if res.verdict == DELTA_SAT:
                cancel.set()
    else:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool_exec:
            futures = {q.label: pool_exec.submit(branch_and_prune, q, cfg, cancel)
                       for q in queries}
            for q in queries:
                res = futures[q.label].result()
                per_query[q.label] = res
                if res.verdict == DELTA_SAT:
                    cancel.set()

    boxes = sum(r.boxes_explored for r in per_query.values())
    seconds = time.perf_counter() - start
    sat = [r for r in per_query.values() if r.verdict == DELTA_SAT]
    if sat:
        return CertResult(verdict=DELTA_SAT, witness=sat[0].witness, boxes_explored=boxes,
                          wall_seconds=seconds, per_query=per_query)
    if any(r.verdict in (BUDGET, CANCELLED) for r in per_query.values()):
        summaries = {lbl: r.frontier_summary for lbl, r in per_query.items()
                     if r.verdict == BUDGET}
        return CertResult(verdict=BUDGET, boxes_explored=boxes, wall_seconds=seconds,
                          frontier_summary=summaries or None, per_query=per_query)
    return CertResult(verdict=UNSAT, boxes_explored=boxes, wall_seconds=seconds,
                      per_query=per_query)


def certify_network(net: ValueNet, spec: SystemSpec, eps1: float, eps2: float,
                    cfg: CertifierConfig) -> CertResult:
    """Certify |R1| <= eps1 on X and |R2| <= eps2 on [t0,T] x X for the
    symbolic closure of ``net``."""
    closure = net.to_expr(spec.pool, (spec.t_index, *spec.x_indices))
    residuals = build_residuals(spec, closure)
    return certify_residuals(residuals, spec, eps1, eps2, cfg)


def empirical_violations(residuals: ResidualPair, spec: SystemSpec, eps1: float,
                         eps2: float, n_samples: int, seed: int = 0,
                         chunk: int = 262_144):
    """Monte-Carlo soundness check: sample the query boxes uniformly and
    count threshold violations.  Returns (violations_R1, violations_R2,
    max |R1|, max |R2|)."""
    rng = np.random.default_rng(seed)
    pool = spec.pool
    v1 = v2 = 0
    m1 = m2 = 0.0
    left = n_samples
    while left > 0:
        n = min(chunk, left)
        left -= n
        x = rng.uniform(spec.domain.lo, spec.domain.hi, size=(n, spec.state_dim))
        t = rng.uniform(spec.t0, spec.horizon, size=n)
        cols = {spec.x_index(i): x[:, i] for i in range(spec.state_dim)}
        r1 = pool.eval_batch([residuals.r1], cols)[0]
        cols[spec.t_index] = t
        r2 = pool.eval_batch([residuals.r2], cols)[0]
        a1, a2 = np.abs(r1), np.abs(r2)
        v1 += int((a1 > eps1).sum())
        v2 += int((a2 > eps2).sum())
        m1 = max(m1, float(a1.max()))
        m2 = max(m2, float(a2.max()))
    return v1, v2, m1, m2


def export_queries_smtlib(queries: Sequence[Query], outdir: str | Path) -> list[Path]:
    """One SMT-LIB2 file per query, named by label."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = []
    for q in queries:
        relation = ">" if q.direction == "greater" else "<"
        threshold = q.threshold if q.direction == "greater" else -q.threshold
        text = q.residual.pool.to_smtlib(q.residual, relation, threshold, q.box)
        path = outdir / f"query_{q.label.replace('+', 'p').replace('-', 'm')}.smt2"
        path.write_text(text)
        paths.append(path)
    return paths


def result_to_dict(res: CertResult, spec: SystemSpec, cfg: CertifierConfig) -> dict:
    """JSON-ready certification report (verdict, witness, boxes, seconds,
    config echo)."""
    def one(r: CertResult) -> dict:
        out = {"verdict": r.verdict, "boxes_explored": r.boxes_explored,
               "wall_seconds": r.wall_seconds}
        if r.witness is not None:
            out["witness"] = r.witness.as_dict(spec.pool.variables)
            out["witness_residual"] = r.witness.residual
            out["witness_query"] = r.witness.label
        if r.frontier_summary:
            out["frontier"] = r.frontier_summary
        return out

    report = one(res)
    report["queries"] = {lbl: one(r) for lbl, r in res.per_query.items()}
    report["config"] = {
        "delta": cfg.delta, "min_width": cfg.min_width, "max_boxes": cfg.max_boxes,
        "timeout": cfg.timeout, "workers": cfg.workers, "batch_size": cfg.batch_size,
        "centered_form": cfg.centered_form,
    }
    return report
