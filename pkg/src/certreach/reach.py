"""From a certified residual bound to sound reachable-set approximations.

With certified thresholds (eps1, eps2) the learned value function brackets
the true one: ``|V_net - V*| <= eps(t) = eps1 + eps2*(T - t)``.  Points are
classified against the certified band:

* ``in-under``:  V_net <= -eps(t)   (certainly inside the true set)
* ``outside``:   V_net > +eps(t)    (certainly not in the true set)
* ``in-over-only``: anything else   (the indeterminate band, reported
  explicitly rather than folded into the over-approximation)

The monotonicity diagnostic checks the chained consequence of the certified
bounds: ``V(t,x) <= V(t+sigma,x) + eps2*sigma + eps1 + 2*eps2*(T-t-sigma)``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .expr import IntervalBox
from .valuenet import ValueNet, load_checkpoint

__all__ = [
    "CertifiedValue",
    "IN_UNDER",
    "IN_OVER_ONLY",
    "OUTSIDE",
    "epsilon_total",
    "classify",
    "classify_batch",
    "export_grid",
    "monotonicity_diagnostic",
    "sample_monotonicity_triples",
]

IN_UNDER = "in-under"
IN_OVER_ONLY = "in-over-only"
OUTSIDE = "outside"
_CLASS_NAMES = (IN_UNDER, IN_OVER_ONLY, OUTSIDE)


@dataclass(frozen=True)
class CertifiedValue:
    """A value network together with its certified thresholds and domain."""

    net: ValueNet
    eps1: float
    eps2: float
    t0: float
    horizon: float
    domain_lo: np.ndarray
    domain_hi: np.ndarray
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.eps1 < 0 or self.eps2 < 0:
            raise ValueError("certified thresholds must be >= 0")
        lo = np.asarray(self.domain_lo, float)
        hi = np.asarray(self.domain_hi, float)
        object.__setattr__(self, "domain_lo", lo)
        object.__setattr__(self, "domain_hi", hi)
        if lo.shape != (self.net.config.state_dim,) or hi.shape != lo.shape:
            raise ValueError("domain must match the network's state dimension")

    @classmethod
    def from_checkpoint(cls, path, eps1: float, eps2: float, t0: float,
                        horizon: float, domain: IntervalBox) -> "CertifiedValue":
        net, _meta = load_checkpoint(path)
        return cls(net=net, eps1=eps1, eps2=eps2, t0=t0, horizon=horizon,
                   domain_lo=domain.lo, domain_hi=domain.hi,
                   checkpoint_path=str(path))

    def _check_t(self, t: float) -> None:
        if not (self.t0 - 1e-12 <= t <= self.horizon + 1e-12):
            raise ValueError(f"t={t} outside horizon [{self.t0}, {self.horizon}]")


def epsilon_total(cv: CertifiedValue, t: float) -> float:
    """eps1 + eps2 * (T - t); affine, slope exactly -eps2."""
    cv._check_t(t)
    return cv.eps1 + cv.eps2 * (cv.horizon - t)


def classify_batch(cv: CertifiedValue, t, x: np.ndarray) -> np.ndarray:
    """Vectorized classification; returns codes 0 = in-under,
    1 = in-over-only, 2 = outside."""
    x = np.atleast_2d(np.asarray(x, float))
    t_arr = np.broadcast_to(np.asarray(t, float), (x.shape[0],))
    if np.any(t_arr < cv.t0 - 1e-12) or np.any(t_arr > cv.horizon + 1e-12):
        raise ValueError("time stamps outside horizon")
    if np.any(x < cv.domain_lo - 1e-12) or np.any(x > cv.domain_hi + 1e-12):
        raise ValueError("points outside the certified domain")
    v = cv.net.forward(t_arr, x)
    eps = cv.eps1 + cv.eps2 * (cv.horizon - t_arr)
    codes = np.ones(x.shape[0], dtype=np.int8)
    codes[v <= -eps] = 0
    codes[v > eps] = 2
    return codes


def classify(cv: CertifiedValue, t: float, x) -> str:
    """Classify a single state at time t against the certified band."""
    cv._check_t(t)
    code = classify_batch(cv, t, np.asarray(x, float)[None, :])[0]
    return _CLASS_NAMES[code]


def _grid_axes(cv: CertifiedValue, resolution: int) -> list[np.ndarray]:
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    axes = []
    for lo, hi in zip(cv.domain_lo, cv.domain_hi):
        if resolution == 1:
            axes.append(np.array([0.5 * (lo + hi)]))
        else:
            axes.append(np.linspace(lo, hi, resolution))
    return axes


def grid_points(cv: CertifiedValue, resolution: int) -> np.ndarray:
    """Uniform grid over X in deterministic order (first dimension
    outermost); resolution 1 yields the single center point."""
    axes = _grid_axes(cv, resolution)
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=1)


def export_grid(cv: CertifiedValue, t: float, resolution: int,
                csv_path=None, json_path=None):
    """Tabulate (x, V, class) on the grid; optionally write CSV rows and a
    JSON summary (epsilon at t, set areas by grid counting)."""
    cv._check_t(t)
    pts = grid_points(cv, resolution)
    values = cv.net.forward(t, pts)
    codes = classify_batch(cv, t, pts)
    if csv_path is not None:
        m = pts.shape[1]
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x{i+1}" for i in range(m)] + ["value", "class"])
            for row, v, c in zip(pts, values, codes):
                writer.writerow([repr(float(r)) for r in row]
                                + [repr(float(v)), _CLASS_NAMES[c]])
    if json_path is not None:
        volume = float(np.prod(cv.domain_hi - cv.domain_lo))
        n = pts.shape[0]
        counts = {name: int((codes == i).sum()) for i, name in enumerate(_CLASS_NAMES)}
        summary = {
            "t": t,
            "epsilon": epsilon_total(cv, t),
            "resolution": resolution,
            "counts": counts,
            "areas": {name: counts[name] / n * volume for name in _CLASS_NAMES},
            "over_approximation_area":
                (counts[IN_UNDER] + counts[IN_OVER_ONLY]) / n * volume,
        }
        Path(json_path).write_text(json.dumps(summary, indent=2))
    return pts, values, codes


def sample_monotonicity_triples(cv: CertifiedValue, n: int,
                                rng: np.random.Generator):
    """Seeded (t, x, sigma) triples with t + sigma <= T."""
    t = rng.uniform(cv.t0, cv.horizon, size=n)
    sigma = rng.uniform(0.0, cv.horizon - t)
    x = rng.uniform(cv.domain_lo, cv.domain_hi, size=(n, cv.domain_lo.size))
    return t, x, sigma


def monotonicity_diagnostic(cv: CertifiedValue, samples) -> tuple[int, float]:
    """Check V(t,x) <= V(t+sigma,x) + eps2*sigma + eps1 + 2*eps2*(T-t-sigma)
    on the given triples; returns (violation count, worst slack) where slack
    is lhs - rhs (negative means margin)."""
    t, x, sigma = samples
    t = np.asarray(t, float)
    sigma = np.asarray(sigma, float)
    x = np.atleast_2d(np.asarray(x, float))
    if np.any(t + sigma > cv.horizon + 1e-12):
        raise ValueError("triples must satisfy t + sigma <= T")
    v_now = cv.net.forward(t, x)
    v_later = cv.net.forward(t + sigma, x)
    bound = v_later + cv.eps2 * sigma + cv.eps1 + 2.0 * cv.eps2 * (cv.horizon - t - sigma)
    slack = v_now - bound
    return int((slack > 0).sum()), float(slack.max())
