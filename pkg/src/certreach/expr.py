"""Shared symbolic expression graphs with point, batch and interval evaluation.

One :class:`ExprPool` holds a hash-consed DAG over a fixed variable table.
The same graph object feeds three consumers:

* the trainer, through symbolic differentiation and point evaluation,
* the certifier, through sound (outward-rounded) interval evaluation,
* external solvers, through SMT-LIB2 emission.

Soundness policy for intervals: every primitive arithmetic operation widens
its result by one ulp outward; transcendental functions (sin/cos/exp) use the
library values widened by 4 ulps.  Enclosures of sin/cos are period-aware and
clamped to [-1, 1].

Node kinds are the grammar of the toolkit: constants, variables,
{neg, sin, cos, exp, abs, step} unary, {add, sub, mul, div, min, max} binary,
and pow with an integer exponent >= 0.  ``step(u) = 1 if u <= 0 else 0`` is an
internal branch selector used to express subgradients of min/max/abs; its
interval enclosure on a straddling argument is [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import Decimal
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "ExprError",
    "EvalError",
    "EnclosureError",
    "Expr",
    "ExprPool",
    "IntervalBox",
]


class ExprError(Exception):
    """Base class for expression-layer errors."""


class EvalError(ExprError):
    """Point evaluation failed (unresolved variable, division by zero)."""


class EnclosureError(ExprError):
    """Interval evaluation cannot produce a finite enclosure (e.g. the
    denominator interval straddles zero); the caller must split the box."""


# Node kind codes.  Order matters only for readability of dumps.
K_CONST = 0
K_VAR = 1
K_NEG = 2
K_SIN = 3
K_COS = 4
K_EXP = 5
K_ABS = 6
K_STEP = 7
K_ADD = 8
K_SUB = 9
K_MUL = 10
K_DIV = 11
K_MIN = 12
K_MAX = 13
K_POW = 14

_UNARY = (K_NEG, K_SIN, K_COS, K_EXP, K_ABS, K_STEP)
_BINARY = (K_ADD, K_SUB, K_MUL, K_DIV, K_MIN, K_MAX)

_KIND_NAMES = {
    K_CONST: "const", K_VAR: "var", K_NEG: "neg", K_SIN: "sin", K_COS: "cos",
    K_EXP: "exp", K_ABS: "abs", K_STEP: "step", K_ADD: "add", K_SUB: "sub",
    K_MUL: "mul", K_DIV: "div", K_MIN: "min", K_MAX: "max", K_POW: "pow",
}

_TWO_PI = 2.0 * math.pi
_HALF_PI = 0.5 * math.pi


@dataclass(frozen=True)
class IntervalBox:
    """Axis-aligned box: one closed interval per covered variable.

    ``var_indices`` are indices into the owning pool's variable table, in
    table order.  All bounds must be finite and lo <= hi per coordinate.
    """

    var_indices: tuple[int, ...]
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        if lo.shape != (len(self.var_indices),) or hi.shape != lo.shape:
            raise ValueError("box bounds must match the variable list")
        if not (np.isfinite(lo).all() and np.isfinite(hi).all()):
            raise ValueError("box bounds must be finite")
        if np.any(lo > hi):
            raise ValueError("box requires lo <= hi in every coordinate")
        if list(self.var_indices) != sorted(set(self.var_indices)):
            raise ValueError("box variables must be distinct and in table order")

    @property
    def dim(self) -> int:
        return len(self.var_indices)

    @property
    def widths(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def contains(self, point: Sequence[float], slack: float = 0.0) -> bool:
        p = np.asarray(point, dtype=float)
        return bool(np.all(p >= self.lo - slack) and np.all(p <= self.hi + slack))

    def replace(self, pos: int, lo: float, hi: float) -> "IntervalBox":
        nlo, nhi = self.lo.copy(), self.hi.copy()
        nlo[pos], nhi[pos] = lo, hi
        return IntervalBox(self.var_indices, nlo, nhi)


def _norm_const(v: float) -> float:
    v = float(v)
    if v == 0.0:  # merge -0.0 with 0.0 so hash-consing is well defined
        return 0.0
    return v


@dataclass(frozen=True)
class Expr:
    """Lightweight handle to a node in an :class:`ExprPool`."""

    pool: "ExprPool"
    id: int

    # -- construction sugar -------------------------------------------------
    def _coerce(self, other) -> "Expr":
        if isinstance(other, Expr):
            if other.pool is not self.pool:
                raise ExprError("cannot mix expressions from different pools")
            return other
        return self.pool.const(other)

    def __add__(self, other):
        return self.pool._binary(K_ADD, self, self._coerce(other))

    def __radd__(self, other):
        return self.pool._binary(K_ADD, self._coerce(other), self)

    def __sub__(self, other):
        return self.pool._binary(K_SUB, self, self._coerce(other))

    def __rsub__(self, other):
        return self.pool._binary(K_SUB, self._coerce(other), self)

    def __mul__(self, other):
        return self.pool._binary(K_MUL, self, self._coerce(other))

    def __rmul__(self, other):
        return self.pool._binary(K_MUL, self._coerce(other), self)

    def __truediv__(self, other):
        return self.pool._binary(K_DIV, self, self._coerce(other))

    def __rtruediv__(self, other):
        return self.pool._binary(K_DIV, self._coerce(other), self)

    def __neg__(self):
        return self.pool._unary(K_NEG, self)

    def __pow__(self, n: int):
        return self.pool.pow(self, n)

    # -- convenience forwarding ---------------------------------------------
    def eval(self, assignment) -> float:
        return self.pool.eval_point(self, assignment)

    def interval(self, box: IntervalBox) -> tuple[float, float]:
        return self.pool.eval_interval(self, box)

    def diff(self, var: int | str) -> "Expr":
        return self.pool.differentiate(self, var)

    def free_vars(self) -> frozenset[int]:
        return self.pool.free_vars(self)

    def __repr__(self):
        return f"Expr({self.pool.to_infix(self)})"


class ExprPool:
    """Hash-consing pool over a named variable table.

    Structurally identical nodes are shared; construction applies exact
    peephole folds (constant folding, ``x - x -> 0``, 0/1 identities) so the
    network closures stay small.  Folds that could erase a division-by-zero
    error are restricted to division-free subgraphs, keeping pointwise
    semantics identical to the unshared tree.

    Pools are immutable in the sense that existing nodes never change;
    construction is single-threaded, reads may be shared across threads.
    """

    def __init__(self, variables: Sequence[str]):
        if len(set(variables)) != len(variables):
            raise ValueError("variable names must be unique")
        self.variables: tuple[str, ...] = tuple(variables)
        self._var_index = {name: i for i, name in enumerate(self.variables)}
        self._kind: list[int] = []
        self._a: list[int] = []          # first child id, or variable index
        self._b: list[int] = []          # second child id, or pow exponent
        self._value: list[float] = []    # constant payload
        self._has_div: list[bool] = []
        self._memo: dict[tuple, int] = {}
        self._diff_memo: dict[tuple[int, int], int] = {}
        self._free_memo: dict[int, frozenset[int]] = {}
        self._sched_memo: dict[tuple[int, ...], list[int]] = {}

    # -- introspection -------------------------------------------------------
    def __len__(self) -> int:
        return len(self._kind)

    def var_index(self, name: str) -> int:
        try:
            return self._var_index[name]
        except KeyError:
            raise ExprError(f"unknown variable {name!r}") from None

    def kind(self, node: int) -> int:
        return self._kind[node]

    def describe(self, node: int) -> str:
        k = self._kind[node]
        if k == K_CONST:
            return f"const({self._value[node]})"
        if k == K_VAR:
            return f"var({self.variables[self._a[node]]})"
        return _KIND_NAMES[k]

    # -- node creation -------------------------------------------------------
    def _intern(self, kind: int, a: int, b: int, value: float, has_div: bool) -> Expr:
        key = (kind, a, b, value)
        node = self._memo.get(key)
        if node is None:
            node = len(self._kind)
            self._kind.append(kind)
            self._a.append(a)
            self._b.append(b)
            self._value.append(value)
            self._has_div.append(has_div)
            self._memo[key] = node
        return Expr(self, node)

    def const(self, v: float) -> Expr:
        v = _norm_const(v)
        if math.isnan(v) or math.isinf(v):
            raise ExprError("constants must be finite")
        return self._intern(K_CONST, -1, -1, v, False)

    def var(self, name_or_index: int | str) -> Expr:
        idx = name_or_index if isinstance(name_or_index, int) else self.var_index(name_or_index)
        if not 0 <= idx < len(self.variables):
            raise ExprError(f"variable index {idx} outside table")
        return self._intern(K_VAR, idx, -1, 0.0, False)

    def _is_const(self, node: int, value: float | None = None) -> bool:
        if self._kind[node] != K_CONST:
            return False
        return value is None or self._value[node] == value

    def _unary(self, kind: int, a: Expr) -> Expr:
        ai = a.id
        if self._is_const(ai):
            v = self._value[ai]
            folded = {
                K_NEG: lambda x: -x, K_SIN: math.sin, K_COS: math.cos,
                K_EXP: math.exp, K_ABS: abs,
                K_STEP: lambda x: 1.0 if x <= 0.0 else 0.0,
            }[kind](v)
            return self.const(folded)
        if kind == K_NEG and self._kind[ai] == K_NEG:
            return Expr(self, self._a[ai])
        return self._intern(kind, ai, -1, 0.0, self._has_div[ai])

    def _binary(self, kind: int, a: Expr, b: Expr) -> Expr:
        ai, bi = a.id, b.id
        if self._is_const(ai) and self._is_const(bi):
            va, vb = self._value[ai], self._value[bi]
            if not (kind == K_DIV and vb == 0.0):
                folded = {
                    K_ADD: lambda x, y: x + y, K_SUB: lambda x, y: x - y,
                    K_MUL: lambda x, y: x * y, K_DIV: lambda x, y: x / y,
                    K_MIN: min, K_MAX: max,
                }[kind](va, vb)
                return self.const(folded)
        div_free_a = not self._has_div[ai]
        div_free_b = not self._has_div[bi]
        if kind == K_ADD:
            if self._is_const(ai, 0.0):
                return b
            if self._is_const(bi, 0.0):
                return a
        elif kind == K_SUB:
            if self._is_const(bi, 0.0):
                return a
            if ai == bi and div_free_a:
                return self.const(0.0)
        elif kind == K_MUL:
            if self._is_const(ai, 1.0):
                return b
            if self._is_const(bi, 1.0):
                return a
            if self._is_const(ai, 0.0) and div_free_b:
                return self.const(0.0)
            if self._is_const(bi, 0.0) and div_free_a:
                return self.const(0.0)
        elif kind == K_DIV:
            if self._is_const(bi, 1.0):
                return a
        elif kind in (K_MIN, K_MAX):
            if ai == bi:
                return a
        has_div = kind == K_DIV or self._has_div[ai] or self._has_div[bi]
        return self._intern(kind, ai, bi, 0.0, has_div)

    def add(self, a: Expr, b: Expr) -> Expr:
        return self._binary(K_ADD, a, b)

    def sub(self, a: Expr, b: Expr) -> Expr:
        return self._binary(K_SUB, a, b)

    def mul(self, a: Expr, b: Expr) -> Expr:
        return self._binary(K_MUL, a, b)

    def div(self, a: Expr, b: Expr) -> Expr:
        return self._binary(K_DIV, a, b)

    def minimum(self, a: Expr, b: Expr) -> Expr:
        return self._binary(K_MIN, a, b)

    def maximum(self, a: Expr, b: Expr) -> Expr:
        return self._binary(K_MAX, a, b)

    def neg(self, a: Expr) -> Expr:
        return self._unary(K_NEG, a)

    def sin(self, a: Expr) -> Expr:
        return self._unary(K_SIN, a)

    def cos(self, a: Expr) -> Expr:
        return self._unary(K_COS, a)

    def exp(self, a: Expr) -> Expr:
        return self._unary(K_EXP, a)

    def absolute(self, a: Expr) -> Expr:
        return self._unary(K_ABS, a)

    def step(self, a: Expr) -> Expr:
        return self._unary(K_STEP, a)

    def pow(self, a: Expr, n: int) -> Expr:
        if not isinstance(n, (int, np.integer)) or isinstance(n, bool) or n < 0:
            raise ExprError("pow exponents must be integers >= 0")
        n = int(n)
        if n == 0:
            return self.const(1.0)
        if n == 1:
            return a
        if self._is_const(a.id):
            return self.const(self._value[a.id] ** n)
        return self._intern(K_POW, a.id, n, 0.0, self._has_div[a.id])

    # -- traversal -----------------------------------------------------------
    def _children(self, node: int) -> tuple[int, ...]:
        k = self._kind[node]
        if k in (K_CONST, K_VAR):
            return ()
        if k in _UNARY or k == K_POW:
            return (self._a[node],)
        return (self._a[node], self._b[node])

    def schedule(self, roots: Iterable[Expr | int]) -> list[int]:
        """Topologically ordered reachable node ids (children before parents).

        Node ids are created children-first, so the sorted reachable set is a
        valid order.  Cached per root tuple.
        """
        ids = tuple(sorted({r.id if isinstance(r, Expr) else int(r) for r in roots}))
        cached = self._sched_memo.get(ids)
        if cached is not None:
            return cached
        seen: set[int] = set()
        stack = list(ids)
        while stack:
            n = stack.pop()
            if n in seen:
                continue
            seen.add(n)
            stack.extend(self._children(n))
        order = sorted(seen)
        self._sched_memo[ids] = order
        return order

    def free_vars(self, e: Expr) -> frozenset[int]:
        cached = self._free_memo.get(e.id)
        if cached is not None:
            return cached
        for n in self.schedule([e]):
            if n in self._free_memo:
                continue
            k = self._kind[n]
            if k == K_VAR:
                fv = frozenset((self._a[n],))
            elif k == K_CONST:
                fv = frozenset()
            else:
                fv = frozenset().union(*(self._free_memo[c] for c in self._children(n)))
            self._free_memo[n] = fv
        return self._free_memo[e.id]

    # -- point evaluation ------------------------------------------------------
    def _assignment_to_columns(self, assignment) -> dict[int, float]:
        if isinstance(assignment, Mapping):
            cols = {}
            for key, v in assignment.items():
                idx = key if isinstance(key, int) else self.var_index(key)
                cols[idx] = float(v)
            return cols
        vec = np.asarray(assignment, dtype=float)
        return {i: float(vec[i]) for i in range(vec.shape[0])}

    def eval_point(self, e: Expr, assignment) -> float:
        """Exact recursive evaluation in double precision.

        ``assignment`` is a vector in variable-table order or a mapping from
        names/indices; it must cover every free variable of ``e``.
        """
        cols = self._assignment_to_columns(assignment)
        missing = [self.variables[i] for i in sorted(self.free_vars(e)) if i not in cols]
        if missing:
            raise EvalError(f"assignment missing variables {missing}")
        vals: dict[int, float] = {}
        for n in self.schedule([e]):
            k = self._kind[n]
            if k == K_CONST:
                vals[n] = self._value[n]
            elif k == K_VAR:
                vals[n] = cols[self._a[n]]
            elif k == K_POW:
                vals[n] = vals[self._a[n]] ** self._b[n]
            elif k in _UNARY:
                x = vals[self._a[n]]
                if k == K_NEG:
                    vals[n] = -x
                elif k == K_SIN:
                    vals[n] = math.sin(x)
                elif k == K_COS:
                    vals[n] = math.cos(x)
                elif k == K_EXP:
                    vals[n] = math.exp(x)
                elif k == K_ABS:
                    vals[n] = abs(x)
                else:
                    vals[n] = 1.0 if x <= 0.0 else 0.0
            else:
                x, y = vals[self._a[n]], vals[self._b[n]]
                if k == K_ADD:
                    vals[n] = x + y
                elif k == K_SUB:
                    vals[n] = x - y
                elif k == K_MUL:
                    vals[n] = x * y
                elif k == K_DIV:
                    if y == 0.0:
                        raise EvalError(f"division by zero at node {n} ({self.describe(n)})")
                    vals[n] = x / y
                elif k == K_MIN:
                    vals[n] = min(x, y)
                else:
                    vals[n] = max(x, y)
        return vals[e.id]

    def eval_batch(self, roots: Sequence[Expr], columns: Mapping[int, np.ndarray]) -> list[np.ndarray]:
        """Vectorized point evaluation; ``columns`` maps variable index to a
        1-d array (all the same length).  Intermediate arrays are freed at
        their last use so deep graphs stay memory-bounded."""
        order = self.schedule(roots)
        root_ids = {r.id for r in roots}
        n_len = 1
        for arr in columns.values():
            n_len = np.asarray(arr).shape[0]
            break
        last_use: dict[int, int] = {}
        for pos, n in enumerate(order):
            for c in self._children(n):
                last_use[c] = pos
        for r in root_ids:
            last_use[r] = len(order)
        vals: dict[int, np.ndarray] = {}
        for pos, n in enumerate(order):
            k = self._kind[n]
            if k == K_CONST:
                v = np.full(n_len, self._value[n])
            elif k == K_VAR:
                idx = self._a[n]
                if idx not in columns:
                    raise EvalError(f"assignment missing variable {self.variables[idx]!r}")
                v = np.asarray(columns[idx], dtype=float)
            elif k == K_POW:
                v = vals[self._a[n]] ** self._b[n]
            elif k in _UNARY:
                x = vals[self._a[n]]
                if k == K_NEG:
                    v = -x
                elif k == K_SIN:
                    v = np.sin(x)
                elif k == K_COS:
                    v = np.cos(x)
                elif k == K_EXP:
                    v = np.exp(x)
                elif k == K_ABS:
                    v = np.abs(x)
                else:
                    v = np.where(x <= 0.0, 1.0, 0.0)
            else:
                x, y = vals[self._a[n]], vals[self._b[n]]
                if k == K_ADD:
                    v = x + y
                elif k == K_SUB:
                    v = x - y
                elif k == K_MUL:
                    v = x * y
                elif k == K_DIV:
                    if np.any(y == 0.0):
                        raise EvalError(f"division by zero at node {n} ({self.describe(n)})")
                    v = x / y
                elif k == K_MIN:
                    v = np.minimum(x, y)
                else:
                    v = np.maximum(x, y)
            vals[n] = v
            for c in set(self._children(n)):
                if last_use.get(c) == pos and c not in root_ids:
                    del vals[c]
        return [np.asarray(vals[r.id], dtype=float) for r in roots]

    # -- interval evaluation ---------------------------------------------------
    def eval_interval(self, e: Expr, box: IntervalBox) -> tuple[float, float]:
        """Sound enclosure of ``e`` over ``box``: for every p in box,
        eval_point(e, p) lies inside the returned interval."""
        covered = set(box.var_indices)
        missing = [self.variables[i] for i in sorted(self.free_vars(e)) if i not in covered]
        if missing:
            raise EnclosureError(f"box missing variables {missing}")
        lo_cols = {idx: np.array([box.lo[j]]) for j, idx in enumerate(box.var_indices)}
        hi_cols = {idx: np.array([box.hi[j]]) for j, idx in enumerate(box.var_indices)}
        los, his = self.eval_interval_batch([e], lo_cols, hi_cols)
        return float(los[0][0]), float(his[0][0])

    def eval_interval_batch(
        self,
        roots: Sequence[Expr],
        lo_cols: Mapping[int, np.ndarray],
        hi_cols: Mapping[int, np.ndarray],
    ) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """Vectorized interval evaluation over many boxes at once.

        ``lo_cols``/``hi_cols`` map variable index to 1-d arrays of per-box
        bounds.  Returns per-root (lo, hi) arrays.  Raises
        :class:`EnclosureError` if any division's denominator interval
        contains zero in any box.
        """
        order = self.schedule(roots)
        root_ids = {r.id for r in roots}
        n_len = None
        for arr in lo_cols.values():
            n_len = np.asarray(arr).shape[0]
            break
        if n_len is None:
            n_len = 1
        last_use: dict[int, int] = {}
        for pos, n in enumerate(order):
            for c in self._children(n):
                last_use[c] = pos
        for r in root_ids:
            last_use[r] = len(order)
        ivs: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for pos, n in enumerate(order):
            k = self._kind[n]
            if k == K_CONST:
                c = np.full(n_len, self._value[n])
                v = (c, c)
            elif k == K_VAR:
                idx = self._a[n]
                if idx not in lo_cols:
                    raise EnclosureError(f"box missing variable {self.variables[idx]!r}")
                v = (np.asarray(lo_cols[idx], dtype=float), np.asarray(hi_cols[idx], dtype=float))
            elif k == K_POW:
                v = _iv_pow(*ivs[self._a[n]], self._b[n])
            elif k in _UNARY:
                xl, xh = ivs[self._a[n]]
                if k == K_NEG:
                    v = (-xh, -xl)
                elif k == K_SIN:
                    v = _iv_sin(xl, xh)
                elif k == K_COS:
                    # cos x = sin(x + pi/2); outward-round the shift
                    v = _iv_sin(_down(xl + _HALF_PI), _up(xh + _HALF_PI))
                elif k == K_EXP:
                    v = (_widen_down(np.exp(xl)), _widen_up(np.exp(xh)))
                elif k == K_ABS:
                    v = (np.where(xl > 0, xl, np.where(xh < 0, -xh, 0.0)),
                         np.maximum(-xl, xh))
                else:  # step
                    v = (np.where(xh <= 0.0, 1.0, 0.0), np.where(xl <= 0.0, 1.0, 0.0))
            else:
                xl, xh = ivs[self._a[n]]
                yl, yh = ivs[self._b[n]]
                if k == K_ADD:
                    v = (_down(xl + yl), _up(xh + yh))
                elif k == K_SUB:
                    v = (_down(xl - yh), _up(xh - yl))
                elif k == K_MUL:
                    v = _iv_mul(xl, xh, yl, yh)
                elif k == K_DIV:
                    if np.any((yl <= 0.0) & (yh >= 0.0)):
                        raise EnclosureError(
                            f"denominator interval straddles zero at node {n}; split the box")
                    v = _iv_div(xl, xh, yl, yh)
                elif k == K_MIN:
                    v = (np.minimum(xl, yl), np.minimum(xh, yh))
                else:
                    v = (np.maximum(xl, yl), np.maximum(xh, yh))
            ivs[n] = v
            for c in set(self._children(n)):
                if last_use.get(c) == pos and c not in root_ids:
                    del ivs[c]
        los = [np.asarray(ivs[r.id][0], dtype=float) for r in roots]
        his = [np.asarray(ivs[r.id][1], dtype=float) for r in roots]
        return los, his

    # -- differentiation -------------------------------------------------------
    def differentiate(self, e: Expr, var: int | str) -> Expr:
        """Partial derivative as a new Expr sharing subgraphs with ``e``.

        min/max pick the left branch at ties; abs uses +1 at zero (both are
        valid subgradients and deterministic).  step differentiates to 0.
        """
        vidx = var if isinstance(var, int) else self.var_index(var)
        out: dict[int, int] = {}
        for n in self.schedule([e]):
            key = (n, vidx)
            hit = self._diff_memo.get(key)
            if hit is not None:
                out[n] = hit
                continue
            k = self._kind[n]
            E = lambda i: Expr(self, i)
            if k == K_CONST:
                d = self.const(0.0)
            elif k == K_VAR:
                d = self.const(1.0 if self._a[n] == vidx else 0.0)
            elif k == K_POW:
                a, p = self._a[n], self._b[n]
                d = self.mul(self.mul(self.const(p), self.pow(E(a), p - 1)), E(out[a]))
            elif k in _UNARY:
                a = self._a[n]
                da = E(out[a])
                if k == K_NEG:
                    d = self.neg(da)
                elif k == K_SIN:
                    d = self.mul(self.cos(E(a)), da)
                elif k == K_COS:
                    d = self.neg(self.mul(self.sin(E(a)), da))
                elif k == K_EXP:
                    d = self.mul(self.exp(E(a)), da)
                elif k == K_ABS:
                    sgn = self.sub(self.mul(self.const(2.0), self.step(self.neg(E(a)))),
                                   self.const(1.0))
                    d = self.mul(sgn, da)
                else:  # step
                    d = self.const(0.0)
            else:
                a, b = self._a[n], self._b[n]
                da, db = E(out[a]), E(out[b])
                if k == K_ADD:
                    d = self.add(da, db)
                elif k == K_SUB:
                    d = self.sub(da, db)
                elif k == K_MUL:
                    d = self.add(self.mul(da, E(b)), self.mul(E(a), db))
                elif k == K_DIV:
                    num = self.sub(self.mul(da, E(b)), self.mul(E(a), db))
                    d = self.div(num, self.pow(E(b), 2))
                elif k == K_MIN:
                    sel = self.step(self.sub(E(a), E(b)))  # 1 where a <= b
                    d = self.add(self.mul(sel, da),
                                 self.mul(self.sub(self.const(1.0), sel), db))
                else:  # max: 1 where b - a <= 0, i.e. a >= b
                    sel = self.step(self.sub(E(b), E(a)))
                    d = self.add(self.mul(sel, da),
                                 self.mul(self.sub(self.const(1.0), sel), db))
            out[n] = d.id
            self._diff_memo[key] = d.id
        return Expr(self, out[e.id])

    # -- substitution ------------------------------------------------------------
    def substitute(self, e: Expr, mapping: Mapping[int | str, "Expr | float"]) -> Expr:
        """Replace variables by expressions (or constants), rebuilding shared
        structure through the pool."""
        repl: dict[int, int] = {}
        for key, val in mapping.items():
            idx = key if isinstance(key, int) else self.var_index(key)
            ex = val if isinstance(val, Expr) else self.const(val)
            repl[idx] = ex.id
        out: dict[int, int] = {}
        for n in self.schedule([e]):
            k = self._kind[n]
            E = lambda i: Expr(self, i)
            if k == K_CONST:
                out[n] = n
            elif k == K_VAR:
                out[n] = repl.get(self._a[n], n)
            elif k == K_POW:
                out[n] = self.pow(E(out[self._a[n]]), self._b[n]).id
            elif k in _UNARY:
                out[n] = self._unary(k, E(out[self._a[n]])).id
            else:
                out[n] = self._binary(k, E(out[self._a[n]]), E(out[self._b[n]])).id
        return Expr(self, out[e.id])

    # -- rendering ---------------------------------------------------------------
    def to_infix(self, e: Expr) -> str:
        k = self._kind[e.id]
        E = lambda i: self.to_infix(Expr(self, i))
        a, b = self._a[e.id], self._b[e.id]
        if k == K_CONST:
            return repr(self._value[e.id])
        if k == K_VAR:
            return self.variables[a]
        if k == K_POW:
            return f"({E(a)})^{b}"
        names = {K_NEG: "-", K_SIN: "sin", K_COS: "cos", K_EXP: "exp",
                 K_ABS: "abs", K_STEP: "step"}
        if k in _UNARY:
            if k == K_NEG:
                return f"(-{E(a)})"
            return f"{names[k]}({E(a)})"
        ops = {K_ADD: "+", K_SUB: "-", K_MUL: "*", K_DIV: "/"}
        if k in (K_MIN, K_MAX):
            return f"{'min' if k == K_MIN else 'max'}({E(a)}, {E(b)})"
        return f"({E(a)} {ops[k]} {E(b)})"

    def to_smtlib(self, e: Expr, relation: str, threshold: float, box: IntervalBox) -> str:
        """Complete SMT-LIB2 script (logic QF_NRA) asserting box membership
        and ``e relation threshold``; min/max/abs/step become ``ite``."""
        if relation not in (">", "<"):
            raise ExprError("relation must be '>' or '<'")
        covered = set(box.var_indices)
        loose = [self.variables[i] for i in sorted(self.free_vars(e)) if i not in covered]
        if loose:
            raise ExprError(f"box does not cover variables {loose}")
        order = self.schedule([e])
        refcount: dict[int, int] = {e.id: 1}
        for n in order:
            for c in self._children(n):
                refcount[c] = refcount.get(c, 0) + 1
        shared = [n for n in order
                  if refcount.get(n, 0) > 1 and self._kind[n] not in (K_CONST, K_VAR)]
        bind_name = {n: f"e{n}" for n in shared}

        def render(n: int, inside: set[int]) -> str:
            if n in bind_name and n in inside:
                return bind_name[n]
            k = self._kind[n]
            a, b = self._a[n], self._b[n]
            if k == K_CONST:
                return _smt_num(self._value[n])
            if k == K_VAR:
                return self.variables[a]
            if k == K_POW:
                base = render(a, inside)
                out = base
                for _ in range(self._b[n] - 1):
                    out = f"(* {out} {base})"
                return out
            if k in _UNARY:
                x = render(a, inside)
                return {
                    K_NEG: f"(- {x})", K_SIN: f"(sin {x})", K_COS: f"(cos {x})",
                    K_EXP: f"(exp {x})",
                    K_ABS: f"(ite (>= {x} 0.0) {x} (- {x}))",
                    K_STEP: f"(ite (<= {x} 0.0) 1.0 0.0)",
                }[k]
            x, y = render(a, inside), render(b, inside)
            return {
                K_ADD: f"(+ {x} {y})", K_SUB: f"(- {x} {y})",
                K_MUL: f"(* {x} {y})", K_DIV: f"(/ {x} {y})",
                K_MIN: f"(ite (<= {x} {y}) {x} {y})",
                K_MAX: f"(ite (>= {x} {y}) {x} {y})",
            }[k]

        lines = ["(set-logic QF_NRA)"]
        for j, idx in enumerate(box.var_indices):
            name = self.variables[idx]
            lines.append(f"(declare-fun {name} () Real)")
            lines.append(f"(assert (>= {name} {_smt_num(box.lo[j])}))")
            lines.append(f"(assert (<= {name} {_smt_num(box.hi[j])}))")
        bound: set[int] = set()
        body_parts: list[str] = []
        for n in shared:
            body_parts.append(f"(let (({bind_name[n]} {render(n, bound)})) ")
            bound.add(n)
        body = render(e.id, bound) + ")" * len(shared)
        body = "".join(body_parts) + body
        lines.append(f"(assert ({relation} {body} {_smt_num(threshold)}))")
        lines.append("(check-sat)")
        lines.append("(exit)")
        return "\n".join(lines) + "\n"


# -- interval primitives (vectorized, outward-rounded) ---------------------------

def _down(a: np.ndarray) -> np.ndarray:
    return np.nextafter(a, -np.inf)


def _up(a: np.ndarray) -> np.ndarray:
    return np.nextafter(a, np.inf)


def _widen_down(a: np.ndarray, ulps: int = 4) -> np.ndarray:
    for _ in range(ulps):
        a = np.nextafter(a, -np.inf)
    return a


def _widen_up(a: np.ndarray, ulps: int = 4) -> np.ndarray:
    for _ in range(ulps):
        a = np.nextafter(a, np.inf)
    return a


def _iv_mul(xl, xh, yl, yh):
    p1, p2, p3, p4 = xl * yl, xl * yh, xh * yl, xh * yh
    lo = np.minimum(np.minimum(p1, p2), np.minimum(p3, p4))
    hi = np.maximum(np.maximum(p1, p2), np.maximum(p3, p4))
    return _down(lo), _up(hi)


def _iv_div(xl, xh, yl, yh):
    q1, q2, q3, q4 = xl / yl, xl / yh, xh / yl, xh / yh
    lo = np.minimum(np.minimum(q1, q2), np.minimum(q3, q4))
    hi = np.maximum(np.maximum(q1, q2), np.maximum(q3, q4))
    return _down(lo), _up(hi)


def _iv_pow(xl, xh, n: int):
    if n % 2 == 1:
        return _down(xl ** n), _up(xh ** n)
    ln, hn = xl ** n, xh ** n
    lo = np.where(xl > 0, ln, np.where(xh < 0, hn, 0.0))
    hi = np.maximum(ln, hn)
    return np.where(lo == 0.0, lo, _down(lo)), _up(hi)


def _iv_sin(xl, xh):
    """Period-aware enclosure of sin over [xl, xh], widened by 4 ulps plus an
    argument-magnitude slack (covers libm error and argument rounding) and
    clamped to [-1, 1].  Critical-point tests carry a conservative slop so
    rounding can only widen the enclosure, never shrink it.  Arguments with
    magnitude beyond 1e15 fall back to [-1, 1] (period location is lost in
    double precision there)."""
    width = xh - xl
    sl, sh = np.sin(xl), np.sin(xh)
    lo = np.minimum(sl, sh)
    hi = np.maximum(sl, sh)
    mag = np.maximum(np.abs(xl), np.abs(xh))
    slop = 1e-9 * np.maximum(1.0, mag)
    # does [xl, xh] contain pi/2 + 2k*pi (a max) / -pi/2 + 2k*pi (a min)?
    k0 = np.floor((xl - _HALF_PI) / _TWO_PI)
    has_max = np.zeros(np.shape(xl), dtype=bool)
    k1 = np.floor((xl + _HALF_PI) / _TWO_PI)
    has_min = np.zeros(np.shape(xl), dtype=bool)
    for j in (0.0, 1.0, 2.0):
        cmax = _HALF_PI + _TWO_PI * (k0 + j)
        has_max |= (cmax >= xl - slop) & (cmax <= xh + slop)
        cmin = -_HALF_PI + _TWO_PI * (k1 + j)
        has_min |= (cmin >= xl - slop) & (cmin <= xh + slop)
    full = (width >= _TWO_PI) | (mag > 1e15)
    pad = 4e-16 * np.maximum(1.0, mag)
    hi = np.where(has_max | full, 1.0, _widen_up(hi) + pad)
    lo = np.where(has_min | full, -1.0, _widen_down(lo) - pad)
    return np.maximum(lo, -1.0), np.minimum(hi, 1.0)


def _smt_num(v: float) -> str:
    v = float(v)
    if v < 0:
        return f"(- {_smt_num(-v)})"
    text = format(Decimal(repr(v)), "f")
    if "." not in text:
        text += ".0"
    return text
