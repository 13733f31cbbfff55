import numpy as np
import pytest

from certreach import ExprPool, NetConfig, SystemSpec, ValueNet

# node builders the random generator may choose from; each entry is
# (arity, builder, smooth, bounded_output)
_UNARY_OPS = [
    ("neg", lambda p, a: p.neg(a), True),
    ("sin", lambda p, a: p.sin(a), True),
    ("cos", lambda p, a: p.cos(a), True),
    ("abs", lambda p, a: p.absolute(a), False),
]
_BINARY_OPS = [
    ("add", lambda p, a, b: p.add(a, b), True),
    ("sub", lambda p, a, b: p.sub(a, b), True),
    ("mul", lambda p, a, b: p.mul(a, b), True),
    ("min", lambda p, a, b: p.minimum(a, b), False),
    ("max", lambda p, a, b: p.maximum(a, b), False),
]


def random_expr(pool, rng, depth, n_vars, smooth_only=False, allow_div=True,
                allow_exp=True):
    """Random expression over var indices 0..n_vars-1 with magnitudes kept
    moderate (exp only on sine-bounded arguments, division bounded away from
    zero), so point and interval evaluation stay finite."""

    def leaf():
        if rng.random() < 0.4:
            return pool.const(float(rng.uniform(-2.0, 2.0)))
        return pool.var(int(rng.integers(0, n_vars)))

    def build(d):
        if d == 0:
            return leaf()
        roll = rng.random()
        if roll < 0.15:
            return leaf()
        if roll < 0.25:
            return pool.pow(build(d - 1), int(rng.integers(2, 4)))
        if roll < 0.30 and allow_exp:
            return pool.exp(pool.sin(build(d - 1)))
        if roll < 0.36 and allow_div:
            num = build(d - 1)
            den = pool.add(pool.const(float(rng.uniform(0.5, 2.0))),
                           pool.pow(pool.sin(build(d - 1)), 2))
            return pool.div(num, den)
        if roll < 0.6:
            name, op, sm = _UNARY_OPS[int(rng.integers(0, len(_UNARY_OPS)))]
            while smooth_only and not sm:
                name, op, sm = _UNARY_OPS[int(rng.integers(0, len(_UNARY_OPS)))]
            return op(pool, build(d - 1))
        name, op, sm = _BINARY_OPS[int(rng.integers(0, len(_BINARY_OPS)))]
        while smooth_only and not sm:
            name, op, sm = _BINARY_OPS[int(rng.integers(0, len(_BINARY_OPS)))]
        return op(pool, build(d - 1), build(d - 1))

    return build(depth)


@pytest.fixture(scope="session")
def double_integrator():
    """The case-study system: forward reachable set of the double integrator
    with an existential (minimizing) control."""
    return SystemSpec.create(
        state_dim=2, control_dim=1, disturbance_dim=0, t0=0.0, horizon=1.0,
        dynamics=["x2", "u1"], target="x1^2 + x2^2 - 0.5",
        domain=[(-1.0, 1.0), (-1.0, 1.0)], control_box=[(-1.0, 1.0)],
        mode="forward-set", orientation="min-max")


@pytest.fixture(scope="session")
def backward_integrator():
    """Same dynamics in backward-tube mode with the maximizing orientation."""
    return SystemSpec.create(
        state_dim=2, control_dim=1, disturbance_dim=0, t0=0.0, horizon=1.0,
        dynamics=["x2", "u1"], target="x1^2 + x2^2 - 0.5",
        domain=[(-1.0, 1.0), (-1.0, 1.0)], control_box=[(-1.0, 1.0)])


@pytest.fixture()
def small_net():
    return ValueNet(NetConfig(state_dim=2, hidden=(16,), omega=6.0,
                              poly_degree=2, seed=11))


@pytest.fixture()
def pool3():
    return ExprPool(["x", "y", "z"])
