"""Gradient-check cases for every core op, registered at import."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .gradcheck import register_op_check


def _rand(rng, *shape):
    return rng.uniform(-2.0, 2.0, size=shape)


def _pos(rng, *shape):
    return rng.uniform(0.2, 2.0, size=shape)


def _scalarize(x):
    return T.sum_(T.mul(x, x))


register_op_check("add", lambda rng: (lambda a, b: _scalarize(T.add(a, b)), [_rand(rng, 3, 4), _rand(rng, 3, 4)]))
register_op_check("add_scalar", lambda rng: (lambda a, b: _scalarize(T.add(a, b)), [_rand(rng, 3, 4), _rand(rng, 1)]))
register_op_check("sub", lambda rng: (lambda a, b: _scalarize(T.sub(a, b)), [_rand(rng, 3, 4), _rand(rng, 3, 4)]))
register_op_check("mul", lambda rng: (lambda a, b: _scalarize(T.mul(a, b)), [_rand(rng, 3, 4), _rand(rng, 3, 4)]))
register_op_check("div", lambda rng: (lambda a, b: _scalarize(T.div(a, b)), [_rand(rng, 3, 4), _pos(rng, 3, 4)]))
register_op_check("neg", lambda rng: (lambda a: _scalarize(T.neg(a)), [_rand(rng, 5)]))
register_op_check("power", lambda rng: (lambda a: T.sum_(T.power(a, 3.0)), [_rand(rng, 4)]))
register_op_check("matmul", lambda rng: (lambda a, b: _scalarize(T.matmul(a, b)), [_rand(rng, 2, 3), _rand(rng, 3, 2)]))
register_op_check(
    "matmul_batched",
    lambda rng: (lambda a, b: _scalarize(T.matmul(a, b)), [_rand(rng, 2, 3, 4), _rand(rng, 2, 4, 3)]),
)
register_op_check(
    "matmul_stacked_weight",
    lambda rng: (lambda a, b: _scalarize(T.matmul(a, b)), [_rand(rng, 2, 3, 4), _rand(rng, 4, 3)]),
)
register_op_check("exp", lambda rng: (lambda a: T.sum_(T.exp(a)), [_rand(rng, 3, 3)]))
register_op_check("log", lambda rng: (lambda a: T.sum_(T.log(a)), [_pos(rng, 3, 3)]))
register_op_check("sqrt", lambda rng: (lambda a: T.sum_(T.sqrt(a)), [_pos(rng, 3, 3)]))
register_op_check("sin", lambda rng: (lambda a: T.sum_(T.sin(a)), [_rand(rng, 6)]))
register_op_check("cos", lambda rng: (lambda a: T.sum_(T.cos(a)), [_rand(rng, 6)]))
register_op_check("sigmoid", lambda rng: (lambda a: _scalarize(T.sigmoid(a)), [_rand(rng, 6)]))
register_op_check("softplus", lambda rng: (lambda a: _scalarize(T.softplus(a)), [_rand(rng, 6)]))
register_op_check(
    # relu kink: keep samples away from 0
    "relu",
    lambda rng: (lambda a: _scalarize(T.relu(a)), [np.where(np.abs(_rand(rng, 8)) < 0.1, 0.5, _rand(rng, 8))]),
)
register_op_check("reshape", lambda rng: (lambda a: _scalarize(T.reshape(a, (4, 3))), [_rand(rng, 3, 4)]))
register_op_check("transpose", lambda rng: (lambda a: _scalarize(T.transpose(a, (1, 0, 2))), [_rand(rng, 2, 3, 2)]))
register_op_check("broadcast_to", lambda rng: (lambda a: _scalarize(T.broadcast_to(a, (4, 3, 2))), [_rand(rng, 1, 3, 2)]))
register_op_check(
    "concat",
    lambda rng: (lambda a, b: _scalarize(T.concat([a, b], axis=1)), [_rand(rng, 3, 2), _rand(rng, 3, 4)]),
)
register_op_check("slice", lambda rng: (lambda a: _scalarize(a[1:3, ::2]), [_rand(rng, 4, 5)]))
register_op_check(
    "gather",
    lambda rng: (lambda a: _scalarize(T.gather(a, np.array([2, 0, 2]), axis=0)), [_rand(rng, 4, 3)]),
)
register_op_check("sum", lambda rng: (lambda a: _scalarize(T.sum_(a, axis=1)), [_rand(rng, 3, 4)]))
register_op_check("mean", lambda rng: (lambda a: _scalarize(T.mean(a, axis=0)), [_rand(rng, 3, 4)]))
register_op_check("std", lambda rng: (lambda a: T.sum_(T.std(a, axis=1)), [_rand(rng, 3, 5)]))
register_op_check("softmax", lambda rng: (lambda a: _scalarize(T.softmax(a, axis=-1)), [_rand(rng, 3, 5)]))
register_op_check(
    "layer_norm",
    lambda rng: (
        lambda a, g, b: _scalarize(T.layer_norm(a, g, b, axis=-1)),
        [_rand(rng, 3, 5), _pos(rng, 5), _rand(rng, 5)],
    ),
)
# stop_gradient is deliberately NOT here: its whole point is to disagree
# with the finite-difference oracle; its contract is tested directly.
