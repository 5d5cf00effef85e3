"""Finite-difference gradient verification and the checked-op registry.

Every differentiable op registers a self-contained check case here; the
acceptance suite runs all of them. The numeric side stays a central
difference of the recorded loss, independent of any backward rule.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tape, Tensor

_REGISTRY: dict[str, Callable[[np.random.Generator], tuple[Callable, list[np.ndarray]]]] = {}


def register_op_check(name: str, case_builder) -> None:
    """case_builder(rng) -> (loss_fn, [input arrays]); loss_fn maps Tensors
    to a scalar Tensor."""
    _REGISTRY[name] = case_builder


def registered_op_checks() -> dict:
    return dict(_REGISTRY)


def numeric_gradients(loss_fn, arrays, eps: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of a scalar-valued function of arrays."""
    grads = []
    for i, base in enumerate(arrays):
        g = np.zeros_like(base, dtype=np.float64)
        flat = g.reshape(-1)
        for j in range(base.size):
            args_p = [a.copy() for a in arrays]
            args_m = [a.copy() for a in arrays]
            args_p[i].reshape(-1)[j] += eps
            args_m[i].reshape(-1)[j] -= eps
            fp = loss_fn(*[Tensor(a) for a in args_p]).item()
            fm = loss_fn(*[Tensor(a) for a in args_m]).item()
            flat[j] = (fp - fm) / (2.0 * eps)
        grads.append(g)
    return grads


def analytic_gradients(loss_fn, arrays) -> list[np.ndarray]:
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = loss_fn(*tensors)
        tape.backward(loss)
    return [np.zeros_like(a) if t.grad is None else t.grad for a, t in zip(arrays, tensors)]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_case(case_builder, rng: np.random.Generator, eps: float = 1e-5) -> float:
    """Run one registered case; returns the worst relative error over inputs."""
    loss_fn, arrays = case_builder(rng)
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    ana = analytic_gradients(loss_fn, arrays)
    num = numeric_gradients(loss_fn, arrays, eps=eps)
    return max(relative_error(a, n) for a, n in zip(ana, num))
