"""Emission-absorption ray marching.

Per-ray opacities become compositing weights w_i = T_i (1 - exp(-sigma_i
Delta)) with transmittance T_i = exp(-Delta sum_{k<i} sigma_k); colors, CSE
embeddings and the mask (values identically 1) all composite through the
same weighted sum.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import kernels
from .autodiff import tensor as T
from .autodiff.gradcheck import register_op_check
from .autodiff.tensor import Tensor
from .geometry import RaySamples, stratified_ray_points


@dataclass
class PointPredictions:
    """Field outputs at ray sample points (all (R, N_S, ...) tensors)."""

    color: Tensor  # (R, N_S, 3), in [0, 1]
    sigma: Tensor  # (R, N_S), non-negative
    cse: Tensor | None = None  # (R, N_S, D_CSE)


@dataclass
class RenderOutput:
    color: Tensor  # (R, 3)
    mask: Tensor  # (R,)  = sum of weights
    weights: Tensor  # (R, N_S)
    residual: Tensor  # (R,) leftover transmittance
    depths: np.ndarray  # (R, N_S) sample depths
    cse: Tensor | None = None  # (R, D_CSE)

    def expected_depth(self) -> np.ndarray:
        """EA-expected surface depth (detached; used for flow lifting)."""
        w = self.weights.data
        wsum = np.maximum(w.sum(axis=-1), 1e-12)
        return (w * self.depths).sum(axis=-1) / wsum


@dataclass
class SamplerConfig:
    near: float
    far: float
    n_samples: int = 32
    jitter: bool = False


def ea_weights(sigmas: Tensor, delta: float) -> tuple[Tensor, Tensor]:
    """Compositing weights and residual transmittance from (R, N_S) opacities."""
    if not isinstance(sigmas, Tensor):
        sigmas = Tensor(sigmas)
    if T.debug_checks_enabled() and np.any(sigmas.data < 0):
        raise ValueError("negative opacity passed to ea_weights")
    if delta <= 0:
        raise ValueError("delta must be positive")
    sdata = np.ascontiguousarray(sigmas.data)
    w, res = kernels.ea_forward(sdata, float(delta))

    def bw_w(g):
        return (kernels.ea_backward(w, res, np.ascontiguousarray(g, dtype=w.dtype), np.zeros_like(res), float(delta)),)

    def bw_res(g):
        zero_w = np.zeros_like(w)
        return (kernels.ea_backward(w, res, zero_w, np.ascontiguousarray(g, dtype=res.dtype), float(delta)),)

    weights = T.record_op(w, (sigmas,), bw_w, "ea_weights")
    residual = T.record_op(res, (sigmas,), bw_res, "ea_residual")
    return weights, residual


def composite(weights: Tensor, values: Tensor) -> Tensor:
    """Weighted sum over the sample axis: (R, N_S) x (R, N_S, D) -> (R, D)."""
    if weights.shape != values.shape[:2]:
        raise ValueError(f"weights {weights.shape} do not match values {values.shape}")
    r, n = weights.shape
    wexp = T.broadcast_to(T.reshape(weights, (r, n, 1)), values.shape)
    return T.sum_(T.mul(wexp, values), axis=1)


FieldFn = Callable[[RaySamples, np.ndarray], PointPredictions]


def render_rays(
    field: FieldFn,
    origins: np.ndarray,
    directions: np.ndarray,
    sampler: SamplerConfig,
    rng: np.random.Generator | None = None,
) -> RenderOutput:
    """Sample, query the field, and EA-composite one batch of rays.

    `field` receives the RaySamples and ray directions and returns
    PointPredictions; weights are kept on the output for the flow loss.
    """
    samples = stratified_ray_points(
        origins, directions, sampler.near, sampler.far, sampler.n_samples, sampler.jitter, rng
    )
    preds = field(samples, directions)
    weights, residual = ea_weights(preds.sigma, samples.delta)
    color = composite(weights, preds.color)
    mask = T.sum_(weights, axis=1)
    cse = composite(weights, preds.cse) if preds.cse is not None else None
    return RenderOutput(
        color=color, mask=mask, weights=weights, residual=residual, depths=samples.depths, cse=cse
    )


def _ea_case(rng):
    def loss(sig):
        w, res = ea_weights(sig, 0.17)
        return T.add(T.sum_(T.mul(w, w)), T.sum_(T.mul(res, res)))

    return loss, [rng.uniform(0.0, 3.0, size=(3, 6))]


def _composite_case(rng):
    def loss(w, v):
        return T.sum_(T.power(composite(w, v), 2.0))

    return loss, [rng.uniform(0, 1, size=(2, 4)), rng.uniform(-1, 1, size=(2, 4, 3))]


register_op_check("ea_weights", _ea_case)
register_op_check("composite", _composite_case)
