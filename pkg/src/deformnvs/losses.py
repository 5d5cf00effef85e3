"""Training objectives.

Photometric MSE against foreground-premultiplied targets, mask BCE,
flow-consistency loss over offset-adjusted projections with a soft Huber
norm, rendered canonical-embedding loss, and their weighted total.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import tensor as T
from .autodiff.tensor import Tensor
from .dataset import FlowPair
from .geometry import Camera, project_safe
from .kernels import bilinear_forward

HUBER_EPS = 1e-3
BCE_CLAMP = 1e-6
FLOW_TAU = 1.0


@dataclass
class LossWeights:
    photo: float = 1.0
    flow: float = 1000.0
    cse: float = 10.0
    mask: float = 1.0
    use_mask: bool = True


def huber(a: Tensor, eps: float = HUBER_EPS) -> Tensor:
    """Soft Huber norm over the last axis: eps * (sqrt(1 + |a|^2/eps^2) - 1).

    Quadratic near zero, linear in |a| for large residuals, always <= |a|.
    """
    sq = T.sum_(T.mul(a, a), axis=-1)
    return T.mul(T.sub(T.sqrt(T.add(T.mul(sq, 1.0 / (eps * eps)), 1.0)), 1.0), eps)


def photo_loss(pred_color: Tensor, target_rgb: np.ndarray, target_mask: np.ndarray) -> Tensor:
    """MSE between the rendered color and the mask-premultiplied target."""
    tgt = (target_rgb * target_mask[..., None]).astype(pred_color.dtype)
    diff = T.sub(pred_color, Tensor(np.ascontiguousarray(tgt)))
    return T.mean(T.mul(diff, diff))


def mask_loss(pred_mask: Tensor, target_mask: np.ndarray) -> Tensor:
    """Binary cross-entropy on the rendered occupancy.

    Predictions are squeezed into [clamp, 1-clamp] with an affine map so the
    log stays finite while the loss remains differentiable everywhere.
    """
    p = T.add(T.mul(pred_mask, 1.0 - 2.0 * BCE_CLAMP), BCE_CLAMP)
    t = Tensor(np.ascontiguousarray(target_mask.astype(pred_mask.dtype)))
    one_minus_t = Tensor(np.ascontiguousarray((1.0 - target_mask).astype(pred_mask.dtype)))
    ll = T.add(T.mul(t, T.log(p)), T.mul(one_minus_t, T.log(T.sub(1.0, p))))
    return T.neg(T.mean(ll))


def flow_consistency_mask(pair: FlowPair, fg_mask: np.ndarray, tau: float = FLOW_TAU) -> np.ndarray:
    """Forward-backward consistency: a foreground pixel u is trusted when
    following fwd then the bilinearly sampled bwd returns within tau pixels."""
    h, w = fg_mask.shape
    ys, xs = np.mgrid[0:h, 0:w]
    tx = (xs + pair.fwd[..., 0]).ravel()
    ty = (ys + pair.fwd[..., 1]).ravel()
    # allow a tau margin at the border: clamped sampling still verifies these
    inside = (tx >= -tau) & (tx <= w - 1 + tau) & (ty >= -tau) & (ty <= h - 1 + tau)
    bwd_at = bilinear_forward(
        np.ascontiguousarray(pair.bwd.astype(np.float64)),
        np.clip(tx, 0, w - 1),
        np.clip(ty, 0, h - 1),
    ).reshape(h, w, 2)
    resid = pair.fwd + bwd_at
    ok = np.linalg.norm(resid, axis=-1) <= tau
    return fg_mask.astype(bool) & ok & inside.reshape(h, w)


def flow_loss_single(
    points: np.ndarray,
    delta: Tensor,
    weights: Tensor,
    camera_src: Camera,
    flow_targets: np.ndarray,
    ray_valid: np.ndarray,
    eps: float = HUBER_EPS,
) -> tuple[Tensor, bool]:
    """Flow-consistency loss for one (target, source) pair.

    points: (P, N_S, 3) ray samples for the P chosen pixels (constants).
    delta: (P, N_S, 3) predicted offsets toward the source timestamp.
    weights: (P, N_S) rendering weights; detached here so the opacity path
    carries no gradient from this loss.
    flow_targets: (P, 2) pixel positions u + F_fwd[u] in the source image.
    ray_valid: (P,) consistency-checked foreground selector.

    The residual is measured in normalized image units (pixels divided by
    the image side), matching the Huber cutoff's scale and keeping the
    heavily weighted flow term commensurate with the photometric loss.

    Returns (loss, empty) where empty flags that no valid pixel was given
    (loss is then a zero constant).
    """
    p, ns, _ = points.shape
    if not np.any(ray_valid):
        return Tensor(np.zeros((), dtype=weights.dtype)), True
    sg_w = T.stop_gradient(weights)
    x = T.add(Tensor(np.ascontiguousarray(points.astype(delta.dtype))), delta)
    u, _, proj_valid = project_safe(camera_src, T.reshape(x, (p * ns, 3)))
    u = T.reshape(u, (p, ns, 2))
    tgt = np.broadcast_to(flow_targets[:, None, :], (p, ns, 2)).astype(u.dtype)
    scale = np.broadcast_to(
        1.0 / np.array([camera_src.width, camera_src.height], dtype=u.dtype), (p, ns, 2)
    )
    resid = T.mul(T.sub(u, Tensor(np.ascontiguousarray(tgt))), Tensor(np.ascontiguousarray(scale)))
    per_sample = huber(resid, eps)
    gate = (proj_valid.reshape(p, ns) & ray_valid[:, None]).astype(per_sample.dtype)
    per_sample = T.mul(per_sample, Tensor(np.ascontiguousarray(gate)))
    per_ray = T.sum_(T.mul(sg_w, per_sample), axis=1)
    total = T.sum_(per_ray)
    return T.mul(total, 1.0 / float(ray_valid.sum())), False


def flow_loss(terms: list[tuple[Tensor, bool]]) -> tuple[Tensor, bool]:
    """Average the per-pair losses; pairs with no valid pixel are skipped."""
    live = [t for t, empty in terms if not empty]
    if not live:
        dtype = terms[0][0].dtype if terms else np.float32
        return Tensor(np.zeros((), dtype=dtype)), True
    acc = live[0]
    for t in live[1:]:
        acc = T.add(acc, t)
    return T.mul(acc, 1.0 / len(live)), False


def cse_loss(pred_cse: Tensor, target_cse: np.ndarray, fg_mask: np.ndarray,
             eps: float = HUBER_EPS) -> Tensor:
    """Soft Huber norm of the embedding residual, mean over foreground pixels."""
    if not np.any(fg_mask):
        return Tensor(np.zeros((), dtype=pred_cse.dtype))
    resid = T.sub(pred_cse, Tensor(np.ascontiguousarray(target_cse.astype(pred_cse.dtype))))
    per_px = huber(resid, eps)
    gate = fg_mask.astype(per_px.dtype)
    total = T.sum_(T.mul(per_px, Tensor(np.ascontiguousarray(gate))))
    return T.mul(total, 1.0 / float(fg_mask.sum()))


def total_loss(
    photo: Tensor,
    flow: Tensor | None,
    cse: Tensor | None,
    mask: Tensor | None,
    w: LossWeights,
) -> Tensor:
    out = T.mul(photo, w.photo)
    if flow is not None:
        out = T.add(out, T.mul(flow, w.flow))
    if cse is not None:
        out = T.add(out, T.mul(cse, w.cse))
    if mask is not None and w.use_mask:
        out = T.add(out, T.mul(mask, w.mask))
    return out
