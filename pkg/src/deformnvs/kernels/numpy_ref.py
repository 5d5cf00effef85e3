"""Pure-numpy reference kernels.

These are the hot inner loops of the pipeline (per-token bilinear gathers
and per-ray compositing scans). A Cython twin lives in _ckernels.pyx; both
implement exactly the same contracts and are cross-checked in tests.
"""

from __future__ import annotations

import numpy as np


def bilinear_forward(fmap: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Bilinearly sample an (H, W, D) map at continuous pixel coords.

    Coordinates are in pixel units (px in [0, W-1], py in [0, H-1]); values
    outside are clamped to the border.
    Returns an (N, D) array of the same dtype as fmap.
    """
    h, w, _ = fmap.shape
    px = np.clip(px, 0.0, w - 1.0)
    py = np.clip(py, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(px).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(py).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (px - x0).astype(fmap.dtype)[:, None]
    fy = (py - y0).astype(fmap.dtype)[:, None]
    c00 = fmap[y0, x0]
    c01 = fmap[y0, x1]
    c10 = fmap[y1, x0]
    c11 = fmap[y1, x1]
    top = c00 * (1.0 - fx) + c01 * fx
    bot = c10 * (1.0 - fx) + c11 * fx
    return top * (1.0 - fy) + bot * fy


def bilinear_backward(
    fmap: np.ndarray,
    px: np.ndarray,
    py: np.ndarray,
    grad_out: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of bilinear_forward w.r.t. the map and both pixel coords.

    Clamped samples get zero coordinate gradient (moving the coordinate
    does not change the clamped output).
    """
    h, w, _ = fmap.shape
    inside_x = (px >= 0.0) & (px <= w - 1.0)
    inside_y = (py >= 0.0) & (py <= h - 1.0)
    px = np.clip(px, 0.0, w - 1.0)
    py = np.clip(py, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(px).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(py).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (px - x0).astype(fmap.dtype)[:, None]
    fy = (py - y0).astype(fmap.dtype)[:, None]

    grad_fmap = np.zeros_like(fmap)
    flat = grad_fmap.reshape(h * w, -1)
    np.add.at(flat, y0 * w + x0, grad_out * (1.0 - fx) * (1.0 - fy))
    np.add.at(flat, y0 * w + x1, grad_out * fx * (1.0 - fy))
    np.add.at(flat, y1 * w + x0, grad_out * (1.0 - fx) * fy)
    np.add.at(flat, y1 * w + x1, grad_out * fx * fy)

    c00 = fmap[y0, x0]
    c01 = fmap[y0, x1]
    c10 = fmap[y1, x0]
    c11 = fmap[y1, x1]
    dpx = ((c01 - c00) * (1.0 - fy) + (c11 - c10) * fy) * grad_out
    dpy = ((c10 - c00) * (1.0 - fx) + (c11 - c01) * fx) * grad_out
    grad_px = dpx.sum(axis=1) * inside_x
    grad_py = dpy.sum(axis=1) * inside_y
    return grad_fmap, grad_px.astype(fmap.dtype), grad_py.astype(fmap.dtype)


def ea_forward(sigmas: np.ndarray, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Emission-absorption compositing weights for (R, N) opacities.

    weight_i = T_i * (1 - exp(-sigma_i * delta)) with transmittance
    T_i = exp(-delta * sum_{k<i} sigma_k); residual = exp(-delta * sum_all).
    """
    a = -sigmas * sigmas.dtype.type(delta)
    ca = np.cumsum(a, axis=-1)
    weights = np.exp(ca - a) - np.exp(ca)
    residual = np.exp(ca[..., -1])
    return weights, residual


def ea_backward(
    weights: np.ndarray,
    residual: np.ndarray,
    grad_w: np.ndarray,
    grad_res: np.ndarray,
    delta: float,
) -> np.ndarray:
    """Gradient of ea_forward w.r.t. sigmas.

    d w_i / d sigma_j = -delta * w_i            (j < i)
                      =  delta * (T_i - w_i)    (j = i, and T_i - w_i = T_{i+1})
    d residual / d sigma_j = -delta * residual.
    T_{i+1} is recovered as 1 - cumsum(w) without re-touching sigmas.
    """
    tnext = 1.0 - np.cumsum(weights, axis=-1)
    wg = weights * grad_w
    tail = np.cumsum(wg[..., ::-1], axis=-1)[..., ::-1] - wg
    grad = tnext * grad_w - tail - (residual * grad_res)[..., None]
    return (grad * weights.dtype.type(delta)).astype(weights.dtype)
