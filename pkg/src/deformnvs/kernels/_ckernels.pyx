# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Cython twin of numpy_ref: bilinear gathers and EA compositing scans.

Same contracts as deformnvs.kernels.numpy_ref; selected at import time by
deformnvs.kernels when compiled.
"""

import numpy as np

cimport cython
cimport numpy as cnp
from libc.math cimport exp as c_exp

ctypedef fused real:
    float
    double


def bilinear_forward(real[:, :, ::1] fmap, real[::1] px, real[::1] py):
    cdef Py_ssize_t h = fmap.shape[0]
    cdef Py_ssize_t w = fmap.shape[1]
    cdef Py_ssize_t d = fmap.shape[2]
    cdef Py_ssize_t n = px.shape[0]
    if real is float:
        out_np = np.empty((n, d), dtype=np.float32)
    else:
        out_np = np.empty((n, d), dtype=np.float64)
    cdef real[:, ::1] out = out_np
    cdef Py_ssize_t i, k, x0, y0, x1, y1
    cdef real x, y, fx, fy, w00, w01, w10, w11
    for i in range(n):
        x = px[i]
        y = py[i]
        if x < 0:
            x = 0
        if x > w - 1:
            x = w - 1
        if y < 0:
            y = 0
        if y > h - 1:
            y = h - 1
        x0 = <Py_ssize_t> x
        y0 = <Py_ssize_t> y
        if x0 > w - 2:
            x0 = w - 2 if w > 1 else 0
        if y0 > h - 2:
            y0 = h - 2 if h > 1 else 0
        x1 = x0 + 1 if x0 + 1 < w else w - 1
        y1 = y0 + 1 if y0 + 1 < h else h - 1
        fx = x - x0
        fy = y - y0
        w00 = (1 - fx) * (1 - fy)
        w01 = fx * (1 - fy)
        w10 = (1 - fx) * fy
        w11 = fx * fy
        for k in range(d):
            out[i, k] = (w00 * fmap[y0, x0, k] + w01 * fmap[y0, x1, k]
                         + w10 * fmap[y1, x0, k] + w11 * fmap[y1, x1, k])
    return out_np


def bilinear_backward(real[:, :, ::1] fmap, real[::1] px, real[::1] py,
                      real[:, ::1] grad_out):
    cdef Py_ssize_t h = fmap.shape[0]
    cdef Py_ssize_t w = fmap.shape[1]
    cdef Py_ssize_t d = fmap.shape[2]
    cdef Py_ssize_t n = px.shape[0]
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    gf_np = np.zeros((h, w, d), dtype=dtype)
    gx_np = np.zeros(n, dtype=dtype)
    gy_np = np.zeros(n, dtype=dtype)
    cdef real[:, :, ::1] gf = gf_np
    cdef real[::1] gx = gx_np
    cdef real[::1] gy = gy_np
    cdef Py_ssize_t i, k, x0, y0, x1, y1
    cdef real x, y, fx, fy, g, sx, sy
    cdef bint in_x, in_y
    for i in range(n):
        x = px[i]
        y = py[i]
        in_x = (x >= 0) and (x <= w - 1)
        in_y = (y >= 0) and (y <= h - 1)
        if x < 0:
            x = 0
        if x > w - 1:
            x = w - 1
        if y < 0:
            y = 0
        if y > h - 1:
            y = h - 1
        x0 = <Py_ssize_t> x
        y0 = <Py_ssize_t> y
        if x0 > w - 2:
            x0 = w - 2 if w > 1 else 0
        if y0 > h - 2:
            y0 = h - 2 if h > 1 else 0
        x1 = x0 + 1 if x0 + 1 < w else w - 1
        y1 = y0 + 1 if y0 + 1 < h else h - 1
        fx = x - x0
        fy = y - y0
        sx = 0
        sy = 0
        for k in range(d):
            g = grad_out[i, k]
            gf[y0, x0, k] += g * (1 - fx) * (1 - fy)
            gf[y0, x1, k] += g * fx * (1 - fy)
            gf[y1, x0, k] += g * (1 - fx) * fy
            gf[y1, x1, k] += g * fx * fy
            sx += g * ((fmap[y0, x1, k] - fmap[y0, x0, k]) * (1 - fy)
                       + (fmap[y1, x1, k] - fmap[y1, x0, k]) * fy)
            sy += g * ((fmap[y1, x0, k] - fmap[y0, x0, k]) * (1 - fx)
                       + (fmap[y1, x1, k] - fmap[y0, x1, k]) * fx)
        if in_x:
            gx[i] = sx
        if in_y:
            gy[i] = sy
    return gf_np, gx_np, gy_np


def ea_forward(real[:, ::1] sigmas, double delta):
    cdef Py_ssize_t r = sigmas.shape[0]
    cdef Py_ssize_t n = sigmas.shape[1]
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    w_np = np.empty((r, n), dtype=dtype)
    res_np = np.empty(r, dtype=dtype)
    cdef real[:, ::1] w = w_np
    cdef real[::1] res = res_np
    cdef Py_ssize_t i, j
    cdef double t, alpha
    for i in range(r):
        t = 1.0
        for j in range(n):
            alpha = 1.0 - c_exp(-(<double> sigmas[i, j]) * delta)
            w[i, j] = <real> (t * alpha)
            t = t * (1.0 - alpha)
        res[i] = <real> t
    return w_np, res_np


def ea_backward(real[:, ::1] weights, real[::1] residual,
                real[:, ::1] grad_w, real[::1] grad_res, double delta):
    cdef Py_ssize_t r = weights.shape[0]
    cdef Py_ssize_t n = weights.shape[1]
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    g_np = np.empty((r, n), dtype=dtype)
    cdef real[:, ::1] g = g_np
    cdef Py_ssize_t i, j
    cdef double tail, csum, tnext, rg
    for i in range(r):
        tail = 0.0
        rg = (<double> residual[i]) * (<double> grad_res[i])
        csum = 0.0
        for j in range(n):
            csum += weights[i, j]
        tnext = 1.0
        # single reverse sweep: tail_j = sum_{k>j} w_k * gw_k
        for j in range(n - 1, -1, -1):
            tnext = 1.0 - csum
            g[i, j] = <real> (delta * (tnext * grad_w[i, j] - tail - rg))
            tail += (<double> weights[i, j]) * (<double> grad_w[i, j])
            csum -= weights[i, j]
    return g_np
