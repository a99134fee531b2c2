# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops.  Signatures mirror :mod:`nodulenet._pykernels` exactly."""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport floor, fabs
from libc.string cimport memcpy

cnp.import_array()


def trilinear(const float[:, :, ::1] vol, const double[:, ::1] coords, double pad):
    """Trilinear interpolation of ``vol`` (z, y, x) at voxel coordinates (x, y, z)."""
    cdef Py_ssize_t n = coords.shape[0]
    cdef Py_ssize_t nz = vol.shape[0], ny = vol.shape[1], nx = vol.shape[2]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t p, i0, j0, k0
    cdef double cx, cy, cz, fx, fy, fz, c00, c01, c10, c11, c0, c1
    with nogil:
        for p in range(n):
            cx = coords[p, 0]
            cy = coords[p, 1]
            cz = coords[p, 2]
            if not (cx >= 0 and cy >= 0 and cz >= 0 and cx <= nx - 1 and cy <= ny - 1 and cz <= nz - 1):
                out[p] = pad
                continue
            i0 = <Py_ssize_t>floor(cx)
            j0 = <Py_ssize_t>floor(cy)
            k0 = <Py_ssize_t>floor(cz)
            if i0 > nx - 2:
                i0 = nx - 2
            if j0 > ny - 2:
                j0 = ny - 2
            if k0 > nz - 2:
                k0 = nz - 2
            fx = cx - i0
            fy = cy - j0
            fz = cz - k0
            c00 = vol[k0, j0, i0] * (1 - fx) + vol[k0, j0, i0 + 1] * fx
            c01 = vol[k0, j0 + 1, i0] * (1 - fx) + vol[k0, j0 + 1, i0 + 1] * fx
            c10 = vol[k0 + 1, j0, i0] * (1 - fx) + vol[k0 + 1, j0, i0 + 1] * fx
            c11 = vol[k0 + 1, j0 + 1, i0] * (1 - fx) + vol[k0 + 1, j0 + 1, i0 + 1] * fx
            c0 = c00 * (1 - fy) + c01 * fy
            c1 = c10 * (1 - fy) + c11 * fy
            out[p] = c0 * (1 - fz) + c1 * fz
    return out_arr


def im2col(const floating[:, :, :, ::1] x, int k):
    """Unfold zero-padded k x k neighbourhoods of an NHWC batch.

    Returns rows of shape (B*H*W, k*k*C); column order is (di, dj, c), so
    ``cols @ W2d.T`` is already the NHWC output.
    """
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3]
    cdef Py_ssize_t pad = (k - 1) // 2
    cdef Py_ssize_t K = k * k * C
    dtype = np.float32 if floating is float else np.float64
    # padded copy turns each kernel row into one contiguous run of k*C values
    xp_arr = np.zeros((B, H + 2 * pad, W + 2 * pad, C), dtype=dtype)
    xp_arr[:, pad:pad + H, pad:pad + W, :] = x
    cdef const floating[:, :, :, ::1] xp = xp_arr
    cols_arr = np.empty((B * H * W, K), dtype=dtype)
    cdef floating[:, ::1] cols = cols_arr
    cdef floating* dst
    cdef Py_ssize_t b, i, j, di
    cdef size_t run = k * C * sizeof(floating)
    with nogil:
        for b in range(B):
            for i in range(H):
                for j in range(W):
                    dst = &cols[(b * H + i) * W + j, 0]
                    for di in range(k):
                        memcpy(dst + di * k * C, &xp[b, i + di, j, 0], run)
    return cols_arr


def col2im(const floating[:, ::1] cols, Py_ssize_t B, Py_ssize_t H, Py_ssize_t W, Py_ssize_t C, int k):
    """Adjoint of :func:`im2col`: scatter-add rows back onto an NHWC grid."""
    cdef Py_ssize_t pad = (k - 1) // 2
    dtype = np.float32 if floating is float else np.float64
    x_arr = np.zeros((B, H, W, C), dtype=dtype)
    cdef floating[:, :, :, ::1] x = x_arr
    cdef floating* dst
    cdef const floating* src
    cdef Py_ssize_t b, i, j, di, dj, si, sj, t
    with nogil:
        for b in range(B):
            for i in range(H):
                for j in range(W):
                    src = &cols[(b * H + i) * W + j, 0]
                    for di in range(k):
                        si = i + di - pad
                        for dj in range(k):
                            sj = j + dj - pad
                            if si >= 0 and si < H and sj >= 0 and sj < W:
                                dst = &x[b, si, sj, 0]
                                for t in range(C):
                                    dst[t] += src[t]
                            src = src + C
    return x_arr


def maxpool2_forward(const floating[:, :, :, ::1] x):
    """2x2/stride-2 max pool of an NHWC batch; returns (out, argmax in 0..3).

    Ties resolve to the first index in row-major window order.
    """
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1] // 2, W = x.shape[2] // 2, C = x.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((B, H, W, C), dtype=dtype)
    idx_arr = np.empty((B, H, W, C), dtype=np.uint8)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef unsigned char[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t b, c, i, j
    cdef floating best, v
    cdef unsigned char arg
    with nogil:
        for b in range(B):
            for i in range(H):
                for j in range(W):
                    for c in range(C):
                        best = x[b, 2 * i, 2 * j, c]
                        arg = 0
                        v = x[b, 2 * i, 2 * j + 1, c]
                        if v > best:
                            best = v
                            arg = 1
                        v = x[b, 2 * i + 1, 2 * j, c]
                        if v > best:
                            best = v
                            arg = 2
                        v = x[b, 2 * i + 1, 2 * j + 1, c]
                        if v > best:
                            best = v
                            arg = 3
                        out[b, i, j, c] = best
                        idx[b, i, j, c] = arg
    return out_arr, idx_arr


def maxpool2_backward(const floating[:, :, :, ::1] dout, const unsigned char[:, :, :, ::1] idx):
    cdef Py_ssize_t B = dout.shape[0], H = dout.shape[1], W = dout.shape[2], C = dout.shape[3]
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.zeros((B, 2 * H, 2 * W, C), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t b, c, i, j
    cdef unsigned char a
    with nogil:
        for b in range(B):
            for i in range(H):
                for j in range(W):
                    for c in range(C):
                        a = idx[b, i, j, c]
                        dx[b, 2 * i + (a >> 1), 2 * j + (a & 1), c] = dout[b, i, j, c]
    return dx_arr


def svm_dual_cd_pass(const double[:, ::1] X, const double[::1] y, double[::1] w,
                     double[::1] alpha, const Py_ssize_t[::1] order,
                     const double[::1] qdiag, double C):
    """One pass of dual coordinate descent for the L1-loss linear SVM.

    Updates ``w`` and ``alpha`` in place and returns the (max, min) projected
    gradient seen during the pass, used for the stopping rule.
    """
    cdef Py_ssize_t n_features = X.shape[1]
    cdef Py_ssize_t t, i, f
    cdef double g, pg, a_old, a_new, delta
    cdef double pg_max = -1e300, pg_min = 1e300
    with nogil:
        for t in range(order.shape[0]):
            i = order[t]
            g = 0.0
            for f in range(n_features):
                g = g + w[f] * X[i, f]
            g = y[i] * g - 1.0
            a_old = alpha[i]
            if a_old == 0.0:
                pg = g if g < 0.0 else 0.0
            elif a_old == C:
                pg = g if g > 0.0 else 0.0
            else:
                pg = g
            if pg > pg_max:
                pg_max = pg
            if pg < pg_min:
                pg_min = pg
            if fabs(pg) > 1e-12:
                a_new = a_old - g / qdiag[i]
                if a_new < 0.0:
                    a_new = 0.0
                elif a_new > C:
                    a_new = C
                delta = (a_new - a_old) * y[i]
                alpha[i] = a_new
                for f in range(n_features):
                    w[f] = w[f] + delta * X[i, f]
    return pg_max, pg_min
