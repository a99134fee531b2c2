"""Pure numpy implementations of the hot loops in ``_ckernels.pyx``.

Used when the compiled extension is unavailable or when
``NODULENET_PURE_PYTHON=1`` is set.  Outputs match the compiled kernels to
floating-point rounding (the trilinear, pooling and im2col paths are exact).
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def trilinear(vol, coords, pad):
    nz, ny, nx = vol.shape
    cx, cy, cz = coords[:, 0], coords[:, 1], coords[:, 2]
    inside = (cx >= 0) & (cy >= 0) & (cz >= 0) & (cx <= nx - 1) & (cy <= ny - 1) & (cz <= nz - 1)
    out = np.full(coords.shape[0], pad, dtype=np.float64)
    cx, cy, cz = cx[inside], cy[inside], cz[inside]
    i0 = np.minimum(np.floor(cx).astype(np.intp), nx - 2)
    j0 = np.minimum(np.floor(cy).astype(np.intp), ny - 2)
    k0 = np.minimum(np.floor(cz).astype(np.intp), nz - 2)
    fx, fy, fz = cx - i0, cy - j0, cz - k0
    v = vol.astype(np.float64, copy=False)

    def at(dk, dj, di):
        return v[k0 + dk, j0 + dj, i0 + di]

    c00 = at(0, 0, 0) * (1 - fx) + at(0, 0, 1) * fx
    c01 = at(0, 1, 0) * (1 - fx) + at(0, 1, 1) * fx
    c10 = at(1, 0, 0) * (1 - fx) + at(1, 0, 1) * fx
    c11 = at(1, 1, 0) * (1 - fx) + at(1, 1, 1) * fx
    c0 = c00 * (1 - fy) + c01 * fy
    c1 = c10 * (1 - fy) + c11 * fy
    out[inside] = c0 * (1 - fz) + c1 * fz
    return out


def im2col(x, k):
    B, H, W, C = x.shape
    pad = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # B, H, W, C, k, k
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B * H * W, k * k * C)


def col2im(cols, B, H, W, C, k):
    pad = (k - 1) // 2
    blocks = cols.reshape(B, H, W, k, k, C)
    xp = np.zeros((B, H + 2 * pad, W + 2 * pad, C), dtype=cols.dtype)
    for di in range(k):
        for dj in range(k):
            xp[:, di:di + H, dj:dj + W, :] += blocks[:, :, :, di, dj, :]
    return np.ascontiguousarray(xp[:, pad:pad + H, pad:pad + W, :])


def maxpool2_forward(x):
    B, H, W, C = x.shape
    win = x.reshape(B, H // 2, 2, W // 2, 2, C).transpose(0, 1, 3, 5, 2, 4).reshape(B, H // 2, W // 2, C, 4)
    idx = np.argmax(win, axis=-1).astype(np.uint8)
    out = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2_backward(dout, idx):
    B, H, W, C = dout.shape
    onehot = np.arange(4, dtype=np.uint8) == idx[..., None]
    win = np.where(onehot, dout[..., None], 0).astype(dout.dtype)
    dx = win.reshape(B, H, W, C, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(B, 2 * H, 2 * W, C)
    return np.ascontiguousarray(dx)


def svm_dual_cd_pass(X, y, w, alpha, order, qdiag, C):
    pg_max, pg_min = -1e300, 1e300
    for i in order:
        g = y[i] * float(X[i] @ w) - 1.0
        a_old = alpha[i]
        if a_old == 0.0:
            pg = min(g, 0.0)
        elif a_old == C:
            pg = max(g, 0.0)
        else:
            pg = g
        pg_max = max(pg_max, pg)
        pg_min = min(pg_min, pg)
        if abs(pg) > 1e-12:
            a_new = min(max(a_old - g / qdiag[i], 0.0), C)
            alpha[i] = a_new
            w += ((a_new - a_old) * y[i]) * X[i]
    return pg_max, pg_min
