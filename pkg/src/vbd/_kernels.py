"""Numba kernels for the hot loops of the convolution engine.

All arrays are NHWC. Kernels are compiled lazily per dtype, so the same code
serves float32 training and float64 gradient checks.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _pad_same(x, r):
    B, H, W, C = x.shape
    xp = np.zeros((B, H + 2 * r, W + 2 * r, C), dtype=x.dtype)
    for b in range(B):
        for i in range(H):
            for j in range(W):
                for c in range(C):
                    xp[b, i + r, j + r, c] = x[b, i, j, c]
    return xp


@njit(cache=True)
def im2col_same(x, k):
    """(B, H, W, C) -> (B*H*W, k*k*C) patches, zero padded, (di, dj, c) column order."""
    B, H, W, C = x.shape
    xp = _pad_same(x, k // 2)
    out = np.empty((B * H * W, k * k * C), dtype=x.dtype)
    for b in range(B):
        for i in range(H):
            for j in range(W):
                row = (b * H + i) * W + j
                col = 0
                for di in range(k):
                    for dj in range(k):
                        for c in range(C):
                            out[row, col + c] = xp[b, i + di, j + dj, c]
                        col += C
    return out


@njit(cache=True)
def col2im_same(cols, B, H, W, C, k):
    r = k // 2
    dxp = np.zeros((B, H + 2 * r, W + 2 * r, C), dtype=cols.dtype)
    for b in range(B):
        for i in range(H):
            for j in range(W):
                row = (b * H + i) * W + j
                col = 0
                for di in range(k):
                    for dj in range(k):
                        for c in range(C):
                            dxp[b, i + di, j + dj, c] += cols[row, col + c]
                        col += C
    return np.ascontiguousarray(dxp[:, r:r + H, r:r + W, :])


@njit(cache=True)
def channel_moments(z):
    """Per-column mean and population variance, accumulated in float64."""
    n, F = z.shape
    mean = np.zeros(F)
    for r in range(n):
        for f in range(F):
            mean[f] += z[r, f]
    mean /= n
    var = np.zeros(F)
    mf = mean.astype(z.dtype)
    # per-row partial sums in the input dtype vectorize; accumulate them in float64
    part = np.zeros(F, dtype=z.dtype)
    for r in range(n):
        for f in range(F):
            d = z[r, f] - mf[f]
            part[f] += d * d
        if r % 64 == 63:
            for f in range(F):
                var[f] += part[f]
                part[f] = 0
    for f in range(F):
        var[f] += part[f]
    var /= n
    # correct for the rounded mean
    for f in range(F):
        dm = mean[f] - mf[f]
        var[f] -= dm * dm
    return mean, var


@njit(cache=True)
def affine_maxpool(z, scale, shift):
    """2x2/stride-2 max pool of ``scale * z + shift``; odd trailing rows/cols dropped.

    Returns the pooled map and the winning position (0..3, raster order,
    first maximum wins).
    """
    B, H, W, F = z.shape
    H2 = H // 2
    W2 = W // 2
    out = np.empty((B, H2, W2, F), dtype=z.dtype)
    arg = np.empty((B, H2, W2, F), dtype=np.int8)
    for b in range(B):
        for i in range(H2):
            for j in range(W2):
                for f in range(F):
                    a = scale[f]
                    s = shift[f]
                    best = a * z[b, 2 * i, 2 * j, f] + s
                    bi = 0
                    v = a * z[b, 2 * i, 2 * j + 1, f] + s
                    if v > best:
                        best = v
                        bi = 1
                    v = a * z[b, 2 * i + 1, 2 * j, f] + s
                    if v > best:
                        best = v
                        bi = 2
                    v = a * z[b, 2 * i + 1, 2 * j + 1, f] + s
                    if v > best:
                        best = v
                        bi = 3
                    out[b, i, j, f] = best
                    arg[b, i, j, f] = bi
    return out, arg


@njit(cache=True)
def maxpool_scatter(dp, arg, H, W, scale):
    """Route pooled gradients back to their winners, times a per-channel scale."""
    B, H2, W2, F = dp.shape
    dz = np.zeros((B, H, W, F), dtype=dp.dtype)
    for b in range(B):
        for i in range(H2):
            for j in range(W2):
                for f in range(F):
                    a = arg[b, i, j, f]
                    dz[b, 2 * i + a // 2, 2 * j + a % 2, f] = dp[b, i, j, f] * scale[f]
    return dz


@njit(cache=True)
def bn_maxpool_backward(z, arg, dp, mean, inv_std, gamma):
    """Backward through training-mode batchnorm followed by the max pool.

    Returns (dz, dgamma, dbeta). Pooled gradients are nonzero only at the
    winning positions, so the two batchnorm reductions run at pooled size.
    """
    B, H, W, F = z.shape
    H2 = dp.shape[1]
    W2 = dp.shape[2]
    n = B * H * W
    dbeta = np.zeros(F)
    dgamma = np.zeros(F)
    sg = np.zeros(F, dtype=z.dtype)
    szg = np.zeros(F, dtype=z.dtype)
    for b in range(B):
        for i in range(H2):
            for j in range(W2):
                for q in range(4):
                    ii = 2 * i + q // 2
                    jj = 2 * j + q % 2
                    for f in range(F):
                        g = dp[b, i, j, f] if arg[b, i, j, f] == q else 0
                        sg[f] += g
                        szg[f] += g * z[b, ii, jj, f]
        # flush the input-dtype partial sums into float64 once per image
        for f in range(F):
            dbeta[f] += sg[f]
            dgamma[f] += szg[f]
            sg[f] = 0
            szg[f] = 0
    for f in range(F):
        dgamma[f] = (dgamma[f] - mean[f] * dbeta[f]) * inv_std[f]
    # dz = coef * (n * dy - dbeta - xh * dgamma), split into an affine map of z
    # plus the scattered pooled term
    dt = z.dtype.type
    A = np.empty(F, dtype=z.dtype)
    Bc = np.empty(F, dtype=z.dtype)
    G = np.empty(F, dtype=z.dtype)
    for f in range(F):
        coef = gamma[f] * inv_std[f] / n
        A[f] = dt(-coef * dgamma[f] * inv_std[f])
        Bc[f] = dt(-coef * (dbeta[f] - mean[f] * inv_std[f] * dgamma[f]))
        G[f] = dt(coef * n)
    dz = np.empty((B, H, W, F), dtype=z.dtype)
    for b in range(B):
        for i in range(H2):
            for j in range(W2):
                for q in range(4):
                    ii = 2 * i + q // 2
                    jj = 2 * j + q % 2
                    for f in range(F):
                        g = dp[b, i, j, f] if arg[b, i, j, f] == q else 0
                        dz[b, ii, jj, f] = A[f] * z[b, ii, jj, f] + Bc[f] + G[f] * g
        # odd trailing row / column never reach the pool
        for i in range(2 * H2, H):
            for j in range(W):
                for f in range(F):
                    dz[b, i, j, f] = A[f] * z[b, i, j, f] + Bc[f]
        for i in range(2 * H2):
            for j in range(2 * W2, W):
                for f in range(F):
                    dz[b, i, j, f] = A[f] * z[b, i, j, f] + Bc[f]
    return dz, dgamma, dbeta
