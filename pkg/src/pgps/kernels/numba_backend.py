"""Numba-compiled kernels.

Inputs are padded once so the inner loops run branch-free along the
contiguous last axis, which lets LLVM vectorize them. All loops are serial
with a fixed iteration order, so results are bitwise reproducible
regardless of how many sampler workers or processes are running.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _pad_spatial(x, p0, p1, p2):
    B, C, D0, D1, D2 = x.shape
    xp = np.zeros((B, C, D0 + 2 * p0, D1 + 2 * p1, D2 + 2 * p2), dtype=np.float64)
    xp[:, :, p0 : p0 + D0, p1 : p1 + D1, p2 : p2 + D2] = x
    return xp


@njit(cache=True)
def conv3d_forward(x, w, b, stride):
    B, Ci, D0, D1, D2 = x.shape
    Co = w.shape[0]
    k0, k1, k2 = w.shape[2], w.shape[3], w.shape[4]
    s0, s1, s2 = stride
    p0, p1, p2 = (k0 - 1) // 2, (k1 - 1) // 2, (k2 - 1) // 2
    o0 = (D0 + 2 * p0 - k0) // s0 + 1
    o1 = (D1 + 2 * p1 - k1) // s1 + 1
    o2 = (D2 + 2 * p2 - k2) // s2 + 1
    xp = _pad_spatial(x, p0, p1, p2)
    y = np.empty((B, Co, o0, o1, o2), dtype=np.float64)
    row = np.empty(o2, dtype=np.float64)
    for bi in range(B):
        for co in range(Co):
            for z in range(o0):
                for yy in range(o1):
                    row[:] = b[co]
                    for ci in range(Ci):
                        for dz in range(k0):
                            iz = z * s0 + dz
                            for dy in range(k1):
                                iy = yy * s1 + dy
                                for dx in range(k2):
                                    wv = w[co, ci, dz, dy, dx]
                                    src = xp[bi, ci, iz, iy]
                                    for xx in range(o2):
                                        row[xx] += wv * src[xx * s2 + dx]
                    y[bi, co, z, yy] = row
    return y


@njit(cache=True)
def conv3d_grad_input(gy, w, stride, in_shape):
    B = gy.shape[0]
    Co, Ci = w.shape[0], w.shape[1]
    k0, k1, k2 = w.shape[2], w.shape[3], w.shape[4]
    s0, s1, s2 = stride
    p0, p1, p2 = (k0 - 1) // 2, (k1 - 1) // 2, (k2 - 1) // 2
    D0, D1, D2 = in_shape
    o0, o1, o2 = gy.shape[2], gy.shape[3], gy.shape[4]
    gxp = np.zeros((B, Ci, D0 + 2 * p0, D1 + 2 * p1, D2 + 2 * p2), dtype=np.float64)
    for bi in range(B):
        for co in range(Co):
            for z in range(o0):
                for yy in range(o1):
                    gout = gy[bi, co, z, yy]
                    for ci in range(Ci):
                        for dz in range(k0):
                            iz = z * s0 + dz
                            for dy in range(k1):
                                iy = yy * s1 + dy
                                dst = gxp[bi, ci, iz, iy]
                                for dx in range(k2):
                                    wv = w[co, ci, dz, dy, dx]
                                    for xx in range(o2):
                                        dst[xx * s2 + dx] += wv * gout[xx]
    return gxp[:, :, p0 : p0 + D0, p1 : p1 + D1, p2 : p2 + D2]


@njit(cache=True)
def conv3d_grad_weights(gy, x, w_shape, stride):
    B, Ci, D0, D1, D2 = x.shape
    Co = gy.shape[1]
    k0, k1, k2 = w_shape[2], w_shape[3], w_shape[4]
    s0, s1, s2 = stride
    p0, p1, p2 = (k0 - 1) // 2, (k1 - 1) // 2, (k2 - 1) // 2
    o0, o1, o2 = gy.shape[2], gy.shape[3], gy.shape[4]
    xp = _pad_spatial(x, p0, p1, p2)
    gw = np.zeros((Co, Ci, k0, k1, k2), dtype=np.float64)
    gb = np.zeros(Co, dtype=np.float64)
    for bi in range(B):
        for co in range(Co):
            for z in range(o0):
                for yy in range(o1):
                    gout = gy[bi, co, z, yy]
                    for ci in range(Ci):
                        for dz in range(k0):
                            iz = z * s0 + dz
                            for dy in range(k1):
                                iy = yy * s1 + dy
                                src = xp[bi, ci, iz, iy]
                                for dx in range(k2):
                                    acc = 0.0
                                    for xx in range(o2):
                                        acc += gout[xx] * src[xx * s2 + dx]
                                    gw[co, ci, dz, dy, dx] += acc
    for co in range(Co):
        acc = 0.0
        for bi in range(B):
            for z in range(o0):
                for yy in range(o1):
                    for xx in range(o2):
                        acc += gy[bi, co, z, yy, xx]
        gb[co] = acc
    return gw, gb


@njit(cache=True)
def trilinear_resample(vol, out_dims):
    n0, n1, n2 = vol.shape
    m0, m1, m2 = out_dims
    sc0 = (n0 - 1) / (m0 - 1) if m0 > 1 else 0.0
    sc1 = (n1 - 1) / (m1 - 1) if m1 > 1 else 0.0
    sc2 = (n2 - 1) / (m2 - 1) if m2 > 1 else 0.0
    out = np.empty((m0, m1, m2), dtype=np.float64)
    for i in range(m0):
        c0 = i * sc0 if m0 > 1 else 0.5 * (n0 - 1)
        a0 = int(np.floor(c0))
        if a0 < 0:
            a0 = 0
        if a0 > n0 - 1:
            a0 = n0 - 1
        f0 = min(max(c0 - a0, 0.0), 1.0)
        b0 = a0 + 1 if a0 + 1 < n0 else n0 - 1
        for j in range(m1):
            c1 = j * sc1 if m1 > 1 else 0.5 * (n1 - 1)
            a1 = int(np.floor(c1))
            if a1 < 0:
                a1 = 0
            if a1 > n1 - 1:
                a1 = n1 - 1
            f1 = min(max(c1 - a1, 0.0), 1.0)
            b1 = a1 + 1 if a1 + 1 < n1 else n1 - 1
            for k in range(m2):
                c2 = k * sc2 if m2 > 1 else 0.5 * (n2 - 1)
                a2 = int(np.floor(c2))
                if a2 < 0:
                    a2 = 0
                if a2 > n2 - 1:
                    a2 = n2 - 1
                f2 = min(max(c2 - a2, 0.0), 1.0)
                b2 = a2 + 1 if a2 + 1 < n2 else n2 - 1
                out[i, j, k] = (
                    (1 - f0) * (1 - f1) * (1 - f2) * vol[a0, a1, a2]
                    + f0 * (1 - f1) * (1 - f2) * vol[b0, a1, a2]
                    + (1 - f0) * f1 * (1 - f2) * vol[a0, b1, a2]
                    + (1 - f0) * (1 - f1) * f2 * vol[a0, a1, b2]
                    + f0 * f1 * (1 - f2) * vol[b0, b1, a2]
                    + f0 * (1 - f1) * f2 * vol[b0, a1, b2]
                    + (1 - f0) * f1 * f2 * vol[a0, b1, b2]
                    + f0 * f1 * f2 * vol[b0, b1, b2]
                )
    return out
