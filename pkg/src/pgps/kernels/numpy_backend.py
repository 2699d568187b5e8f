"""Pure-numpy reference implementations of the hot kernels.

Convolutions are evaluated as a sum over kernel taps: for each tap offset
the padded input is sliced with the stride and contracted over channels.
This keeps everything vectorized while staying readable enough to serve as
the reference the numba kernels are checked against.

Coordinate convention for resampling (shared by both backends): output
index i on an axis maps to ``i * (n_in - 1) / (n_out - 1)`` in source
coordinates; a single-element output axis maps to the source center.
Nearest-neighbor ties (source coordinate exactly halfway) resolve to the
lower index.
"""

import numpy as np


def _out_shape(in_shape, kshape, stride):
    return tuple(
        (d + 2 * ((k - 1) // 2) - k) // s + 1
        for d, k, s in zip(in_shape, kshape, stride)
    )


def _pad_spatial(x, pads):
    p0, p1, p2 = pads
    if p0 == 0 and p1 == 0 and p2 == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p0, p0), (p1, p1), (p2, p2)))


def conv3d_forward(x, w, b, stride):
    """3D convolution, same padding of (k-1)//2 per axis.

    x: (B, Ci, D0, D1, D2) float64
    w: (Co, Ci, k0, k1, k2) float64, b: (Co,) float64
    stride: triple of ints
    returns (B, Co, O0, O1, O2)
    """
    B = x.shape[0]
    Co, Ci, k0, k1, k2 = w.shape
    s0, s1, s2 = stride
    pads = ((k0 - 1) // 2, (k1 - 1) // 2, (k2 - 1) // 2)
    o0, o1, o2 = _out_shape(x.shape[2:], (k0, k1, k2), stride)
    xp = _pad_spatial(x, pads)
    y = np.empty((B, Co, o0, o1, o2), dtype=np.float64)
    y[...] = b.reshape(1, Co, 1, 1, 1)
    for d0 in range(k0):
        for d1 in range(k1):
            for d2 in range(k2):
                xs = xp[
                    :,
                    :,
                    d0 : d0 + s0 * (o0 - 1) + 1 : s0,
                    d1 : d1 + s1 * (o1 - 1) + 1 : s1,
                    d2 : d2 + s2 * (o2 - 1) + 1 : s2,
                ]
                y += np.einsum(
                    "oc,bczyx->bozyx", w[:, :, d0, d1, d2], xs, optimize=True
                )
    return y


def conv3d_grad_input(gy, w, stride, in_shape):
    """Gradient of conv3d_forward w.r.t. its input."""
    B = gy.shape[0]
    Co, Ci, k0, k1, k2 = w.shape
    s0, s1, s2 = stride
    p0, p1, p2 = (k0 - 1) // 2, (k1 - 1) // 2, (k2 - 1) // 2
    D0, D1, D2 = in_shape
    o0, o1, o2 = gy.shape[2:]
    gxp = np.zeros((B, Ci, D0 + 2 * p0, D1 + 2 * p1, D2 + 2 * p2), dtype=np.float64)
    for d0 in range(k0):
        for d1 in range(k1):
            for d2 in range(k2):
                gxp[
                    :,
                    :,
                    d0 : d0 + s0 * (o0 - 1) + 1 : s0,
                    d1 : d1 + s1 * (o1 - 1) + 1 : s1,
                    d2 : d2 + s2 * (o2 - 1) + 1 : s2,
                ] += np.einsum(
                    "oc,bozyx->bczyx", w[:, :, d0, d1, d2], gy, optimize=True
                )
    return gxp[:, :, p0 : p0 + D0, p1 : p1 + D1, p2 : p2 + D2]


def conv3d_grad_weights(gy, x, w_shape, stride):
    """Gradients of conv3d_forward w.r.t. weights and bias."""
    Co, Ci, k0, k1, k2 = w_shape
    s0, s1, s2 = stride
    pads = ((k0 - 1) // 2, (k1 - 1) // 2, (k2 - 1) // 2)
    o0, o1, o2 = gy.shape[2:]
    xp = _pad_spatial(x, pads)
    gw = np.empty(w_shape, dtype=np.float64)
    for d0 in range(k0):
        for d1 in range(k1):
            for d2 in range(k2):
                xs = xp[
                    :,
                    :,
                    d0 : d0 + s0 * (o0 - 1) + 1 : s0,
                    d1 : d1 + s1 * (o1 - 1) + 1 : s1,
                    d2 : d2 + s2 * (o2 - 1) + 1 : s2,
                ]
                gw[:, :, d0, d1, d2] = np.einsum(
                    "bozyx,bczyx->oc", gy, xs, optimize=True
                )
    gb = gy.sum(axis=(0, 2, 3, 4))
    return gw, gb


def _axis_coords(n_in, n_out):
    """Corner-aligned source coordinates for each output index."""
    if n_out == 1:
        return np.full(1, 0.5 * (n_in - 1), dtype=np.float64)
    scale = (n_in - 1) / (n_out - 1)
    return np.arange(n_out, dtype=np.float64) * scale


def trilinear_resample(vol, out_dims):
    """Trilinear resampling of a (D0, D1, D2) float64 volume."""
    n0, n1, n2 = vol.shape
    m0, m1, m2 = out_dims
    lo, hi, fr = [], [], []
    for n, m in zip(vol.shape, out_dims):
        c = _axis_coords(n, m)
        i0 = np.clip(np.floor(c).astype(np.int64), 0, n - 1)
        f = np.clip(c - i0, 0.0, 1.0)
        i1 = np.minimum(i0 + 1, n - 1)
        lo.append(i0)
        hi.append(i1)
        fr.append(f)
    out = np.zeros((m0, m1, m2), dtype=np.float64)
    for b0 in (0, 1):
        w0 = (fr[0] if b0 else 1.0 - fr[0])[:, None, None]
        i0 = (hi[0] if b0 else lo[0])[:, None, None]
        for b1 in (0, 1):
            w1 = (fr[1] if b1 else 1.0 - fr[1])[None, :, None]
            i1 = (hi[1] if b1 else lo[1])[None, :, None]
            for b2 in (0, 1):
                w2 = (fr[2] if b2 else 1.0 - fr[2])[None, None, :]
                i2 = (hi[2] if b2 else lo[2])[None, None, :]
                out += w0 * w1 * w2 * vol[i0, i1, i2]
    return out


def nearest_resample(labels, out_dims):
    """Nearest-neighbor resampling; halfway ties go to the lower index."""
    idx = []
    for n, m in zip(labels.shape, out_dims):
        c = _axis_coords(n, m)
        i = np.ceil(c - 0.5).astype(np.int64)
        idx.append(np.clip(i, 0, n - 1))
    return labels[np.ix_(idx[0], idx[1], idx[2])]


def upsample_nearest(x, factors):
    """Nearest-neighbor upsampling of (B, C, D0, D1, D2) by integer factors."""
    y = x
    for axis, f in enumerate(factors):
        if f > 1:
            y = np.repeat(y, f, axis=axis + 2)
    return y


def downsample_sum(gy, factors):
    """Adjoint of upsample_nearest: sum gradients over each upsampled block."""
    B, C, d0, d1, d2 = gy.shape
    f0, f1, f2 = factors
    g = gy.reshape(B, C, d0 // f0, f0, d1 // f1, f1, d2 // f2, f2)
    return g.sum(axis=(3, 5, 7))
