"""Numpy fallback for the convolution kernels.

The forward loops over (c, u, v) while staying vectorized over the output
map, which reproduces the compiled kernel's per-element accumulation order
exactly (bias first, then kernel taps in ascending (c, u, v) order).  The
backward kernels reduce through BLAS, so they match the compiled backend to
rounding error rather than bit for bit.
"""

import numpy as np


def conv2d_forward_padded(xp, w, bias, sh, sw, ho, wo):
    n, c_in, _, _ = xp.shape
    c_out, _, kh, kw = w.shape
    y = np.empty((n, c_out, ho, wo), dtype=np.float64)
    y[:] = bias.reshape(1, -1, 1, 1)
    for c in range(c_in):
        for u in range(kh):
            for v in range(kw):
                xs = xp[:, c, u : u + sh * (ho - 1) + 1 : sh, v : v + sw * (wo - 1) + 1 : sw]
                y += w[:, c, u, v].reshape(1, -1, 1, 1) * xs[:, None, :, :]
    return y


def conv2d_dw_padded(xp, dy, kh, kw, sh, sw):
    n, c_in, _, _ = xp.shape
    _, c_out, ho, wo = dy.shape
    dw = np.empty((c_out, c_in, kh, kw), dtype=np.float64)
    for u in range(kh):
        for v in range(kw):
            xs = xp[:, :, u : u + sh * (ho - 1) + 1 : sh, v : v + sw * (wo - 1) + 1 : sw]
            dw[:, :, u, v] = np.tensordot(dy, xs, axes=([0, 2, 3], [0, 2, 3]))
    return dw


def conv2d_dx_padded(dy, w, hp, wp, sh, sw):
    n, c_out, ho, wo = dy.shape
    _, c_in, kh, kw = w.shape
    dxp = np.zeros((n, c_in, hp, wp), dtype=np.float64)
    for u in range(kh):
        for v in range(kw):
            g = np.tensordot(dy, w[:, :, u, v], axes=([1], [0]))  # [n, ho, wo, c_in]
            dxp[:, :, u : u + sh * (ho - 1) + 1 : sh, v : v + sw * (wo - 1) + 1 : sw] += (
                g.transpose(0, 3, 1, 2)
            )
    return dxp
