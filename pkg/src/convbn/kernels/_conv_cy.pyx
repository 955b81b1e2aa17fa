# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled 2D convolution kernels (float64, padded inputs).

Per output element the forward accumulates bias first and then the
(c, u, v) terms in ascending order, the same sequence as the reference
quadruple loop and the numpy fallback, so all three agree bit for bit.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def conv2d_forward_padded(double[:, :, :, ::1] xp, double[:, :, :, ::1] w,
                          double[::1] bias, int sh, int sw, int ho, int wo):
    cdef Py_ssize_t n_batch = xp.shape[0], c_in = xp.shape[1]
    cdef Py_ssize_t c_out = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t n, o, c, u, v, i, j, xi
    cdef double wv
    y_arr = np.empty((n_batch, c_out, ho, wo), dtype=np.float64)
    cdef double[:, :, :, ::1] y = y_arr
    for n in range(n_batch):
        for o in range(c_out):
            for i in range(ho):
                for j in range(wo):
                    y[n, o, i, j] = bias[o]
            for c in range(c_in):
                for u in range(kh):
                    for v in range(kw):
                        wv = w[o, c, u, v]
                        for i in range(ho):
                            xi = i * sh + u
                            for j in range(wo):
                                y[n, o, i, j] += wv * xp[n, c, xi, j * sw + v]
    return y_arr


def conv2d_dw_padded(double[:, :, :, ::1] xp, double[:, :, :, ::1] dy,
                     int kh, int kw, int sh, int sw):
    cdef Py_ssize_t n_batch = xp.shape[0], c_in = xp.shape[1]
    cdef Py_ssize_t c_out = dy.shape[1], ho = dy.shape[2], wo = dy.shape[3]
    cdef Py_ssize_t n, o, c, u, v, i, j, xi
    cdef double acc
    dw_arr = np.zeros((c_out, c_in, kh, kw), dtype=np.float64)
    cdef double[:, :, :, ::1] dw = dw_arr
    for o in range(c_out):
        for c in range(c_in):
            for u in range(kh):
                for v in range(kw):
                    acc = 0.0
                    for n in range(n_batch):
                        for i in range(ho):
                            xi = i * sh + u
                            for j in range(wo):
                                acc += dy[n, o, i, j] * xp[n, c, xi, j * sw + v]
                    dw[o, c, u, v] = acc
    return dw_arr


def conv2d_dx_padded(double[:, :, :, ::1] dy, double[:, :, :, ::1] w,
                     int hp, int wp, int sh, int sw):
    cdef Py_ssize_t n_batch = dy.shape[0], c_out = dy.shape[1]
    cdef Py_ssize_t ho = dy.shape[2], wo = dy.shape[3]
    cdef Py_ssize_t c_in = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t n, o, c, u, v, i, j, xi
    cdef double g
    dxp_arr = np.zeros((n_batch, c_in, hp, wp), dtype=np.float64)
    cdef double[:, :, :, ::1] dxp = dxp_arr
    for n in range(n_batch):
        for o in range(c_out):
            for i in range(ho):
                for j in range(wo):
                    g = dy[n, o, i, j]
                    for c in range(c_in):
                        for u in range(kh):
                            xi = i * sh + u
                            for v in range(kw):
                                dxp[n, c, xi, j * sw + v] += g * w[o, c, u, v]
    return dxp_arr
