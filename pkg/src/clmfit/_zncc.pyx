# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled Z-normalized sliding-window correlation (see clmfit.kernels)."""

import numpy as np

from libc.math cimport sqrt


def znorm_correlate(double[:, ::1] roi, double[:, :, ::1] kernels,
                    double[::1] biases, double eps=1e-8):
    cdef Py_ssize_t nk = kernels.shape[0]
    cdef Py_ssize_t kh = kernels.shape[1]
    cdef Py_ssize_t kw = kernels.shape[2]
    cdef Py_ssize_t oh = roi.shape[0] - kh + 1
    cdef Py_ssize_t ow = roi.shape[1] - kw + 1
    if kh != kw:
        raise ValueError("kernels must be square")
    if oh <= 0 or ow <= 0:
        raise ValueError(f"patch ({roi.shape[0]}, {roi.shape[1]}) is smaller "
                         f"than the {kh}x{kw} kernel")
    if biases.shape[0] != nk:
        raise ValueError("bias count does not match kernel count")

    out_arr = np.empty((nk, oh, ow), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t i, j, u, v, c
    cdef double s, mu, ss, d, sd, acc
    cdef double npix = <double> (kh * kw)

    with nogil:
        for i in range(oh):
            for j in range(ow):
                s = 0.0
                for u in range(kh):
                    for v in range(kw):
                        s += roi[i + u, j + v]
                mu = s / npix
                ss = 0.0
                for u in range(kh):
                    for v in range(kw):
                        d = roi[i + u, j + v] - mu
                        ss += d * d
                sd = sqrt(ss / npix)
                if sd < eps:
                    # Zero-variance window: normalized window is the zero vector.
                    for c in range(nk):
                        out[c, i, j] = biases[c]
                    continue
                for c in range(nk):
                    acc = 0.0
                    for u in range(kh):
                        for v in range(kw):
                            acc += (roi[i + u, j + v] - mu) * kernels[c, u, v]
                    out[c, i, j] = acc / sd + biases[c]
    return out_arr
