# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels (see ``_pykernels`` for the reference)."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, expm1, sqrt, pow, isfinite, INFINITY, M_PI
from scipy.special.cython_special cimport erfcx, ndtr

cnp.import_array()

cdef double SQRT_HALF_PI = sqrt(M_PI / 2.0)
cdef double INV_SQRT_2PI = 1.0 / sqrt(2.0 * M_PI)
cdef double SQRT2 = sqrt(2.0)
cdef double NARROW = 1e-4


cdef inline double _phi(double x) nogil:
    return INV_SQRT_2PI * exp(-0.5 * x * x)


cdef inline double _cdf_over_pdf(double x) nogil:
    return SQRT_HALF_PI * erfcx(-x / SQRT2)


cdef inline double _mills_one(double a, double b, double clip, int *clipped) nogil:
    cdef double sign = 1.0, lo = a, hi = b, out, width, mid, expo, tail, den
    clipped[0] = 0
    if a == -INFINITY and b == INFINITY:
        return 0.0
    if a + b > 0:
        sign = -1.0
        lo = -b
        hi = -a
    width = hi - lo
    if isfinite(width) and width < NARROW:
        mid = 0.5 * (lo + hi)
        out = mid - mid * width * width / 12.0
    elif hi < -clip:
        clipped[0] = 1
        out = hi
    elif hi > 0:
        out = (_phi(lo) - _phi(hi)) / (ndtr(hi) - ndtr(lo))
    else:
        expo = 0.5 * (hi - lo) * (hi + lo)
        if lo == -INFINITY:
            tail = 0.0
        else:
            tail = _cdf_over_pdf(lo) * exp(expo)
        den = _cdf_over_pdf(hi) - tail
        out = expm1(expo) / den
    if not isfinite(out):
        clipped[0] = 1
        out = hi if isfinite(hi) else 0.0
    if out < lo:
        clipped[0] = 1
        out = lo
    elif out > hi:
        clipped[0] = 1
        out = hi
    return sign * out


def mills_shift(a, b, double clip=40.0):
    a_arr, b_arr = np.broadcast_arrays(np.asarray(a, dtype=np.float64),
                                       np.asarray(b, dtype=np.float64))
    shape = a_arr.shape
    cdef const double[::1] av = np.ascontiguousarray(a_arr).ravel()
    cdef const double[::1] bv = np.ascontiguousarray(b_arr).ravel()
    cdef Py_ssize_t n = av.shape[0], i
    out = np.empty(n, dtype=np.float64)
    flags = np.zeros(n, dtype=np.uint8)
    cdef double[::1] ov = out
    cdef unsigned char[::1] fv = flags
    cdef int c
    with nogil:
        for i in range(n):
            ov[i] = _mills_one(av[i], bv[i], clip, &c)
            fv[i] = c
    return out.reshape(shape), flags.astype(bool).reshape(shape)


def idw_fill(int rows, int cols, obs_idx, values, double power, double eps):
    cdef const cnp.int64_t[::1] idx = np.ascontiguousarray(obs_idx, dtype=np.int64)
    cdef const double[::1] val = np.ascontiguousarray(values, dtype=np.float64)
    cdef Py_ssize_t m = idx.shape[0], n = rows * cols, p, k
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] ov = out
    cdef double[::1] orow = np.empty(m, dtype=np.float64)
    cdef double[::1] ocol = np.empty(m, dtype=np.float64)
    cdef double half = 0.5 * power, r, c, dr, dc, w, sw, swy
    for k in range(m):
        orow[k] = idx[k] // cols
        ocol[k] = idx[k] % cols
    with nogil:
        for p in range(n):
            r = p // cols
            c = p % cols
            sw = 0.0
            swy = 0.0
            for k in range(m):
                dr = r - orow[k]
                dc = c - ocol[k]
                w = 1.0 / (pow(dr * dr + dc * dc, half) + eps)
                sw += w
                swy += w * val[k]
            ov[p] = swy / sw
        for k in range(m):
            ov[idx[k]] = val[k]
    return out.reshape(rows, cols)


def kmeans_assign(X, C):
    cdef const double[:, ::1] xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[:, ::1] cv = np.ascontiguousarray(C, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], k = cv.shape[0], d = xv.shape[1], i, j, f
    labels = np.empty(n, dtype=np.int64)
    d2min = np.empty(n, dtype=np.float64)
    cdef cnp.int64_t[::1] lv = labels
    cdef double[::1] dv = d2min
    cdef double best, acc, diff
    cdef cnp.int64_t arg
    with nogil:
        for i in range(n):
            best = INFINITY
            arg = 0
            for j in range(k):
                acc = 0.0
                for f in range(d):
                    diff = xv[i, f] - cv[j, f]
                    acc += diff * diff
                if acc < best:
                    best = acc
                    arg = j
            lv[i] = arg
            dv[i] = best
    return labels, d2min
