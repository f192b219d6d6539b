# cython: boundscheck=False, wraparound=False, initializedcheck=False, cdivision=True
"""Compiled correlation kernels: the hot inner loops of the temporal filters.

Every kernel reduces to axpy/dot passes over contiguous time samples with
a loop-invariant tap weight; row pointers are hoisted so the inner loops
vectorize. Outputs must arrive zero-filled; all loops run without the GIL
so parallel cross-validation folds overlap.
"""

ctypedef fused real:
    float
    double

BACKEND = "native"


cdef inline Py_ssize_t _t_lo(Py_ssize_t p, Py_ssize_t pad_left) nogil:
    # valid output positions t for tap p: x index t + p - pad_left must be in range
    return pad_left - p if p < pad_left else 0


cdef inline Py_ssize_t _t_hi(Py_ssize_t p, Py_ssize_t pad_left, Py_ssize_t nt) nogil:
    cdef Py_ssize_t h = nt + pad_left - p
    return nt if nt < h else h


cdef inline void _corr_row(const real *src, const real *taps_row, real *dst,
                           Py_ssize_t taps, Py_ssize_t pad_left, Py_ssize_t nt) nogil:
    """dst[t] += sum_p src[t + p - pad_left] * taps_row[p] over valid indices."""
    cdef Py_ssize_t p, t, lo, hi
    cdef const real *shifted
    cdef real kv
    for p in range(taps):
        kv = taps_row[p]
        lo = _t_lo(p, pad_left)
        hi = _t_hi(p, pad_left, nt)
        shifted = src + (p - pad_left)
        for t in range(lo, hi):
            dst[t] += shifted[t] * kv


cdef inline void _corr_row_back(const real *gy_row, const real *taps_row, real *gx_row,
                                Py_ssize_t taps, Py_ssize_t pad_left, Py_ssize_t nt) nogil:
    """gx_row[t + p - pad_left] += gy_row[t] * taps_row[p]: adjoint of _corr_row."""
    cdef Py_ssize_t p, t, lo, hi
    cdef real *shifted
    cdef real kv
    for p in range(taps):
        kv = taps_row[p]
        lo = _t_lo(p, pad_left)
        hi = _t_hi(p, pad_left, nt)
        shifted = gx_row + (p - pad_left)
        for t in range(lo, hi):
            shifted[t] += gy_row[t] * kv


cdef inline void _corr_row_taps(const real *gy_row, const real *src, real *gt_row,
                                Py_ssize_t taps, Py_ssize_t pad_left, Py_ssize_t nt) nogil:
    """gt_row[p] += sum_t gy_row[t] * src[t + p - pad_left]."""
    cdef Py_ssize_t p, t, lo, hi
    cdef const real *shifted
    cdef real acc
    for p in range(taps):
        lo = _t_lo(p, pad_left)
        hi = _t_hi(p, pad_left, nt)
        shifted = src + (p - pad_left)
        acc = 0
        for t in range(lo, hi):
            acc += gy_row[t] * shifted[t]
        gt_row[p] += acc


def dw_fwd(real[:, :, ::1] x, real[:, ::1] k, real[:, :, :, ::1] out,
           Py_ssize_t pad_left):
    cdef Py_ssize_t nb = x.shape[0], nc = x.shape[1], nt = x.shape[2]
    cdef Py_ssize_t nk = k.shape[0], taps = k.shape[1]
    cdef Py_ssize_t b, f, c
    with nogil:
        for b in range(nb):
            for f in range(nk):
                for c in range(nc):
                    _corr_row(&x[b, c, 0], &k[f, 0], &out[b, f, c, 0], taps, pad_left, nt)


def dw_bwd_x(real[:, :, :, ::1] gy, real[:, ::1] k, real[:, :, ::1] gx,
             Py_ssize_t pad_left):
    cdef Py_ssize_t nb = gy.shape[0], nk = gy.shape[1]
    cdef Py_ssize_t nc = gy.shape[2], nt = gy.shape[3]
    cdef Py_ssize_t taps = k.shape[1]
    cdef Py_ssize_t b, f, c
    with nogil:
        for b in range(nb):
            for f in range(nk):
                for c in range(nc):
                    _corr_row_back(&gy[b, f, c, 0], &k[f, 0], &gx[b, c, 0], taps, pad_left, nt)


def dw_bwd_k(real[:, :, :, ::1] gy, real[:, :, ::1] x, real[:, ::1] gk,
             Py_ssize_t pad_left):
    cdef Py_ssize_t nb = gy.shape[0], nk = gy.shape[1]
    cdef Py_ssize_t nc = gy.shape[2], nt = gy.shape[3]
    cdef Py_ssize_t taps = gk.shape[1]
    cdef Py_ssize_t b, f, c
    with nogil:
        for b in range(nb):
            for f in range(nk):
                for c in range(nc):
                    _corr_row_taps(&gy[b, f, c, 0], &x[b, c, 0], &gk[f, 0], taps, pad_left, nt)


def mc_fwd(real[:, :, ::1] x, real[:, :, ::1] w, real[:, :, ::1] out,
           Py_ssize_t pad_left):
    cdef Py_ssize_t nb = x.shape[0], nc = x.shape[1], nt = x.shape[2]
    cdef Py_ssize_t no = w.shape[0], taps = w.shape[2]
    cdef Py_ssize_t b, o, c
    with nogil:
        for b in range(nb):
            for o in range(no):
                for c in range(nc):
                    _corr_row(&x[b, c, 0], &w[o, c, 0], &out[b, o, 0], taps, pad_left, nt)


def mc_bwd_x(real[:, :, ::1] gy, real[:, :, ::1] w, real[:, :, ::1] gx,
             Py_ssize_t pad_left):
    cdef Py_ssize_t nb = gy.shape[0], no = gy.shape[1], nt = gy.shape[2]
    cdef Py_ssize_t nc = w.shape[1], taps = w.shape[2]
    cdef Py_ssize_t b, o, c
    with nogil:
        for b in range(nb):
            for o in range(no):
                for c in range(nc):
                    _corr_row_back(&gy[b, o, 0], &w[o, c, 0], &gx[b, c, 0], taps, pad_left, nt)


def mc_bwd_w(real[:, :, ::1] gy, real[:, :, ::1] x, real[:, :, ::1] gw,
             Py_ssize_t pad_left):
    cdef Py_ssize_t nb = gy.shape[0], no = gy.shape[1], nt = gy.shape[2]
    cdef Py_ssize_t nc = x.shape[1], taps = gw.shape[2]
    cdef Py_ssize_t b, o, c
    with nogil:
        for b in range(nb):
            for o in range(no):
                for c in range(nc):
                    _corr_row_taps(&gy[b, o, 0], &x[b, c, 0], &gw[o, c, 0], taps, pad_left, nt)
