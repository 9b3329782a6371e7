# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled same-padded masked 2D convolution over channels-last batches.

Output channels are processed in register tiles of 8, 4, 2 or 1; the tile
width is a literal at each call site so the innermost loops unroll.  The input
gradient is the forward kernel applied to ``g`` with the spatially flipped,
channel-transposed weights.
"""
import numpy as np


cdef inline Py_ssize_t _tile(Py_ssize_t Co) noexcept nogil:
    if Co % 8 == 0:
        return 8
    if Co % 4 == 0:
        return 4
    if Co % 2 == 0:
        return 2
    return 1


cdef inline void _forward_t(const double* x, const double* w, const double* b, const unsigned char* mask,
                            double* out, Py_ssize_t B, Py_ssize_t H, Py_ssize_t W, Py_ssize_t kh,
                            Py_ssize_t kw, Py_ssize_t Ci, Py_ssize_t Co, const Py_ssize_t T) noexcept nogil:
    cdef Py_ssize_t rh = kh // 2, rw = kw // 2
    cdef Py_ssize_t n, i, j, a, c, ii, jj, ci, co, t0, tile
    cdef double acc[8]
    cdef double xv
    cdef const double* xrow
    cdef const double* wrow
    cdef double* orow
    for n in range(B):
        for i in range(H):
            for j in range(W):
                orow = out + ((n * H + i) * W + j) * Co
                for tile in range(Co // T):
                    t0 = tile * T
                    for co in range(T):
                        acc[co] = b[t0 + co]
                    for a in range(kh):
                        ii = i + a - rh
                        if ii < 0 or ii >= H:
                            continue
                        for c in range(kw):
                            jj = j + c - rw
                            if not mask[a * kw + c] or jj < 0 or jj >= W:
                                continue
                            xrow = x + ((n * H + ii) * W + jj) * Ci
                            wrow = w + (a * kw + c) * Ci * Co + t0
                            for ci in range(Ci):
                                xv = xrow[ci]
                                for co in range(T):
                                    acc[co] += xv * wrow[ci * Co + co]
                    for co in range(T):
                        orow[t0 + co] = acc[co]


cdef void _forward(const double* x, const double* w, const double* b, const unsigned char* mask,
                   double* out, Py_ssize_t B, Py_ssize_t H, Py_ssize_t W, Py_ssize_t kh, Py_ssize_t kw,
                   Py_ssize_t Ci, Py_ssize_t Co) noexcept nogil:
    cdef Py_ssize_t T = _tile(Co)
    if T == 8:
        _forward_t(x, w, b, mask, out, B, H, W, kh, kw, Ci, Co, 8)
    elif T == 4:
        _forward_t(x, w, b, mask, out, B, H, W, kh, kw, Ci, Co, 4)
    elif T == 2:
        _forward_t(x, w, b, mask, out, B, H, W, kh, kw, Ci, Co, 2)
    else:
        _forward_t(x, w, b, mask, out, B, H, W, kh, kw, Ci, Co, 1)


cdef inline void _weight_grad_t(const double* x, const double* g, const unsigned char* mask, double* gw,
                                Py_ssize_t B, Py_ssize_t H, Py_ssize_t W, Py_ssize_t kh, Py_ssize_t kw,
                                Py_ssize_t Ci, Py_ssize_t Co, const Py_ssize_t T) noexcept nogil:
    # gw[a, c] = sum over output pixels of x[pixel + tap offset]^T g[pixel];
    # one output row at a time so x and g stay in cache across taps
    cdef Py_ssize_t rh = kh // 2, rw = kw // 2
    cdef Py_ssize_t n, i, j, a, c, ii, dj, ci, co, t0, tile, j0, j1
    cdef double acc[8]
    cdef double xv
    cdef const double* grow
    cdef const double* xrow
    cdef double* gwrow
    for n in range(B):
        for i in range(H):
            for a in range(kh):
                ii = i + a - rh
                if ii < 0 or ii >= H:
                    continue
                for c in range(kw):
                    if not mask[a * kw + c]:
                        continue
                    dj = c - rw
                    j0, j1 = max(0, -dj), min(W, W - dj)
                    xrow = x + (n * H + ii) * W * Ci
                    grow = g + (n * H + i) * W * Co
                    for ci in range(Ci):
                        gwrow = gw + ((a * kw + c) * Ci + ci) * Co
                        for tile in range(Co // T):
                            t0 = tile * T
                            for co in range(T):
                                acc[co] = 0.0
                            for j in range(j0, j1):
                                xv = xrow[(j + dj) * Ci + ci]
                                for co in range(T):
                                    acc[co] += xv * grow[j * Co + t0 + co]
                            for co in range(T):
                                gwrow[t0 + co] += acc[co]


cdef void _weight_grad(const double* x, const double* g, const unsigned char* mask, double* gw,
                       Py_ssize_t B, Py_ssize_t H, Py_ssize_t W, Py_ssize_t kh, Py_ssize_t kw,
                       Py_ssize_t Ci, Py_ssize_t Co) noexcept nogil:
    cdef Py_ssize_t T = _tile(Co)
    if T == 8:
        _weight_grad_t(x, g, mask, gw, B, H, W, kh, kw, Ci, Co, 8)
    elif T == 4:
        _weight_grad_t(x, g, mask, gw, B, H, W, kh, kw, Ci, Co, 4)
    elif T == 2:
        _weight_grad_t(x, g, mask, gw, B, H, W, kh, kw, Ci, Co, 2)
    else:
        _weight_grad_t(x, g, mask, gw, B, H, W, kh, kw, Ci, Co, 1)


def _check_odd(w):
    if w.shape[0] % 2 == 0 or w.shape[1] % 2 == 0:
        raise ValueError(f"kernel must have odd spatial size, got {tuple(w.shape[:2])}")


def conv2d_forward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w,
                   const double[::1] b, const unsigned char[:, ::1] mask):
    _check_odd(w)
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], W = x.shape[2], Ci = x.shape[3]
    cdef Py_ssize_t kh = w.shape[0], kw = w.shape[1], Co = w.shape[3]
    out_arr = np.empty((B, H, W, Co), dtype=np.float64)
    if out_arr.size == 0:
        return out_arr
    cdef double[:, :, :, ::1] out = out_arr
    if Ci == 0:
        out_arr[...] = np.asarray(b)
        return out_arr
    with nogil:
        _forward(&x[0, 0, 0, 0], &w[0, 0, 0, 0], &b[0], &mask[0, 0], &out[0, 0, 0, 0], B, H, W, kh, kw, Ci, Co)
    return out_arr


def conv2d_backward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w,
                    const unsigned char[:, ::1] mask, const double[:, :, :, ::1] g):
    _check_odd(w)
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], W = x.shape[2], Ci = x.shape[3]
    cdef Py_ssize_t kh = w.shape[0], kw = w.shape[1], Co = w.shape[3]
    gx_arr = np.zeros((B, H, W, Ci), dtype=np.float64)
    gw_arr = np.zeros((kh, kw, Ci, Co), dtype=np.float64)
    gb_arr = np.asarray(g).reshape(-1, Co).sum(axis=0)
    if gx_arr.size == 0 or gw_arr.size == 0:
        return gx_arr, gw_arr, gb_arr
    # input gradient: correlate g with the flipped, transposed kernel
    wf_arr = np.ascontiguousarray(np.asarray(w)[::-1, ::-1].transpose(0, 1, 3, 2))
    mf_arr = np.ascontiguousarray(np.asarray(mask)[::-1, ::-1])
    zero_arr = np.zeros(Ci, dtype=np.float64)
    cdef const double[:, :, :, ::1] wf = wf_arr
    cdef const unsigned char[:, ::1] mf = mf_arr
    cdef const double[::1] zero = zero_arr
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef double[:, :, :, ::1] gw = gw_arr
    with nogil:
        _forward(&g[0, 0, 0, 0], &wf[0, 0, 0, 0], &zero[0], &mf[0, 0], &gx[0, 0, 0, 0], B, H, W, kh, kw, Co, Ci)
        _weight_grad(&x[0, 0, 0, 0], &g[0, 0, 0, 0], &mask[0, 0], &gw[0, 0, 0, 0], B, H, W, kh, kw, Ci, Co)
    return gx_arr, gw_arr, gb_arr
