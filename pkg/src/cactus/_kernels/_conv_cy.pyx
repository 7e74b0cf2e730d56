# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled 2-D convolution kernels (forward, input gradient, weight
gradient) over NCHW float64 arrays. Drop-in replacements for the pure-numpy
versions in conv_py; selected at import time by the package's kernel loader.

Padding validity is folded into per-tap loop bounds, so the innermost loops
carry no branches; a unit-stride specialization lets the C compiler vectorize
them, and the summed channel axis is tiled four wide to amortize row traffic
and break floating-point add latency chains. Summation order therefore
differs from the fallback backend at the last-ulp level, which is why backend
equivalence is checked with tolerances rather than bitwise.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


cdef inline Py_ssize_t _tap_lo(Py_ssize_t pad, Py_ssize_t k, Py_ssize_t stride) nogil:
    # Smallest output index whose input coordinate (idx*stride - pad + k) is >= 0.
    cdef Py_ssize_t a = pad - k
    if a <= 0:
        return 0
    return (a + stride - 1) // stride


cdef inline Py_ssize_t _tap_hi(Py_ssize_t pad, Py_ssize_t k, Py_ssize_t stride,
                               Py_ssize_t size, Py_ssize_t limit) nogil:
    # One past the largest output index whose input coordinate stays < size,
    # clamped to the output extent.
    cdef Py_ssize_t a = size - 1 + pad - k
    if a < 0:
        return 0
    a = a // stride + 1
    return a if a < limit else limit


def conv2d_forward(x, w, int stride_h, int stride_w, int pad_h, int pad_w):
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, :, :, ::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], c = xv.shape[1], h = xv.shape[2], wd = xv.shape[3]
    cdef Py_ssize_t o = wv.shape[0], kh = wv.shape[2], kw = wv.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad_h - kh) // stride_h + 1
    cdef Py_ssize_t wo = (wd + 2 * pad_w - kw) // stride_w + 1
    out_arr = np.zeros((n, o, ho, wo), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t ni, oi, ci, ui, vi, ii, ji, yy, off
    cdef Py_ssize_t ii_lo, ii_hi, ji_lo, ji_hi
    cdef Py_ssize_t c4 = c & ~<Py_ssize_t>3
    cdef double w0, w1, w2, w3
    with nogil:
        for ni in range(n):
            for oi in range(o):
                for ui in range(kh):
                    ii_lo = _tap_lo(pad_h, ui, stride_h)
                    ii_hi = _tap_hi(pad_h, ui, stride_h, h, ho)
                    if ii_lo >= ii_hi:
                        continue
                    for vi in range(kw):
                        ji_lo = _tap_lo(pad_w, vi, stride_w)
                        ji_hi = _tap_hi(pad_w, vi, stride_w, wd, wo)
                        if ji_lo >= ji_hi:
                            continue
                        off = vi - pad_w
                        ci = 0
                        while ci < c4:
                            w0 = wv[oi, ci, ui, vi]
                            w1 = wv[oi, ci + 1, ui, vi]
                            w2 = wv[oi, ci + 2, ui, vi]
                            w3 = wv[oi, ci + 3, ui, vi]
                            for ii in range(ii_lo, ii_hi):
                                yy = ii * stride_h - pad_h + ui
                                if stride_w == 1:
                                    for ji in range(ji_lo, ji_hi):
                                        out[ni, oi, ii, ji] += (
                                            w0 * xv[ni, ci, yy, ji + off]
                                            + w1 * xv[ni, ci + 1, yy, ji + off]
                                            + w2 * xv[ni, ci + 2, yy, ji + off]
                                            + w3 * xv[ni, ci + 3, yy, ji + off])
                                else:
                                    for ji in range(ji_lo, ji_hi):
                                        out[ni, oi, ii, ji] += (
                                            w0 * xv[ni, ci, yy, ji * stride_w + off]
                                            + w1 * xv[ni, ci + 1, yy, ji * stride_w + off]
                                            + w2 * xv[ni, ci + 2, yy, ji * stride_w + off]
                                            + w3 * xv[ni, ci + 3, yy, ji * stride_w + off])
                            ci += 4
                        while ci < c:
                            w0 = wv[oi, ci, ui, vi]
                            for ii in range(ii_lo, ii_hi):
                                yy = ii * stride_h - pad_h + ui
                                if stride_w == 1:
                                    for ji in range(ji_lo, ji_hi):
                                        out[ni, oi, ii, ji] += w0 * xv[ni, ci, yy, ji + off]
                                else:
                                    for ji in range(ji_lo, ji_hi):
                                        out[ni, oi, ii, ji] += w0 * xv[ni, ci, yy, ji * stride_w + off]
                            ci += 1
    return out_arr


def conv2d_backward_x(g, w, Py_ssize_t h, Py_ssize_t wd, int stride_h, int stride_w, int pad_h, int pad_w):
    cdef double[:, :, :, ::1] gv = np.ascontiguousarray(g, dtype=np.float64)
    cdef double[:, :, :, ::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef Py_ssize_t n = gv.shape[0], o = gv.shape[1], ho = gv.shape[2], wo = gv.shape[3]
    cdef Py_ssize_t c = wv.shape[1], kh = wv.shape[2], kw = wv.shape[3]
    gx_arr = np.zeros((n, c, h, wd), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t ni, oi, ci, ui, vi, ii, ji, yy, off
    cdef Py_ssize_t ii_lo, ii_hi, ji_lo, ji_hi
    cdef Py_ssize_t o4 = o & ~<Py_ssize_t>3
    cdef double w0, w1, w2, w3
    with nogil:
        for ni in range(n):
            for ci in range(c):
                oi = 0
                while oi < o4:
                    for ui in range(kh):
                        ii_lo = _tap_lo(pad_h, ui, stride_h)
                        ii_hi = _tap_hi(pad_h, ui, stride_h, h, ho)
                        if ii_lo >= ii_hi:
                            continue
                        for vi in range(kw):
                            ji_lo = _tap_lo(pad_w, vi, stride_w)
                            ji_hi = _tap_hi(pad_w, vi, stride_w, wd, wo)
                            if ji_lo >= ji_hi:
                                continue
                            off = vi - pad_w
                            w0 = wv[oi, ci, ui, vi]
                            w1 = wv[oi + 1, ci, ui, vi]
                            w2 = wv[oi + 2, ci, ui, vi]
                            w3 = wv[oi + 3, ci, ui, vi]
                            for ii in range(ii_lo, ii_hi):
                                yy = ii * stride_h - pad_h + ui
                                if stride_w == 1:
                                    for ji in range(ji_lo, ji_hi):
                                        gx[ni, ci, yy, ji + off] += (
                                            w0 * gv[ni, oi, ii, ji]
                                            + w1 * gv[ni, oi + 1, ii, ji]
                                            + w2 * gv[ni, oi + 2, ii, ji]
                                            + w3 * gv[ni, oi + 3, ii, ji])
                                else:
                                    for ji in range(ji_lo, ji_hi):
                                        gx[ni, ci, yy, ji * stride_w + off] += (
                                            w0 * gv[ni, oi, ii, ji]
                                            + w1 * gv[ni, oi + 1, ii, ji]
                                            + w2 * gv[ni, oi + 2, ii, ji]
                                            + w3 * gv[ni, oi + 3, ii, ji])
                    oi += 4
                while oi < o:
                    for ui in range(kh):
                        ii_lo = _tap_lo(pad_h, ui, stride_h)
                        ii_hi = _tap_hi(pad_h, ui, stride_h, h, ho)
                        if ii_lo >= ii_hi:
                            continue
                        for vi in range(kw):
                            ji_lo = _tap_lo(pad_w, vi, stride_w)
                            ji_hi = _tap_hi(pad_w, vi, stride_w, wd, wo)
                            if ji_lo >= ji_hi:
                                continue
                            off = vi - pad_w
                            w0 = wv[oi, ci, ui, vi]
                            for ii in range(ii_lo, ii_hi):
                                yy = ii * stride_h - pad_h + ui
                                if stride_w == 1:
                                    for ji in range(ji_lo, ji_hi):
                                        gx[ni, ci, yy, ji + off] += w0 * gv[ni, oi, ii, ji]
                                else:
                                    for ji in range(ji_lo, ji_hi):
                                        gx[ni, ci, yy, ji * stride_w + off] += w0 * gv[ni, oi, ii, ji]
                    oi += 1
    return gx_arr


def conv2d_backward_w(g, x, Py_ssize_t kh, Py_ssize_t kw, int stride_h, int stride_w, int pad_h, int pad_w):
    cdef double[:, :, :, ::1] gv = np.ascontiguousarray(g, dtype=np.float64)
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = gv.shape[0], o = gv.shape[1], ho = gv.shape[2], wo = gv.shape[3]
    cdef Py_ssize_t c = xv.shape[1], h = xv.shape[2], wd = xv.shape[3]
    gw_arr = np.zeros((o, c, kh, kw), dtype=np.float64)
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef Py_ssize_t ni, oi, ci, ui, vi, ii, ji, yy, xx, off, j4
    cdef Py_ssize_t ii_lo, ii_hi, ji_lo, ji_hi
    cdef Py_ssize_t c4 = c & ~<Py_ssize_t>3
    cdef double a0, a1, a2, a3, gval
    with nogil:
        for oi in range(o):
            for ui in range(kh):
                ii_lo = _tap_lo(pad_h, ui, stride_h)
                ii_hi = _tap_hi(pad_h, ui, stride_h, h, ho)
                for vi in range(kw):
                    ji_lo = _tap_lo(pad_w, vi, stride_w)
                    ji_hi = _tap_hi(pad_w, vi, stride_w, wd, wo)
                    if ii_lo >= ii_hi or ji_lo >= ji_hi:
                        continue  # the whole tap falls in padding; gradients stay zero
                    off = vi - pad_w
                    ci = 0
                    while ci < c4:
                        # One accumulator per channel: four independent chains
                        # hide the add latency while sharing each loaded g row.
                        a0 = a1 = a2 = a3 = 0.0
                        for ni in range(n):
                            for ii in range(ii_lo, ii_hi):
                                yy = ii * stride_h - pad_h + ui
                                if stride_w == 1:
                                    for ji in range(ji_lo, ji_hi):
                                        gval = gv[ni, oi, ii, ji]
                                        a0 += gval * xv[ni, ci, yy, ji + off]
                                        a1 += gval * xv[ni, ci + 1, yy, ji + off]
                                        a2 += gval * xv[ni, ci + 2, yy, ji + off]
                                        a3 += gval * xv[ni, ci + 3, yy, ji + off]
                                else:
                                    for ji in range(ji_lo, ji_hi):
                                        gval = gv[ni, oi, ii, ji]
                                        xx = ji * stride_w + off
                                        a0 += gval * xv[ni, ci, yy, xx]
                                        a1 += gval * xv[ni, ci + 1, yy, xx]
                                        a2 += gval * xv[ni, ci + 2, yy, xx]
                                        a3 += gval * xv[ni, ci + 3, yy, xx]
                        gw[oi, ci, ui, vi] = a0
                        gw[oi, ci + 1, ui, vi] = a1
                        gw[oi, ci + 2, ui, vi] = a2
                        gw[oi, ci + 3, ui, vi] = a3
                        ci += 4
                    while ci < c:
                        # Remaining channels: unroll the dot product four wide
                        # instead, so a lone channel still gets four chains.
                        a0 = a1 = a2 = a3 = 0.0
                        j4 = ji_lo + ((ji_hi - ji_lo) & ~<Py_ssize_t>3)
                        for ni in range(n):
                            for ii in range(ii_lo, ii_hi):
                                yy = ii * stride_h - pad_h + ui
                                ji = ji_lo
                                while ji < j4:
                                    xx = ji * stride_w + off
                                    a0 += gv[ni, oi, ii, ji] * xv[ni, ci, yy, xx]
                                    a1 += gv[ni, oi, ii, ji + 1] * xv[ni, ci, yy, xx + stride_w]
                                    a2 += gv[ni, oi, ii, ji + 2] * xv[ni, ci, yy, xx + 2 * stride_w]
                                    a3 += gv[ni, oi, ii, ji + 3] * xv[ni, ci, yy, xx + 3 * stride_w]
                                    ji += 4
                                while ji < ji_hi:
                                    a0 += gv[ni, oi, ii, ji] * xv[ni, ci, yy, ji * stride_w + off]
                                    ji += 1
                        gw[oi, ci, ui, vi] = (a0 + a1) + (a2 + a3)
                        ci += 1
    return gw_arr
