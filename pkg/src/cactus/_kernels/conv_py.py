"""Pure-numpy convolution kernels (fallback backend).

All three kernels operate on float64 NCHW arrays and share the layout
conventions of the compiled backend: weights are (out_ch, in_ch, kh, kw),
stride and padding are given per spatial axis. Shape validation happens in
the caller; these functions assume consistent arguments.
"""

import numpy as np


def conv2d_forward(x, w, stride_h, stride_w, pad_h, pad_w):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * pad_h - kh) // stride_h + 1
    wo = (wd + 2 * pad_w - kw) // stride_w + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad_h, pad_h), (pad_w, pad_w)))
    out = np.zeros((n, o, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i : i + stride_h * ho : stride_h, j : j + stride_w * wo : stride_w]
            out += np.einsum("nchw,oc->nohw", xs, w[:, :, i, j], optimize=True)
    return out


def conv2d_backward_x(g, w, h, wd, stride_h, stride_w, pad_h, pad_w):
    n, o, ho, wo = g.shape
    _, c, kh, kw = w.shape
    gxp = np.zeros((n, c, h + 2 * pad_h, wd + 2 * pad_w), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            patch = np.einsum("nohw,oc->nchw", g, w[:, :, i, j], optimize=True)
            gxp[:, :, i : i + stride_h * ho : stride_h, j : j + stride_w * wo : stride_w] += patch
    return np.ascontiguousarray(gxp[:, :, pad_h : pad_h + h, pad_w : pad_w + wd])


def conv2d_backward_w(g, x, kh, kw, stride_h, stride_w, pad_h, pad_w):
    n, o, ho, wo = g.shape
    _, c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad_h, pad_h), (pad_w, pad_w)))
    gw = np.zeros((o, c, kh, kw), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i : i + stride_h * ho : stride_h, j : j + stride_w * wo : stride_w]
            gw[:, :, i, j] = np.einsum("nohw,nchw->oc", g, xs, optimize=True)
    return gw
