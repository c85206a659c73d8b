"""Compiled inner loops for stride-1 2-D cross-correlation.

Strided and transposed convolutions are phase-decomposed down to these two
kernels by the caller (see functional._corr / _corr_t), so only stride-1
loops need to be fast. Loops are tiled so the innermost dimension streams
contiguously and each output element is produced by exactly one thread,
keeping results bitwise reproducible regardless of thread count.
"""

import numpy as np
from numba import njit, prange


@njit(parallel=True, cache=True)
def corr2d_s1(xp, w):
    """out[n,o,ho,wo] = sum_{c,i,j} w[o,c,i,j] * xp[n,c,ho+i,wo+j]."""
    n_im, c_in, h_in, w_in = xp.shape
    c_out, _, kh, kw = w.shape
    h_out = h_in - kh + 1
    w_out = w_in - kw + 1
    out = np.empty((n_im, c_out, h_out, w_out), dtype=xp.dtype)
    for nho in prange(n_im * h_out):
        n = nho // h_out
        ho = nho % h_out
        acc = np.zeros((c_out, w_out), dtype=xp.dtype)
        for c in range(c_in):
            for i in range(kh):
                xrow = xp[n, c, ho + i]
                for o in range(c_out):
                    wrow = w[o, c, i]
                    arow = acc[o]
                    for j in range(kw):
                        wv = wrow[j]
                        for wo in range(w_out):
                            arow[wo] += wv * xrow[wo + j]
        out[n, :, ho, :] = acc
    return out


@njit(parallel=True, cache=True)
def corr2d_s1_gw(xp, gout, kh, kw):
    """gw[o,c,i,j] = sum_{n,ho,wo} gout[n,o,ho,wo] * xp[n,c,ho+i,wo+j]."""
    n_im, c_in, h_in, w_in = xp.shape
    _, c_out, h_out, w_out = gout.shape
    gw = np.zeros((c_out, c_in, kh, kw), dtype=xp.dtype)
    for oc in prange(c_out * c_in):
        o = oc // c_in
        c = oc % c_in
        acc = np.zeros((kh, kw), dtype=xp.dtype)
        for n in range(n_im):
            for ho in range(h_out):
                gorow = gout[n, o, ho]
                for i in range(kh):
                    xrow = xp[n, c, ho + i]
                    for j in range(kw):
                        s = xp.dtype.type(0.0)
                        for wo in range(w_out):
                            s += gorow[wo] * xrow[wo + j]
                        acc[i, j] += s
        gw[o, c] = acc
    return gw


@njit(cache=True)
def corr2d_naive(xp, w, stride):
    """Reference implementation kept for cross-checks; slow on purpose."""
    n_im, c_in, h_in, w_in = xp.shape
    c_out, _, kh, kw = w.shape
    h_out = (h_in - kh) // stride + 1
    w_out = (w_in - kw) // stride + 1
    out = np.zeros((n_im, c_out, h_out, w_out), dtype=xp.dtype)
    for n in range(n_im):
        for o in range(c_out):
            for ho in range(h_out):
                for wo in range(w_out):
                    acc = xp.dtype.type(0.0)
                    for c in range(c_in):
                        for i in range(kh):
                            for j in range(kw):
                                acc += w[o, c, i, j] * xp[n, c, ho * stride + i, wo * stride + j]
                    out[n, o, ho, wo] = acc
    return out
