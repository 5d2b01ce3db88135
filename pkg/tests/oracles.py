"""Brute-force reference implementations used as independent test oracles.

Everything here is written with explicit nested loops and no shared code with
the package, so a bug in the fast kernels cannot hide in the oracle.
"""

import numpy as np


def conv2d_naive(x, weight, bias=None, stride=1, padding=0):
    """Five-nested-loop direct convolution. weight: (out_ch, in_ch, kh, kw)."""
    n, c, h, w = x.shape
    out_ch, in_ch, kh, kw = weight.shape
    assert c == in_ch
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    xp[:, :, padding : padding + h, padding : padding + w] = x
    out = np.zeros((n, out_ch, oh, ow), dtype=np.float64)
    for b_i in range(n):
        for o in range(out_ch):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(in_ch):
                        for u in range(kh):
                            for v in range(kw):
                                acc += (
                                    xp[b_i, ci, i * stride + u, j * stride + v]
                                    * weight[o, ci, u, v]
                                )
                    if bias is not None:
                        acc += bias[o]
                    out[b_i, o, i, j] = acc
    return out


def deconv2d_naive(x, weight, bias=None, stride=2, padding=1):
    """Scatter-style transposed convolution. weight: (in_ch, out_ch, kh, kw)."""
    n, c, h, w = x.shape
    in_ch, out_ch, kh, kw = weight.shape
    assert c == in_ch
    oh = (h - 1) * stride - 2 * padding + kh
    ow = (w - 1) * stride - 2 * padding + kw
    out = np.zeros((n, out_ch, oh, ow), dtype=np.float64)
    for b_i in range(n):
        for ci in range(in_ch):
            for i in range(h):
                for j in range(w):
                    for o in range(out_ch):
                        for u in range(kh):
                            for v in range(kw):
                                p = i * stride - padding + u
                                q = j * stride - padding + v
                                if 0 <= p < oh and 0 <= q < ow:
                                    out[b_i, o, p, q] += (
                                        x[b_i, ci, i, j] * weight[ci, o, u, v]
                                    )
    if bias is not None:
        out += bias[None, :, None, None]
    return out


def maxpool2d_naive(x, window, stride):
    """Window maximum; gradient mask routes to the first max in scan order."""
    n, c, h, w = x.shape
    oh = h // stride
    ow = w // stride
    out = np.zeros((n, c, oh, ow), dtype=np.float64)
    for b_i in range(n):
        for ci in range(c):
            for i in range(oh):
                for j in range(ow):
                    patch = x[
                        b_i,
                        ci,
                        i * stride : i * stride + window,
                        j * stride : j * stride + window,
                    ]
                    out[b_i, ci, i, j] = patch.max()
    return out
