"""Numpy reference kernels for same-padded masked 2D convolution.

Layout is channels-last: ``x[B, H, W, C_in]``, ``w[kh, kw, C_in, C_out]``.
Each active tap is one shifted matmul, so cost is ``taps * B*H*W*C_in*C_out``.
"""
import numpy as np


def _taps(mask):
    return [(a, c) for a in range(mask.shape[0]) for c in range(mask.shape[1]) if mask[a, c]]


def conv2d_forward(x, w, b, mask):
    B, H, W, _ = x.shape
    kh, kw, _, co = w.shape
    rh, rw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (rh, rh), (rw, rw), (0, 0)))
    out = np.empty((B, H, W, co))
    out[...] = b
    for a, c in _taps(mask):
        out += xp[:, a : a + H, c : c + W, :] @ w[a, c]
    return out


def conv2d_backward(x, w, mask, g):
    B, H, W, ci = x.shape
    kh, kw, _, co = w.shape
    rh, rw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (rh, rh), (rw, rw), (0, 0)))
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    g2 = g.reshape(-1, co)
    for a, c in _taps(mask):
        xs = xp[:, a : a + H, c : c + W, :].reshape(-1, ci)
        gw[a, c] = xs.T @ g2
        gxp[:, a : a + H, c : c + W, :] += g @ w[a, c].T
    gx = gxp[:, rh : rh + H, rw : rw + W, :].copy()
    gb = g2.sum(axis=0)
    return gx, gw, gb
