"""Channels-last conv / dense primitives with explicit backward passes.

Tensors are ``(N, H, W, C)``; conv weights are ``(kh, kw, C_in, C_out)``.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """(N, Ho, Wo, kh, kw, C) patches, copied contiguous."""
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


def conv2d(x, weight, bias, stride=1, pad=0):
    kh, kw, cin, cout = weight.shape
    cols = im2col(x, kh, kw, stride, pad)
    n, ho, wo = cols.shape[:3]
    out = cols.reshape(n * ho * wo, -1) @ weight.reshape(-1, cout) + bias
    return out.reshape(n, ho, wo, cout), cols


def conv2d_backward(dout, cols, x_shape, weight, stride=1, pad=0, need_dx=True):
    kh, kw, cin, cout = weight.shape
    n, ho, wo = dout.shape[:3]
    d2 = dout.reshape(-1, cout)
    dw = (cols.reshape(d2.shape[0], -1).T @ d2).reshape(weight.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ weight.reshape(-1, cout).T).reshape(n, ho, wo, kh, kw, cin)
    hp, wp = x_shape[1] + 2 * pad, x_shape[2] + 2 * pad
    dxp = np.zeros((n, hp, wp, cin))
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
    if pad:
        dxp = dxp[:, pad:hp - pad, pad:wp - pad, :]
    return dxp, dw, db


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(dout, out):
    return dout * (out > 0)


def l2_normalize(f: np.ndarray, axis: int = -1):
    """Unit-normalize along ``axis``; zero vectors stay zero. Returns (out, norms)."""
    norm = np.sqrt(np.sum(f * f, axis=axis, keepdims=True))
    out = np.divide(f, norm, out=np.zeros_like(f), where=norm > 0)
    return out, norm


def l2_normalize_backward(dout, out, norm, axis: int = -1):
    proj = np.sum(out * dout, axis=axis, keepdims=True)
    return np.divide(dout - out * proj, norm, out=np.zeros_like(dout), where=norm > 0)
