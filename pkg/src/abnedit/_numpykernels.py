"""Pure-numpy convolution kernels (im2col + GEMM).

Fallback backend used when the compiled extension is unavailable; both
backends implement the same three entry points with identical semantics
(cross-correlation, zero padding).
"""

import numpy as np


def _out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _im2col(x, kh, kw, stride, pad):
    """Unfold x[N,C,H,W] into columns [N*Ho*Wo, C*kh*kw]."""
    n, c, h, w = x.shape
    ho = _out_size(h, kh, stride, pad)
    wo = _out_size(w, kw, stride, pad)
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    sn, sc, sh, sw = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return np.ascontiguousarray(windows.transpose(0, 4, 5, 1, 2, 3)).reshape(
        n * ho * wo, c * kh * kw
    )


def conv2d_forward(x, w, stride, pad):
    n, _, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho = _out_size(h, kh, stride, pad)
    wo = _out_size(wd, kw, stride, pad)
    cols = _im2col(x, kh, kw, stride, pad)
    out = cols @ w.reshape(f, -1).T
    return out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2).copy()


def conv2d_backward_weight(gy, x, kh, kw, stride, pad):
    n, f, ho, wo = gy.shape
    cols = _im2col(x, kh, kw, stride, pad)
    gy_mat = gy.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
    gw = gy_mat.T @ cols
    return gw.reshape(f, x.shape[1], kh, kw)


def conv2d_backward_input(gy, w, h, wd, stride, pad):
    n, f, ho, wo = gy.shape
    _, c, kh, kw = w.shape
    gy_mat = gy.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
    gcols = gy_mat @ w.reshape(f, -1)
    gcols = gcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    gx = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=gy.dtype)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                gcols[:, :, i, j]
            )
    if pad > 0:
        gx = gx[:, :, pad : pad + h, pad : pad + wd]
    return np.ascontiguousarray(gx)
