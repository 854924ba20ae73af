"""Forward and backward kernels.

Spatial activations are kept channel-major, shape (C, N, H, W): a convolution
over many input taps is then one matrix product whose result already has the
next layer's layout.  Thin convolutions (few taps) run as direct loops.
"""

from __future__ import annotations

import numpy as np

from . import kernels as K


def _out_size(h, w, k, s):
    return (h - k) // s + 1, (w - k) // s + 1


# Below this many taps per output (C*K*K) a direct loop beats building columns.
DIRECT_TAPS = 32


def _direct(x, w, stride):
    return stride == 1 and x.shape[0] * w.shape[2] * w.shape[3] <= DIRECT_TAPS


def _im2col(x, k, stride, ho, wo):
    c, n = x.shape[:2]
    cols = np.empty((c, k, k, n, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * k * k, n * ho * wo)


def _col2im(dcols, x_shape, k, stride, ho, wo):
    c, n, h, wd = x_shape
    dcols = dcols.reshape(c, k, k, n, ho, wo)
    dx = np.zeros(x_shape, dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
    return dx


def conv_forward(x, w, b, stride):
    c, n, h, wd = x.shape
    f, k = w.shape[0], w.shape[2]
    ho, wo = _out_size(h, wd, k, stride)
    if _direct(x, w, stride):
        out = np.empty((f, n, ho, wo), dtype=x.dtype)
        K.conv_forward(x, w, b, out)
        return out, (x, None, stride)
    cols = _im2col(x, k, stride, ho, wo)
    out = w.reshape(f, -1) @ cols
    out += b[:, None]
    return out.reshape(f, n, ho, wo), (x.shape, cols, stride)


def conv_backward(dout, cache, w, need_dx=True):
    xs, cols, stride = cache
    f, k = w.shape[0], w.shape[2]
    dout = np.ascontiguousarray(dout)
    if cols is None:
        x = xs
        dw = np.empty_like(w)
        db = np.empty(f, dtype=w.dtype)
        dx = np.zeros_like(x) if need_dx else np.zeros((1, 1, 1, 1), dtype=x.dtype)
        K.conv_backward(x, w, dout, dw, db, dx, need_dx)
        return (dx if need_dx else None), dw, db
    _, _, ho, wo = dout.shape
    dflat = dout.reshape(f, -1)
    dw = (dflat @ cols.T).reshape(w.shape)
    db = dflat.sum(axis=1)
    dx = _col2im(w.reshape(f, -1).T @ dflat, xs, k, stride, ho, wo) if need_dx else None
    return dx, dw, db


def maxpool_forward(x, size, stride):
    """Max over each window; the cache records the winning tap (first on ties)."""
    c, n, h, wd = x.shape
    ho, wo = _out_size(h, wd, size, stride)
    out = np.empty((c, n, ho, wo), dtype=x.dtype)
    arg = np.empty((c, n, ho, wo), dtype=np.int16)
    K.maxpool_forward(x, size, stride, out, arg)
    return out, (arg, x.shape, size, stride)


def maxpool_backward(dout, cache):
    """Route each output gradient to the single input that won its window."""
    arg, x_shape, size, stride = cache
    dx = np.zeros(x_shape, dtype=dout.dtype)
    K.maxpool_backward(np.ascontiguousarray(dout), arg, size, stride, dx)
    return dx


def relu_forward(x):
    mask = x > 0
    return np.maximum(x, x.dtype.type(0)), mask


def relu_backward(dout, mask):
    return dout * mask


def dropout_forward(x, p, rng):
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return x * keep, keep


def flatten(x):
    """(C, N, H, W) -> (N, C*H*W) in per-sample C, H, W order; 2-d input passes through."""
    if x.ndim == 2:
        return x
    return x.transpose(1, 0, 2, 3).reshape(x.shape[1], -1)


def unflatten(d, shape):
    if len(shape) == 2:
        return d
    c, n, h, w = shape
    return d.reshape(n, c, h, w).transpose(1, 0, 2, 3)


def fc_forward(x, w, b):
    flat = flatten(x)
    return flat @ w.T + b, (flat, x.shape)


def fc_backward(dout, cache, w):
    flat, x_shape = cache
    dw = dout.T @ flat
    db = dout.sum(axis=0)
    dx = unflatten(dout @ w, x_shape)
    return dx, dw, db


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(probs, labels) -> float:
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(picked, np.finfo(probs.dtype).tiny))))
