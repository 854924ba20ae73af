"""Compiled loops for convolution and max pooling on (C, N, H, W) arrays.

Every reduction runs in a fixed order, so results are bit-reproducible on a
single thread.  Inner loops walk one output row with unit stride so they
vectorize without reassociating sums.
"""

from __future__ import annotations

import numba
import numpy as np

_jit = numba.njit(cache=True, nogil=True)


@_jit
def conv_forward(x, w, b, out):
    """Stride-1 valid convolution, looping directly (cheap when C*K*K is small)."""
    C, N = x.shape[0], x.shape[1]
    F, K = w.shape[0], w.shape[2]
    Ho, Wo = out.shape[2], out.shape[3]
    for n in range(N):
        for f in range(F):
            for y in range(Ho):
                for z in range(Wo):
                    out[f, n, y, z] = b[f]
                for c in range(C):
                    for i in range(K):
                        for j in range(K):
                            wv = w[f, c, i, j]
                            for z in range(Wo):
                                out[f, n, y, z] += wv * x[c, n, y + i, z + j]


@_jit
def conv_backward(x, w, dout, dw, db, dx, need_dx):
    """Stride-1 gradients: dw, db, and dx when need_dx."""
    C, N = x.shape[0], x.shape[1]
    F, K = w.shape[0], w.shape[2]
    Ho, Wo = dout.shape[2], dout.shape[3]
    acc = np.zeros((F, C, K, K, Wo), dtype=dw.dtype)
    bacc = np.zeros((F, Wo), dtype=db.dtype)
    for n in range(N):
        for y in range(Ho):
            for f in range(F):
                for z in range(Wo):
                    bacc[f, z] += dout[f, n, y, z]
                for c in range(C):
                    for i in range(K):
                        for j in range(K):
                            for z in range(Wo):
                                acc[f, c, i, j, z] += dout[f, n, y, z] * x[c, n, y + i, z + j]
                            if need_dx:
                                wv = w[f, c, i, j]
                                for z in range(Wo):
                                    dx[c, n, y + i, z + j] += wv * dout[f, n, y, z]
    for f in range(F):
        total = bacc[f, 0]
        for z in range(1, Wo):
            total += bacc[f, z]
        db[f] = total
        for c in range(C):
            for i in range(K):
                for j in range(K):
                    total = acc[f, c, i, j, 0]
                    for z in range(1, Wo):
                        total += acc[f, c, i, j, z]
                    dw[f, c, i, j] = total


@_jit
def maxpool_forward(x, size, s, out, arg):
    """Window maxima; ``arg`` holds the winning tap index, first one on ties."""
    C, N = x.shape[0], x.shape[1]
    Ho, Wo = out.shape[2], out.shape[3]
    for c in range(C):
        for n in range(N):
            for y in range(Ho):
                for z in range(Wo):
                    best = x[c, n, y * s, z * s]
                    bt = 0
                    for t in range(1, size * size):
                        v = x[c, n, y * s + t // size, z * s + t % size]
                        if v > best:
                            best = v
                            bt = t
                    out[c, n, y, z] = best
                    arg[c, n, y, z] = bt


@_jit
def maxpool_backward(dout, arg, size, s, dx):
    C, N = dout.shape[0], dout.shape[1]
    Ho, Wo = dout.shape[2], dout.shape[3]
    for c in range(C):
        for n in range(N):
            for y in range(Ho):
                for z in range(Wo):
                    t = arg[c, n, y, z]
                    dx[c, n, y * s + t // size, z * s + t % size] += dout[c, n, y, z]
