"""Pure-NumPy implementations of the hot kernels.

Every function here mirrors a routine in the compiled extension
(`_hot.pyx`). All array arguments are 2-D C-contiguous float32/float64
(rows = folded leading dimensions); `scatter_add_rows` additionally takes
a 1-D int64 index vector. Each backend is internally deterministic; the
two backends agree to floating-point tolerance, not bit-for-bit.
"""

import numpy as np

NAME = "numpy"


def softmax_fwd(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    e /= e.sum(axis=1, keepdims=True)
    return e


def softmax_bwd(y, dy):
    s = (dy * y).sum(axis=1, keepdims=True)
    return y * (dy - s)


def log_softmax_fwd(x):
    m = x.max(axis=1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    return z - lse


def log_softmax_bwd(logp, dy):
    return dy - np.exp(logp) * dy.sum(axis=1, keepdims=True)


def layer_norm_fwd(x, eps):
    mu = x.mean(axis=1, keepdims=True)
    d = x - mu
    var = (d * d).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = d * rstd[:, None]
    return xhat.astype(x.dtype, copy=False), rstd.astype(x.dtype, copy=False)


def layer_norm_bwd(xhat, rstd, dy):
    m1 = dy.mean(axis=1, keepdims=True)
    m2 = (dy * xhat).mean(axis=1, keepdims=True)
    return (dy - m1 - xhat * m2) * rstd[:, None]


def scatter_add_rows(out, ids, grads):
    np.add.at(out, ids, grads)
