"""Hot-kernel dispatch: compiled extension when available, NumPy otherwise.

The backend is chosen once at import time. Set ``LCNMT_KERNELS=numpy`` or
``LCNMT_KERNELS=compiled`` to force a backend (forcing ``compiled`` when
the extension is not built raises). Tests and the benchmark script can
switch at runtime via :func:`set_backend`.

All dispatch functions accept arrays with any number of leading
dimensions; the last axis is the normalized/feature axis. Dtypes float32
and float64 are supported.
"""

import os

import numpy as np

from . import _numpy as _numpy_backend

try:
    from . import _hot as _compiled_backend
except ImportError:  # pragma: no cover - source checkout without build
    _compiled_backend = None

_BACKENDS = {"numpy": _numpy_backend}
if _compiled_backend is not None:
    _BACKENDS["compiled"] = _compiled_backend


def _initial_backend():
    requested = os.environ.get("LCNMT_KERNELS", "").strip().lower()
    if requested:
        if requested not in ("numpy", "compiled"):
            raise ValueError(f"LCNMT_KERNELS must be 'numpy' or 'compiled', got {requested!r}")
        if requested == "compiled" and _compiled_backend is None:
            raise ImportError("LCNMT_KERNELS=compiled but the extension is not built")
        return requested
    return "compiled" if _compiled_backend is not None else "numpy"


_active = _BACKENDS[_initial_backend()]


def get_backend():
    return _active.NAME


def available_backends():
    return tuple(sorted(_BACKENDS))


def set_backend(name):
    """Switch the active backend; returns the previous backend name."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; available: {available_backends()}")
    previous = _active.NAME
    _active = _BACKENDS[name]
    return previous


def _fold(x):
    x = np.ascontiguousarray(x)
    return x.reshape(-1, x.shape[-1]), x.shape


def softmax_fwd(x):
    x2, shape = _fold(x)
    if _active is _numpy_backend:
        return _numpy_backend.softmax_fwd(x2).reshape(shape)
    out = np.empty_like(x2)
    _active.softmax_fwd(x2, out)
    return out.reshape(shape)


def softmax_bwd(y, dy):
    y2, shape = _fold(y)
    dy2, _ = _fold(dy)
    if _active is _numpy_backend:
        return _numpy_backend.softmax_bwd(y2, dy2).reshape(shape)
    out = np.empty_like(y2)
    _active.softmax_bwd(y2, dy2, out)
    return out.reshape(shape)


def log_softmax_fwd(x):
    x2, shape = _fold(x)
    if _active is _numpy_backend:
        return _numpy_backend.log_softmax_fwd(x2).reshape(shape)
    out = np.empty_like(x2)
    _active.log_softmax_fwd(x2, out)
    return out.reshape(shape)


def log_softmax_bwd(logp, dy):
    lp2, shape = _fold(logp)
    dy2, _ = _fold(dy)
    if _active is _numpy_backend:
        return _numpy_backend.log_softmax_bwd(lp2, dy2).reshape(shape)
    out = np.empty_like(lp2)
    _active.log_softmax_bwd(lp2, dy2, out)
    return out.reshape(shape)


def layer_norm_fwd(x, eps):
    """Returns (xhat, rstd): the normalized rows and 1/sqrt(var+eps) per row."""
    x2, shape = _fold(x)
    if _active is _numpy_backend:
        xhat, rstd = _numpy_backend.layer_norm_fwd(x2, eps)
    else:
        xhat = np.empty_like(x2)
        rstd = np.empty(x2.shape[0], dtype=x2.dtype)
        _active.layer_norm_fwd(x2, xhat, rstd, eps)
    return xhat.reshape(shape), rstd.reshape(shape[:-1])


def layer_norm_bwd(xhat, rstd, dy):
    xh2, shape = _fold(xhat)
    dy2, _ = _fold(dy)
    r1 = np.ascontiguousarray(rstd).reshape(-1)
    if _active is _numpy_backend:
        return _numpy_backend.layer_norm_bwd(xh2, r1, dy2).reshape(shape)
    out = np.empty_like(xh2)
    _active.layer_norm_bwd(xh2, r1, dy2, out)
    return out.reshape(shape)


def scatter_add_rows(out, ids, grads):
    """out[ids[i], :] += grads[i, :] (repeated ids accumulate)."""
    grads2 = np.ascontiguousarray(grads).reshape(-1, out.shape[-1])
    ids1 = np.ascontiguousarray(ids, dtype=np.int64).reshape(-1)
    _active.scatter_add_rows(out, ids1, grads2)
