"""Versioned binary checkpoints with bit-exact round-trips.

Layout (all integers little-endian):

    magic   8 bytes  b"LCNMTCKP"
    version u32      currently 1
    header  u64 length + UTF-8 JSON: {"config": {...}, "extras": {...},
            "train_state": {...}|null, "has_moments": bool,
            "param_names": [...], "dtype": "float32"|"float64"}
    then, for each name in param_names, in order:
        ndim u8, dims u32 each, raw little-endian element bytes
    if has_moments, for each name in order: the Adam m then v arrays,
        same shape/dtype raw encoding (no per-array shape repeated).

Raw bytes come from / go to numpy arrays directly, so save -> load is
bit-exact. Loading a file with a different version number fails with an
explicit error rather than guessing.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"LCNMTCKP"
VERSION = 1

_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def _write_array(fh, arr, dtype):
    fh.write(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _read_array(fh, dtype):
    (ndim,) = struct.unpack("<B", fh.read(1))
    shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    buf = fh.read(count * dtype.itemsize)
    if len(buf) != count * dtype.itemsize:
        raise CheckpointError("truncated checkpoint file")
    return np.frombuffer(buf, dtype=dtype).reshape(shape).copy()


def save_checkpoint(path, config, param_arrays, moments=None, train_state=None,
                    extras=None):
    """param_arrays: ordered {name: ndarray}; moments: {name: (m, v)} or None."""
    dtype_name = next(iter(param_arrays.values())).dtype.name
    if dtype_name not in _DTYPES:
        raise CheckpointError(f"unsupported parameter dtype {dtype_name}")
    dtype = _DTYPES[dtype_name]
    header = {
        "config": config.to_dict() if hasattr(config, "to_dict") else dict(config),
        "extras": extras or {},
        "train_state": train_state,
        "has_moments": moments is not None,
        "param_names": list(param_arrays),
        "dtype": dtype_name,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in header["param_names"]:
            _write_array(fh, param_arrays[name], dtype)
        if moments is not None:
            for name in header["param_names"]:
                m, v = moments[name]
                _write_array(fh, m, dtype)
                _write_array(fh, v, dtype)


def load_checkpoint(path):
    """Returns dict with config (raw dict), params, moments, train_state, extras."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise CheckpointError(
                f"{path}: checkpoint version {version} != supported version {VERSION}")
        (blob_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(blob_len).decode("utf-8"))
        dtype = _DTYPES[header["dtype"]]
        params = {name: _read_array(fh, dtype) for name in header["param_names"]}
        moments = None
        if header["has_moments"]:
            moments = {}
            for name in header["param_names"]:
                m = _read_array(fh, dtype)
                v = _read_array(fh, dtype)
                moments[name] = (m, v)
    return {
        "config": header["config"],
        "params": params,
        "moments": moments,
        "train_state": header["train_state"],
        "extras": header["extras"],
    }
