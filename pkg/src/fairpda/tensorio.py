"""Little-endian binary tensor container.

Single tensor record::

    b"FPDA" | u16 format version | u8 dtype code | u8 ndim | u32 dims[ndim] | payload (row-major)

Checkpoint bundle::

    b"FPCK" | u16 format version | u32 header length | JSON header | tensor records...

The JSON header lists tensor names in payload order plus arbitrary metadata
(config echo, step counter, RNG state).
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CacheError

MAGIC = b"FPDA"
BUNDLE_MAGIC = b"FPCK"
# Bump when the DSP chain (resampler kernel, VAD, filterbank) changes.
FORMAT_VERSION = 1

DTYPE_CODES = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("<i8"),
    4: np.dtype("u1"),
    5: np.dtype("<i4"),
}
CODE_FOR_DTYPE = {v: k for k, v in DTYPE_CODES.items()}

_HEAD = struct.Struct("<4sHBB")


def encode_tensor(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    if arr.dtype == np.bool_:
        arr = arr.astype("u1")
    dtype = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
    code = CODE_FOR_DTYPE.get(dtype)
    if code is None:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    arr = np.asarray(arr, dtype=DTYPE_CODES[code])
    header = _HEAD.pack(MAGIC, FORMAT_VERSION, code, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + dims + arr.tobytes(order="C")


def read_tensor(fh) -> np.ndarray:
    raw = fh.read(_HEAD.size)
    if len(raw) != _HEAD.size:
        raise CacheError("truncated tensor header")
    magic, version, code, ndim = _HEAD.unpack(raw)
    if magic != MAGIC:
        raise CacheError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CacheError(f"unsupported format version {version}")
    if code not in DTYPE_CODES:
        raise CacheError(f"unknown dtype code {code}")
    dims = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
    dtype = DTYPE_CODES[code]
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    payload = fh.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise CacheError("truncated tensor payload")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def save_tensor(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(array))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = read_tensor(fh)
        if fh.read(1):
            raise CacheError(f"{path}: trailing bytes after tensor")
    return arr


def save_bundle(path, tensors: dict, meta: dict) -> None:
    names = list(tensors)
    header = json.dumps({"names": names, "meta": meta}, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(struct.pack("<4sHI", BUNDLE_MAGIC, FORMAT_VERSION, len(header)))
    buf.write(header)
    for name in names:
        buf.write(encode_tensor(tensors[name]))
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_bundle(path):
    """Returns ``(tensors, meta)``."""
    with open(path, "rb") as fh:
        raw = fh.read(10)
        if len(raw) != 10:
            raise CacheError(f"{path}: truncated bundle")
        magic, version, hlen = struct.unpack("<4sHI", raw)
        if magic != BUNDLE_MAGIC or version != FORMAT_VERSION:
            raise CacheError(f"{path}: not a checkpoint bundle")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        tensors = {name: read_tensor(fh) for name in header["names"]}
    return tensors, header["meta"]
