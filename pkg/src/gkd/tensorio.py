"""Flat binary tensor files.

Layout of one ``.bin`` file, all little-endian::

    4 bytes   magic  b"GKDT"
    uint32    ndim
    uint32    dims[ndim]
    float32   data, row-major (C order)

Directories of such files are described by a JSON manifest written next to
them; the manifest format is owned by the caller.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import LoadError

MAGIC = b"GKDT"
_DTYPE = np.dtype("<f4")


def write_tensor(path, array) -> None:
    arr = np.ascontiguousarray(np.asarray(array, dtype=_DTYPE))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        if arr.ndim:
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise LoadError(f"{path}: bad magic {raw[:4]!r}")
    (ndim,) = struct.unpack_from("<I", raw, 4)
    offset = 8
    shape = struct.unpack_from(f"<{ndim}I", raw, offset) if ndim else ()
    offset += 4 * ndim
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    body = raw[offset:]
    if len(body) != count * _DTYPE.itemsize:
        raise LoadError(f"{path}: expected {count} floats for shape {shape}, found {len(body) // 4}")
    return np.frombuffer(body, dtype=_DTYPE).reshape(shape).astype(np.float32)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())
