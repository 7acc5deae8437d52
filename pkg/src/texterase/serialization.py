"""Versioned binary container of named arrays plus JSON metadata.

Layout (all integers little-endian):

    magic   8 bytes  b"TENSBOX1"
    version u32
    meta    u64 length + UTF-8 JSON
    count   u32
    then per entry:
        name   u16 length + UTF-8 bytes
        dtype  u8 length + ASCII numpy dtype string (little-endian, e.g. "<f4")
        ndim   u8, then ndim u64 dims
        data   raw C-order bytes

Byte-stable: identical content serializes to identical bytes.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

MAGIC = b"TENSBOX1"
VERSION = 1


class ContainerError(ValueError):
    pass


def _le(dtype: np.dtype) -> np.dtype:
    return dtype.newbyteorder("<") if dtype.byteorder == ">" else dtype


def dump_arrays(arrays: dict, meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    buf.write(struct.pack("<Q", len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        arr = arr.astype(_le(arr.dtype), copy=False)
        name_b = name.encode()
        dtype_b = arr.dtype.str.encode()
        buf.write(struct.pack("<H", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<B", len(dtype_b)))
        buf.write(dtype_b)
        buf.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<Q", dim))
        buf.write(arr.tobytes())
    return buf.getvalue()


def load_arrays(data: bytes):
    """Returns (arrays dict, meta dict). Raises ContainerError on corruption."""
    buf = io.BytesIO(data)

    def read(n, what):
        b = buf.read(n)
        if len(b) != n:
            raise ContainerError(f"truncated container while reading {what}")
        return b

    if read(8, "magic") != MAGIC:
        raise ContainerError("bad magic: not a tensor container")
    (version,) = struct.unpack("<I", read(4, "version"))
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    (meta_len,) = struct.unpack("<Q", read(8, "meta length"))
    meta = json.loads(read(meta_len, "meta").decode())
    (count,) = struct.unpack("<I", read(4, "count"))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", read(2, "name length"))
        name = read(nlen, "name").decode()
        (dlen,) = struct.unpack("<B", read(1, "dtype length"))
        dtype = np.dtype(read(dlen, "dtype").decode())
        (ndim,) = struct.unpack("<B", read(1, "ndim"))
        shape = tuple(struct.unpack("<Q", read(8, "dim"))[0] for _ in range(ndim))
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arrays[name] = np.frombuffer(read(nbytes, f"data of {name}"),
                                     dtype=dtype).reshape(shape).copy()
    if buf.read(1):
        raise ContainerError("trailing bytes after last tensor")
    return arrays, meta


def save_file(path, arrays: dict, meta: dict | None = None) -> None:
    with open(path, "wb") as f:
        f.write(dump_arrays(arrays, meta))


def load_file(path):
    with open(path, "rb") as f:
        return load_arrays(f.read())
