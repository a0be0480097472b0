"""Flat named-array container with bit-exact round trips.

Layout (all integers little-endian):
    magic "JOVA1" | endianness byte 0x01 | count uint32
    per array: name_len uint16 | name utf-8 | dtype code uint8 |
               rank uint8 | extents rank * uint64 | raw little-endian payload

Dtype codes: 0 = float64, 1 = float32, 2 = uint8, 3 = int64.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"JOVA1"
_LITTLE = 0x01

_DTYPE_CODES = {
    np.dtype("<f8"): 0,
    np.dtype("<f4"): 1,
    np.dtype("u1"): 2,
    np.dtype("<i8"): 3,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(IOError):
    """Malformed or unsupported container contents."""


def save_arrays(path, arrays):
    """Write a name -> ndarray mapping; insertion order is preserved."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", _LITTLE))
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            le = arr.dtype.newbyteorder("<")
            if le not in _DTYPE_CODES:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for '{name}'")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", _DTYPE_CODES[le]))
            fh.write(struct.pack("<B", arr.ndim))
            for extent in arr.shape:
                fh.write(struct.pack("<Q", extent))
            fh.write(arr.astype(le, copy=False).tobytes())


def load_arrays(path):
    """Read a container back into an ordered name -> ndarray dict."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
        (endian,) = struct.unpack("<B", fh.read(1))
        if endian != _LITTLE:
            raise CheckpointError(f"unsupported endianness marker {endian:#x}")
        (count,) = struct.unpack("<I", fh.read(4))
        arrays = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (code,) = struct.unpack("<B", fh.read(1))
            if code not in _CODE_DTYPES:
                raise CheckpointError(f"unknown dtype code {code} for '{name}'")
            (rank,) = struct.unpack("<B", fh.read(1))
            shape = tuple(
                struct.unpack("<Q", fh.read(8))[0] for _ in range(rank)
            )
            dtype = _CODE_DTYPES[code]
            n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            payload = fh.read(n_bytes)
            if len(payload) != n_bytes:
                raise CheckpointError(f"truncated payload for '{name}'")
            arrays[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
        return arrays
