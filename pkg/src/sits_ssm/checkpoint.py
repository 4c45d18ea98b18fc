"""Flat named-array checkpoint container.

Layout (all integers u64 little endian):

    magic "SITSMB01"
    per entry, until EOF:
        u64           name length in bytes
        bytes         UTF-8 name
        u64           rank
        u64[rank]     extents
        f32[prod]     payload, little endian

Values are always stored as float32 regardless of the in-memory dtype.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"SITSMB01"


class CheckpointFormatError(ValueError):
    pass


def save_checkpoint(arrays: dict[str, np.ndarray], path):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<Q", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if _read_exact(fh, len(MAGIC), "magic") != MAGIC:
            raise CheckpointFormatError(f"bad magic, expected {MAGIC!r}")
        while True:
            head = fh.read(8)
            if not head:
                break
            if len(head) != 8:
                raise CheckpointFormatError("truncated entry header")
            (name_len,) = struct.unpack("<Q", head)
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<Q", _read_exact(fh, 8, "rank"))
            shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, "extents")) if rank else ()
            n_elem = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(_read_exact(fh, 4 * n_elem, f"payload of {name}"),
                                 dtype="<f4").reshape(shape).copy()
            out[name] = data
    return out
