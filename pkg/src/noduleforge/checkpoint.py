"""Flat binary container of named float64 tensors.

Layout (all integers little-endian)::

    b"NFORGE1"
    repeated until EOF:
        uint32 name_len, name (UTF-8)
        uint32 rank, int64 extents[rank]
        float64 values[prod(extents)]   (C order)
"""
from __future__ import annotations

import os
import struct
from collections import OrderedDict
from typing import Dict, Mapping

import numpy as np

MAGIC = b"NFORGE1"


class CheckpointFormatError(ValueError):
    pass


def save_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(np.asarray(arr.shape, dtype="<i8").tobytes())
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_tensors(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if not buf.startswith(MAGIC):
        raise CheckpointFormatError(f"{path}: missing NFORGE1 magic")
    out: Dict[str, np.ndarray] = OrderedDict()
    pos = len(MAGIC)
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = tuple(int(v) for v in np.frombuffer(buf, "<i8", rank, pos))
            pos += 8 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * count > len(buf):
                raise CheckpointFormatError(f"{path}: record {name!r} truncated")
            out[name] = np.frombuffer(buf, "<f8", count, pos).reshape(shape).astype(np.float64)
            pos += 8 * count
    except (struct.error, ValueError) as exc:
        if isinstance(exc, CheckpointFormatError):
            raise
        raise CheckpointFormatError(f"{path}: corrupt record near byte {pos}") from exc
    return out
