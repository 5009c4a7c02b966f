"""GBSU parameter checkpoint files.

Layout (all little-endian)::

    b"GBSU"  u16 version
    repeated until EOF:
        u16 name_len, name (utf-8), u8 rank, rank * u32 dims, float32 payload
"""

from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

from docdewarp.errors import DataIntegrityError

MAGIC = b"GBSU"
VERSION = 1


def save_params(path: str | os.PathLike, params: Mapping[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<H", VERSION)]
    for name, arr in params.items():
        arr = np.require(arr, dtype="<f4", requirements="C")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def load_params(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise DataIntegrityError(f"{path}: not a GBSU checkpoint (bad magic)")
    if len(buf) < 6:
        raise DataIntegrityError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != VERSION:
        raise DataIntegrityError(f"{path}: unsupported checkpoint version {version}")
    pos = 6
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            end = pos + 4 * count
            if end > len(buf):
                raise DataIntegrityError(f"{path}: truncated payload for {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims).copy()
            pos = end
    except struct.error as exc:
        raise DataIntegrityError(f"{path}: truncated record ({exc})") from exc
    return out
