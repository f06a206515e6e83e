"""Binary checkpoint container.

Layout (all integers little-endian):
    b"F4SG" | u32 version | u32 count |
    count x [u32 name_len | name utf-8 | u8 dtype (0 = f32) | u32 ndim | u32 dims[ndim] | payload] |
    u32 CRC32 of everything before it
Entries are written in sorted name order so equal contents give equal bytes.
"""
from __future__ import annotations

import os
import struct
import tempfile
import zlib
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"F4SG"
VERSION = 1
DTYPE_F32 = 0
_DTYPES = {DTYPE_F32: np.dtype("<f4")}


class CheckpointError(ValueError):
    pass


def dumps(state: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name in sorted(state):
        arr = np.asarray(state[name])
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"refusing to save non-finite tensor {name!r}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BI", DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def loads(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) != crc:
        raise CheckpointError("CRC mismatch: checkpoint is corrupted")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    end = len(buf) - 4
    out = OrderedDict()
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + n].decode("utf-8")
            off += n
            tag, ndim = struct.unpack_from("<BI", buf, off)
            off += 5
            if tag not in _DTYPES:
                raise CheckpointError(f"{name}: unknown dtype tag {tag}")
            dims = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            dt = _DTYPES[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if off + nbytes > end:
                raise CheckpointError(f"{name}: payload runs past end of file")
            out[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(dims).astype(np.float64)
            off += nbytes
    except struct.error as e:
        raise CheckpointError(f"truncated checkpoint: {e}") from None
    if off != end:
        raise CheckpointError(f"{end - off} trailing bytes before CRC")
    return out


def save(path, state: dict) -> None:
    """Atomic write (temp file + rename)."""
    path = Path(path)
    data = dumps(state)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".ckpt.", dir=path.parent)
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
    os.chmod(tmp, 0o644)   # mkstemp creates 0600
    os.replace(tmp, path)


def load(path) -> "OrderedDict[str, np.ndarray]":
    return loads(Path(path).read_bytes())


def prefixed(prefix: str, state: dict) -> dict:
    return {f"{prefix}.{k}": v for k, v in state.items()}


def section(state: dict, prefix: str) -> dict:
    p = prefix + "."
    return OrderedDict((k[len(p):], v) for k, v in state.items() if k.startswith(p))
