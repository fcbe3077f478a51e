"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic      4 bytes  b"STCK"
    version    u8
    count      u32      number of array entries
    entries    count x {
                 name_len u16, name utf-8,
                 dtype    u8   (0=f32, 1=f64, 2=i64, 3=u8),
                 ndim     u8,  dims u32 x ndim,
                 data     raw little-endian values, row-major }
    meta_len   u32
    meta       utf-8 JSON object (configs, step counters, grid hash)
    crc32      u32      over every preceding byte
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from collections import OrderedDict
from typing import Dict, Tuple

import numpy as np

MAGIC = b"STCK"
FORMAT_VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_CODES = {np.dtype(v).newbyteorder("="): k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def _code(arr: np.ndarray) -> int:
    dt = arr.dtype.newbyteorder("=")
    if dt not in _CODES:
        raise CheckpointError(f"unsupported dtype {arr.dtype}")
    return _CODES[dt]


def encode(arrays: Dict[str, np.ndarray], meta: dict) -> bytes:
    parts = [MAGIC, struct.pack("<BI", FORMAT_VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _code(arr)
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)) + blob)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(buf: bytes) -> Tuple["OrderedDict[str, np.ndarray]", dict]:
    if len(buf) < 13 or buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version = buf[4]
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch (corrupt or truncated)")
    (count,) = struct.unpack_from("<I", buf, 5)
    pos = 9
    arrays = OrderedDict()
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            code, ndim = struct.unpack_from("<BB", buf, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos)
            arrays[name] = arr.reshape(shape).astype(dt.newbyteorder("="))
            pos += nbytes
        (mlen,) = struct.unpack_from("<I", buf, pos)
        meta = json.loads(buf[pos + 4:pos + 4 + mlen].decode("utf-8"))
    except (struct.error, KeyError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    return arrays, meta


def save(path: str, arrays: Dict[str, np.ndarray], meta: dict) -> None:
    """Write atomically so a crash never leaves a half-written checkpoint."""
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode(arrays, meta))
    os.replace(tmp, path)


def load(path: str) -> Tuple["OrderedDict[str, np.ndarray]", dict]:
    with open(path, "rb") as fh:
        return decode(fh.read())
