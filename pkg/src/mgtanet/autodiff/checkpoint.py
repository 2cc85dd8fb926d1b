"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"MGTA"  u32 version
    repeated until EOF:
        u32 name_len, name (UTF-8), u8 dtype tag, u32 rank, rank x u64 dims,
        raw little-endian values

Dtype tags: 0 = float64, 1 = float32, 2 = uint8 (used for metadata blobs).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import DataError

MAGIC = b"MGTA"
VERSION = 1
META_KEY = "__meta__"

_TAGS = {np.dtype("<f8"): 0, np.dtype("<f4"): 1, np.dtype("u1"): 2}
_DTYPES = {v: k for k, v in _TAGS.items()}


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    items = list(arrays.items())
    if meta is not None:
        blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        items.append((META_KEY, np.frombuffer(blob, dtype=np.uint8)))
    for name, arr in items:
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if np.dtype(dt) not in _TAGS:
            raise DataError(f"cannot serialise dtype {arr.dtype} for {name!r}")
        arr = np.asarray(arr, dtype=dt, order="C")  # keeps rank 0, unlike ascontiguousarray
        enc = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(enc)))
        chunks.append(enc)
        chunks.append(struct.pack("<BI", _TAGS[np.dtype(dt)], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    path.write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict | None]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if buf[:4] != MAGIC:
        raise DataError(f"{path} is not an MGTA checkpoint")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    arrays: dict[str, np.ndarray] = {}
    meta = None
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            tag, rank = struct.unpack_from("<BI", buf, pos)
            pos += 5
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            dt = _DTYPES[tag]
            count = int(np.prod(dims))
            nbytes = count * dt.itemsize
            if pos + nbytes > len(buf):
                raise DataError(f"{path}: truncated record {name!r}")
            arr = np.frombuffer(buf, dtype=dt, count=count, offset=pos).reshape(dims).copy()
            pos += nbytes
            if name == META_KEY:
                meta = json.loads(arr.tobytes().decode("utf-8"))
            else:
                arrays[name] = arr
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: corrupt checkpoint ({exc})") from exc
    return arrays, meta
