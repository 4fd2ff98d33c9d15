"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic    8 bytes  b"CSASRCKP"
    version  u32
    step     u64      optimizer step count
    meta     u32 length + UTF-8 JSON (model config etc.)
    count    u32
    entries  count x { u16 name length, name, u8 dtype code, u8 ndim,
                       ndim x u64 dims, raw little-endian values }
"""

import json
import struct

import numpy as np

from ..errors import FormatError

MAGIC = b"CSASRCKP"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


def save_checkpoint(path, tensors, step=0, meta=None):
    """Write ``tensors`` (name -> ndarray) with the optimizer ``step``."""
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [
        MAGIC,
        struct.pack("<IQI", VERSION, int(step), len(meta_bytes)),
        meta_bytes,
        struct.pack("<I", len(tensors)),
    ]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", _CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path):
    """Return ``(tensors, step, meta)``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError("truncated checkpoint", pos)
        out = buf[pos : pos + n]
        pos += n
        return out

    if take(8) != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)", 0)
    version, step, meta_len = struct.unpack("<IQI", take(16))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 8)
    meta = json.loads(take(meta_len).decode())
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        at = pos
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise FormatError(f"{name}: unknown dtype code {code}", at)
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        dt = _DTYPES[code]
        n = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(dims)
        tensors[name] = arr.astype(dt.newbyteorder("="))
    if pos != len(buf):
        raise FormatError("trailing bytes after last entry", pos)
    return tensors, step, meta
