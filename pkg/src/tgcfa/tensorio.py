"""Binary tensor container (``TGTS``).

Layout, all little-endian::

    4s   magic  b"TGTS"
    u32  version (1)
    u8   dtype code (0 = float32, 1 = uint8)
    u32  rank
    u32  dims[rank]
    ...  payload, C order

The payload is written byte-for-byte from a contiguous array, so a
round trip is bit exact on every platform.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"TGTS"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_CODES = {np.dtype("float32"): 0, np.dtype("uint8"): 1}

# Every read goes through this hook so callers (tests, the training loop)
# can audit which files were opened.
_read_observers: list = []


def add_read_observer(fn) -> None:
    _read_observers.append(fn)


def remove_read_observer(fn) -> None:
    _read_observers.remove(fn)


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    code = _CODES.get(array.dtype)
    if code is None:
        raise FormatError(f"unsupported dtype {array.dtype}; expected float32 or uint8")
    header = struct.pack("<4sIBI", MAGIC, VERSION, code, array.ndim)
    dims = struct.pack(f"<{array.ndim}I", *array.shape)
    payload = np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes()
    return header + dims + payload


def decode_tensor(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    head = struct.calcsize("<4sIBI")
    if len(blob) < head:
        raise FormatError(f"{source}: truncated header")
    magic, version, code, rank = struct.unpack_from("<4sIBI", blob, 0)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported version {version}")
    if code not in _DTYPES:
        raise FormatError(f"{source}: unknown dtype code {code}")
    if len(blob) < head + 4 * rank:
        raise FormatError(f"{source}: truncated dimension header")
    dims = struct.unpack_from(f"<{rank}I", blob, head)
    offset = head + 4 * rank
    dtype = _DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(blob) - offset != expected:
        raise FormatError(f"{source}: payload has {len(blob) - offset} bytes, expected {expected}")
    arr = np.frombuffer(blob, dtype=dtype, offset=offset).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def save_tensor(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(array))


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    for fn in _read_observers:
        fn(path)
    return decode_tensor(path.read_bytes(), source=str(path))
