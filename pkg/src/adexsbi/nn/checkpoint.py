"""Binary checkpoint format for model and optimizer state.

Layout (little-endian)::

    b"ADEXCK1\\0"
    u32 entry count
    per entry: u16 name length, utf-8 name, u8 dtype code, u8 ndim,
               ndim x u64 dims, raw array bytes
    u64 checksum (blake2b-64 of every preceding byte)

Model entries are stored under ``model/`` and optimizer entries under
``optim/``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..binio import CODE_DTYPES, DTYPE_CODES, Reader, checksum64
from ..errors import BadMagicError, ChecksumMismatchError, FormatError

MAGIC = b"ADEXCK1\0"


def _encode(entries: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        if dtype not in DTYPE_CODES:
            raise FormatError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", DTYPE_CODES[dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", checksum64(body))


def save_checkpoint(path: str | Path, state: dict[str, np.ndarray],
                    optimizer: dict[str, np.ndarray] | None = None) -> None:
    entries = {f"model/{k}": v for k, v in state.items()}
    for k, v in (optimizer or {}).items():
        entries[f"optim/{k}"] = v
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(_encode(entries))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {data[:8]!r}")
    if len(data) < 8 + 4 + 8:
        raise FormatError(f"{path}: truncated payload")
    r = Reader(data[:-8], "checkpoint payload")
    r.take(8)
    (count,) = r.unpack("<I")
    entries = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = bytes(r.take(nlen)).decode()
        code, ndim = r.unpack("<BB")
        if code not in CODE_DTYPES:
            raise FormatError(f"{path}: unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}Q")
        arr = r.array(CODE_DTYPES[code], int(np.prod(shape, dtype=np.int64)))
        entries[name] = arr.reshape(shape).copy()
    if r.pos != len(r.buf):
        raise FormatError(f"{path}: trailing bytes before checksum")
    (stored,) = struct.unpack("<Q", data[-8:])
    if stored != checksum64(data[:-8]):
        raise ChecksumMismatchError(f"{path}: checksum mismatch")
    model = {k[6:]: v for k, v in entries.items() if k.startswith("model/")}
    optim = {k[6:]: v for k, v in entries.items() if k.startswith("optim/")}
    return model, optim
