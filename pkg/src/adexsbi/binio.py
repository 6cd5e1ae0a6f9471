"""Small helpers shared by the binary file formats."""

import hashlib

import numpy as np

from .errors import TruncatedPayloadError

DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i8"): 2,
    np.dtype("<u2"): 3,
    np.dtype("<u1"): 4,
    np.dtype("<i4"): 5,
}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


def checksum64(*chunks: bytes | memoryview) -> int:
    h = hashlib.blake2b(digest_size=8)
    for c in chunks:
        h.update(c)
    return int.from_bytes(h.digest(), "little")


class Reader:
    """Cursor over a bytes buffer that raises on short reads."""

    def __init__(self, buf: bytes | memoryview, what: str = "payload"):
        self.buf = memoryview(buf)
        self.pos = 0
        self.what = what

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise TruncatedPayloadError(
                f"truncated {self.what}: needed {n} bytes at offset {self.pos}, "
                f"only {len(self.buf) - self.pos} left")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt) -> tuple:
        import struct
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def array(self, dtype, count: int) -> np.ndarray:
        dtype = np.dtype(dtype)
        return np.frombuffer(self.take(dtype.itemsize * count), dtype=dtype, count=count)
