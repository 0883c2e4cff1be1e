"""Little-endian binary packing helpers shared by the artifact file formats."""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError


class Writer:
    """Accumulates little-endian fields into a bytes payload."""

    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def magic(self, tag: bytes) -> None:
        assert len(tag) == 4
        self._parts.append(tag)

    def u32(self, v: int) -> None:
        self._parts.append(struct.pack("<I", v))

    def u64(self, v: int) -> None:
        self._parts.append(struct.pack("<Q", v))

    def f64(self, v: float) -> None:
        self._parts.append(struct.pack("<d", v))

    def array(self, a: np.ndarray, dtype: str) -> None:
        """Append a raw array; dtype is an explicit little-endian numpy dtype string."""
        self._parts.append(np.ascontiguousarray(a).astype(dtype, copy=False).tobytes())

    def blob(self, b: bytes) -> None:
        self._parts.append(struct.pack("<I", len(b)))
        self._parts.append(b)

    def raw(self, b: bytes) -> None:
        self._parts.append(b)

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    """Sequential reader over a bytes buffer; failures carry the byte offset."""

    def __init__(self, buf: bytes, offset: int = 0, name: str = "artifact"):
        self.buf = buf
        self.offset = offset
        self.name = name

    def _take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.buf):
            raise FormatError(f"{self.name}: truncated while reading {what}", self.offset)
        out = self.buf[self.offset : self.offset + n]
        self.offset += n
        return out

    def expect_magic(self, tag: bytes) -> None:
        at = self.offset
        got = self._take(4, "magic bytes")
        if got != tag:
            raise FormatError(f"{self.name}: bad magic {got!r}, expected {tag!r}", at)

    def u32(self, what: str = "u32 field") -> int:
        return struct.unpack("<I", self._take(4, what))[0]

    def u64(self, what: str = "u64 field") -> int:
        return struct.unpack("<Q", self._take(8, what))[0]

    def f64(self, what: str = "f64 field") -> float:
        return struct.unpack("<d", self._take(8, what))[0]

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        nbytes = np.dtype(dtype).itemsize * count
        raw = self._take(nbytes, what)
        return np.frombuffer(raw, dtype=dtype, count=count).copy()

    def blob(self, what: str = "blob") -> bytes:
        n = self.u32(f"{what} length")
        return self._take(n, what)

    @property
    def remaining(self) -> int:
        return len(self.buf) - self.offset

    def expect_end(self) -> None:
        if self.remaining:
            raise FormatError(f"{self.name}: {self.remaining} trailing bytes", self.offset)
