"""Canonical binary encoding primitives.

Integers are big-endian, strings and byte fields carry a u16 length prefix,
optional fields a presence byte (0x00/0x01). Every record type in the
package is built from these primitives, so two equal values always encode
to the same bytes and decoding rejects anything that is not the canonical
form.
"""

from __future__ import annotations

import struct
from typing import Callable, Optional, TypeVar

T = TypeVar("T")

MAX_U16 = 0xFFFF


class CodecError(ValueError):
    """Base class for encoding/decoding failures."""


class Truncated(CodecError):
    pass


class NonCanonical(CodecError):
    pass


class UnknownVersion(CodecError):
    pass


class UnknownMsgType(CodecError):
    pass


class OversizeMessage(CodecError):
    pass


class InvalidValue(CodecError):
    """A field decoded structurally but holds a value outside its domain."""


class Writer:
    __slots__ = ("_parts",)

    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def u8(self, v: int) -> "Writer":
        self._parts.append(struct.pack(">B", v))
        return self

    def u16(self, v: int) -> "Writer":
        self._parts.append(struct.pack(">H", v))
        return self

    def u32(self, v: int) -> "Writer":
        self._parts.append(struct.pack(">I", v))
        return self

    def u64(self, v: int) -> "Writer":
        self._parts.append(struct.pack(">Q", v))
        return self

    def fixed(self, b: bytes, n: int) -> "Writer":
        if len(b) != n:
            raise InvalidValue(f"expected {n} bytes, got {len(b)}")
        self._parts.append(bytes(b))
        return self

    def blob(self, b: bytes) -> "Writer":
        if len(b) > MAX_U16:
            raise OversizeMessage(f"field of {len(b)} bytes exceeds u16 length")
        self.u16(len(b))
        self._parts.append(bytes(b))
        return self

    def text(self, s: str) -> "Writer":
        return self.blob(s.encode("utf-8"))

    def flag(self, v: bool) -> "Writer":
        return self.u8(1 if v else 0)

    def optional(self, v: Optional[T], fn: Callable[["Writer", T], object]) -> "Writer":
        if v is None:
            return self.u8(0)
        self.u8(1)
        fn(self, v)
        return self

    def seq(self, items, fn: Callable[["Writer", T], object]) -> "Writer":
        items = list(items)
        if len(items) > MAX_U16:
            raise OversizeMessage("sequence too long")
        self.u16(len(items))
        for item in items:
            fn(self, item)
        return self

    def raw(self, b: bytes) -> "Writer":
        self._parts.append(bytes(b))
        return self

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    __slots__ = ("_buf", "_pos")

    def __init__(self, buf: bytes) -> None:
        self._buf = memoryview(bytes(buf))
        self._pos = 0

    def _take(self, n: int) -> bytes:
        end = self._pos + n
        if end > len(self._buf):
            raise Truncated(f"need {n} bytes at offset {self._pos}, have {len(self._buf) - self._pos}")
        out = self._buf[self._pos:end].tobytes()
        self._pos = end
        return out

    def u8(self) -> int:
        return self._take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self._take(8))[0]

    def fixed(self, n: int) -> bytes:
        return self._take(n)

    def blob(self) -> bytes:
        return self._take(self.u16())

    def text(self) -> str:
        raw = self.blob()
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise InvalidValue("string is not valid UTF-8") from exc

    def flag(self) -> bool:
        b = self.u8()
        if b > 1:
            raise NonCanonical(f"boolean byte {b:#04x}")
        return b == 1

    def optional(self, fn: Callable[["Reader"], T]) -> Optional[T]:
        tag = self.u8()
        if tag == 0:
            return None
        if tag != 1:
            raise NonCanonical(f"presence byte {tag:#04x}")
        return fn(self)

    def seq(self, fn: Callable[["Reader"], T]) -> list[T]:
        return [fn(self) for _ in range(self.u16())]

    def remaining(self) -> int:
        return len(self._buf) - self._pos

    def done(self) -> None:
        if self._pos != len(self._buf):
            raise NonCanonical(f"{len(self._buf) - self._pos} trailing bytes")


def decode_exact(data: bytes, fn: Callable[[Reader], T]) -> T:
    """Decode a whole buffer with ``fn``; trailing bytes are an error."""
    r = Reader(data)
    value = fn(r)
    r.done()
    return value
