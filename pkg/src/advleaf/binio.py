"""Little-endian record helpers shared by the binary file formats."""
from __future__ import annotations

import struct
import zlib

from .errors import FormatError


def pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def with_crc(body: bytes) -> bytes:
    return bytes(body) + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def check_crc(buf: bytes, what: str) -> bytes:
    """Verify and strip a trailing CRC32."""
    if len(buf) < 8:
        raise FormatError(f"{what}: file too short ({len(buf)} bytes)")
    body, (stored,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != stored:
        raise FormatError(f"{what}: CRC32 mismatch")
    return body


class Reader:
    """Cursor over a byte buffer; every short read is a FormatError."""

    def __init__(self, buf: bytes, what: str):
        self.buf, self.pos, self.what = buf, 0, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.what}: truncated at byte offset {self.pos} (need {n} more bytes)")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        start = self.pos
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{self.what}: invalid UTF-8 string at byte offset {start}") from exc

    def expect_end(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{self.what}: {len(self.buf) - self.pos} trailing bytes at offset {self.pos}")
