"""Binary Netpbm (P5 grayscale / P6 RGB) reading and writing, 8-bit only."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError

_WS = b" \t\n\r\v\f"


def _header(buf: bytes, magic: bytes, what: str) -> tuple[int, int, int, int]:
    """Parse ``magic width height maxval`` and return them plus the raster offset."""
    if buf[:2] != magic:
        raise FormatError(f"{what}: expected magic {magic.decode()} at byte offset 0, found {buf[:2]!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(buf):
            raise FormatError(f"{what}: header truncated at byte offset {pos}")
        ch = buf[pos:pos + 1]
        if ch[0] in _WS:
            pos += 1
            continue
        if ch == b"#":
            end = buf.find(b"\n", pos)
            if end < 0:
                raise FormatError(f"{what}: unterminated comment at byte offset {pos}")
            pos = end + 1
            continue
        start = pos
        while pos < len(buf) and buf[pos] not in _WS and buf[pos:pos + 1] != b"#":
            pos += 1
        token = buf[start:pos]
        if not token.isdigit():
            raise FormatError(f"{what}: malformed header field {token!r} at byte offset {start}")
        fields.append(int(token))
    if pos >= len(buf) or buf[pos] not in _WS:
        raise FormatError(f"{what}: missing whitespace after maxval at byte offset {pos}")
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError(f"{what}: invalid dimensions {width}x{height} at byte offset 2")
    if not 1 <= maxval <= 255:
        raise FormatError(f"{what}: unsupported maxval {maxval} (8-bit only)")
    return width, height, maxval, pos + 1


def _decode(buf: bytes, magic: bytes, channels: int, what: str) -> np.ndarray:
    width, height, maxval, off = _header(buf, magic, what)
    need = width * height * channels
    if len(buf) - off < need:
        raise FormatError(f"{what}: raster truncated at byte offset {len(buf)}, need {need} bytes from offset {off}")
    raster = np.frombuffer(buf, dtype=np.uint8, count=need, offset=off)
    if maxval != 255:
        if raster.max(initial=0) > maxval:
            raise FormatError(f"{what}: sample exceeds maxval {maxval}")
        raster = np.round(raster.astype(np.float64) * 255.0 / maxval).astype(np.uint8)
    return raster.reshape(height, width, channels).copy()


def read_ppm(path_or_bytes) -> np.ndarray:
    """Read a P6 file into a uint8 array of shape [3, H, W]."""
    buf = _as_bytes(path_or_bytes)
    return _decode(buf, b"P6", 3, "PPM").transpose(2, 0, 1).copy()


def read_pgm(path_or_bytes) -> np.ndarray:
    """Read a P5 file into a uint8 array of shape [H, W]."""
    buf = _as_bytes(path_or_bytes)
    return _decode(buf, b"P5", 1, "PGM")[:, :, 0].copy()


def encode_ppm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[0] != 3:
        raise FormatError(f"PPM needs uint8 [3, H, W], got {image.dtype} {image.shape}")
    h, w = image.shape[1:]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(image.transpose(1, 2, 0)).tobytes()


def encode_pgm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 2:
        raise FormatError(f"PGM needs uint8 [H, W], got {image.dtype} {image.shape}")
    h, w = image.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(image).tobytes()


def write_ppm(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(image))


def write_pgm(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(image))


def _as_bytes(path_or_bytes) -> bytes:
    if isinstance(path_or_bytes, (bytes, bytearray, memoryview)):
        return bytes(path_or_bytes)
    return Path(path_or_bytes).read_bytes()
