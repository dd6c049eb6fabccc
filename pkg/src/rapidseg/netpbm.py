"""Binary PGM/PPM codec and the fixed-format label map (RLBL) container."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    """Raised when a file does not follow the expected binary layout."""


_MAGIC_CHANNELS = {b"P5": 1, b"P6": 3}
RLBL_MAGIC = b"RLBL"


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        ch = data[pos : pos + 1]
        if ch == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
        pos += 1
    return data[start:pos], pos


def decode_netpbm(data: bytes) -> np.ndarray:
    """Decode a P5/P6 byte string into a ``(height, width, channels)`` uint8 array."""
    magic, pos = _read_token(data, 0)
    if magic not in _MAGIC_CHANNELS:
        raise FormatError(f"magic number: unsupported {magic!r}, expected P5 or P6")
    channels = _MAGIC_CHANNELS[magic]
    fields = {}
    for name in ("width", "height", "maxval"):
        tok, pos = _read_token(data, pos)
        try:
            fields[name] = int(tok)
        except ValueError:
            raise FormatError(f"{name}: not an integer ({tok!r})") from None
    if fields["width"] < 1 or fields["height"] < 1:
        raise FormatError(f"width/height: must be >= 1, got {fields['width']}x{fields['height']}")
    if fields["maxval"] != 255:
        raise FormatError(f"maxval: only 255 is supported, got {fields['maxval']}")
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise FormatError("maxval: missing single whitespace before payload")
    pos += 1
    w, h = fields["width"], fields["height"]
    expected = w * h * channels
    payload = data[pos : pos + expected]
    if len(payload) < expected:
        raise FormatError(
            f"payload: truncated, header {w}x{h}x{channels} needs {expected} bytes, got {len(payload)}"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, channels).copy()


def encode_netpbm(pixels: np.ndarray) -> bytes:
    arr = np.asarray(pixels)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, ch = arr.shape
    if ch not in (1, 3):
        raise FormatError(f"channels: {ch} cannot be written as PGM/PPM")
    magic = b"P5" if ch == 1 else b"P6"
    header = magic + b"\n%d %d\n255\n" % (w, h)
    return header + np.ascontiguousarray(arr, dtype=np.uint8).tobytes()


def read_netpbm(path: str | Path) -> np.ndarray:
    return decode_netpbm(Path(path).read_bytes())


def write_netpbm(path: str | Path, pixels: np.ndarray) -> None:
    Path(path).write_bytes(encode_netpbm(pixels))


def encode_rlbl(labels: np.ndarray, m: int) -> bytes:
    """16-byte header (``RLBL``, u32 width, u32 height, u32 M) then u32 LE labels."""
    h, w = labels.shape
    header = RLBL_MAGIC + struct.pack("<III", w, h, m)
    return header + np.ascontiguousarray(labels, dtype="<u4").tobytes()


def decode_rlbl(data: bytes) -> tuple[np.ndarray, int]:
    if len(data) < 16 or data[:4] != RLBL_MAGIC:
        raise FormatError("magic number: expected RLBL label map")
    w, h, m = struct.unpack("<III", data[4:16])
    expected = w * h * 4
    if len(data) - 16 < expected:
        raise FormatError(f"payload: truncated, {w}x{h} labels need {expected} bytes")
    labels = np.frombuffer(data[16 : 16 + expected], dtype="<u4").reshape(h, w)
    if labels.size and int(labels.max()) >= m:
        raise FormatError(f"M: label {int(labels.max())} out of range [0, {m})")
    return labels.astype(np.int32), m
