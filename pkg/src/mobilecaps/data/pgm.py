"""Binary (P5) PGM codec."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class PGMError(ValueError):
    pass


def _tokens(buf: bytes, count: int, pos: int) -> tuple[list[int], int]:
    """Read ``count`` whitespace-separated header integers, skipping # comments."""
    out = []
    n = len(buf)
    while len(out) < count:
        while pos < n and (buf[pos:pos + 1].isspace() or buf[pos:pos + 1] == b"#"):
            if buf[pos:pos + 1] == b"#":
                while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < n and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise PGMError("malformed PGM header")
        out.append(int(buf[start:pos]))
    return out, pos


def decode_pgm(buf: bytes) -> tuple[np.ndarray, int]:
    """Return (pixels [h, w] as uint8/uint16, maxval)."""
    if buf[:2] != b"P5":
        raise PGMError(f"bad PGM magic {buf[:2]!r}; only binary P5 is supported")
    (width, height, maxval), pos = _tokens(buf, 3, 2)
    if not 0 < maxval < 65536 or width < 1 or height < 1:
        raise PGMError(f"invalid PGM geometry {width}x{height} maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    dtype = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
    need = width * height * dtype.itemsize
    data = buf[pos:pos + need]
    if len(data) != need:
        raise PGMError(f"PGM payload truncated: expected {need} bytes, got {len(data)}")
    pixels = np.frombuffer(data, dtype=dtype).reshape(height, width)
    return pixels.astype(np.uint16 if maxval >= 256 else np.uint8), maxval


def read_pgm(path) -> np.ndarray:
    """Decode a PGM file to float32 [h, w, 1] in [0, 1]."""
    pixels, maxval = decode_pgm(Path(path).read_bytes())
    return (pixels.astype(np.float32) / np.float32(maxval))[..., None]


def encode_pgm(pixels: np.ndarray, maxval: int = 255) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.ndim == 3 and pixels.shape[-1] == 1:
        pixels = pixels[..., 0]
    h, w = pixels.shape
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    return header + np.asarray(pixels).astype(dtype).tobytes()


def write_pgm(path, image: np.ndarray) -> None:
    """Write a [0, 1] float image (or uint8 pixels) as 8-bit P5."""
    image = np.asarray(image)
    if image.dtype.kind == "f":
        image = np.clip(np.rint(image * 255), 0, 255).astype(np.uint8)
    Path(path).write_bytes(encode_pgm(image))
