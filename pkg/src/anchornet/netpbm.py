"""Binary PPM (P6) and PGM (P5) reading and writing.

Chosen over PNG/JPEG to keep image I/O free of external codecs.  Writers
emit maxval 255 with a minimal header; readers accept the full header
grammar (whitespace runs and '#' comments between tokens).
"""

from __future__ import annotations

import numpy as np


class NetpbmError(ValueError):
    """Malformed or unsupported netpbm file."""


def _read_tokens(data: bytes, count: int, offset: int) -> tuple[list[int], int]:
    tokens: list[int] = []
    i = offset
    while len(tokens) < count:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if i < len(data) and data[i : i + 1] == b"#":
            while i < len(data) and data[i] != 0x0A:
                i += 1
            continue
        start = i
        while i < len(data) and not data[i : i + 1].isspace():
            i += 1
        if start == i:
            raise NetpbmError("truncated header")
        try:
            tokens.append(int(data[start:i]))
        except ValueError as err:
            raise NetpbmError(f"bad header token {data[start:i]!r}") from err
    return tokens, i


def _read(path: str, magic: bytes, channels: int) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] != magic:
        raise NetpbmError(f"{path}: expected {magic.decode()} file, got {data[:2]!r}")
    (width, height, maxval), i = _read_tokens(data, 3, 2)
    if maxval != 255:
        raise NetpbmError(f"{path}: only maxval 255 supported, got {maxval}")
    i += 1  # single whitespace byte after maxval
    expected = width * height * channels
    payload = data[i : i + expected]
    if len(payload) != expected:
        raise NetpbmError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype=np.uint8)
    shape = (height, width, channels) if channels > 1 else (height, width)
    return arr.reshape(shape).copy()


def read_ppm(path: str) -> np.ndarray:
    """(H, W, 3) uint8 from a binary P6 file."""
    return _read(path, b"P6", 3)


def read_pgm(path: str) -> np.ndarray:
    """(H, W) uint8 from a binary P5 file."""
    return _read(path, b"P5", 1)


def write_ppm(path: str, pixels: np.ndarray) -> None:
    """Write (H, W, 3) uint8 as binary P6, maxval 255."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise NetpbmError(f"write_ppm needs (H, W, 3) uint8, got {pixels.shape} {pixels.dtype}")
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (pixels.shape[1], pixels.shape[0]))
        fh.write(pixels.tobytes())


def write_pgm(path: str, pixels: np.ndarray) -> None:
    """Write (H, W) uint8 as binary P5, maxval 255."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise NetpbmError(f"write_pgm needs (H, W) uint8, got {pixels.shape} {pixels.dtype}")
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (pixels.shape[1], pixels.shape[0]))
        fh.write(pixels.tobytes())


def chw_float_to_hwc_u8(image: np.ndarray) -> np.ndarray:
    """(C, H, W) floats in [0, 1] -> (H, W, C) uint8."""
    clipped = np.clip(np.asarray(image), 0.0, 1.0)
    return np.round(clipped * 255.0).astype(np.uint8).transpose(1, 2, 0)


def hwc_u8_to_chw_float(pixels: np.ndarray) -> np.ndarray:
    """(H, W, C) uint8 -> (C, H, W) float32 in [0, 1]."""
    return pixels.astype(np.float32).transpose(2, 0, 1) / 255.0
