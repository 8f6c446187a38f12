"""Binary PGM (P5) / PPM (P6) read and write, 8-bit only."""
from __future__ import annotations

from pathlib import Path

import numpy as np


class PNMError(ValueError):
    pass


def to_uint8(pixels) -> np.ndarray:
    """Map [0, 1] intensities to bytes with round-half-even."""
    a = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    return np.rint(a * 255.0).astype(np.uint8)


def encode(pixels: np.ndarray) -> bytes:
    a = np.asarray(pixels)
    if a.dtype != np.uint8:
        a = to_uint8(a)
    if a.ndim == 2:
        magic = b"P5"
    elif a.ndim == 3 and a.shape[2] == 3:
        magic = b"P6"
    else:
        raise PNMError(f"cannot encode array of shape {a.shape}")
    h, w = a.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(a).tobytes()


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    out: list[bytes] = []
    pos = 0
    while len(out) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise PNMError("truncated header")
            pos = end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PNMError("truncated header")
        out.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return out, pos + 1


def decode(data: bytes) -> np.ndarray:
    (magic, w, h, maxval), pos = _tokens(data, 4)
    if magic not in (b"P5", b"P6"):
        raise PNMError(f"unsupported magic {magic!r}")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise PNMError("non-numeric header field") from None
    if maxval != 255:
        raise PNMError("only 8-bit images are supported")
    if w < 1 or h < 1:
        raise PNMError(f"bad image size {w}x{h}")
    channels = 1 if magic == b"P5" else 3
    raster = data[pos:pos + w * h * channels]
    if len(raster) != w * h * channels:
        raise PNMError("truncated raster")
    a = np.frombuffer(raster, dtype=np.uint8)
    return a.reshape((h, w) if channels == 1 else (h, w, 3)).copy()


def write_pgm(path, pixels) -> Path:
    path = Path(path)
    a = np.asarray(pixels)
    if a.ndim != 2:
        raise PNMError("PGM needs a 2-D array")
    path.write_bytes(encode(a))
    return path


def write_ppm(path, rgb) -> Path:
    path = Path(path)
    a = np.asarray(rgb)
    if a.ndim != 3 or a.shape[2] != 3:
        raise PNMError("PPM needs an (h, w, 3) array")
    path.write_bytes(encode(a))
    return path


def read_pnm(path) -> np.ndarray:
    """Raw uint8 raster: ``(h, w)`` for P5, ``(h, w, 3)`` for P6."""
    return decode(Path(path).read_bytes())


def read_pgm(path) -> np.ndarray:
    """Grayscale frame as float64 intensities in [0, 1]."""
    a = read_pnm(path)
    if a.ndim != 2:
        raise PNMError(f"{path} is not a PGM")
    return a / 255.0
