"""Grid file formats.

* PGM (binary ``P5``), 8-bit or 16-bit big-endian, scaled by maxval to [0, 1].
* CIF1 raw grids: 16-byte header (``b"CIF1"``, u32 height, u32 width,
  4 reserved zero bytes) followed by little-endian float64 data, row-major.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .core import as_grid

CIF_MAGIC = b"CIF1"
_CIF_HEADER = struct.Struct("<4sIII")


class ImageFormatError(OSError):
    """Malformed or unsupported image file."""


def _pgm_tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    tokens: list[int] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PGM header")
        tokens.append(buf[start:pos])
    return tokens, pos


def read_pgm(path) -> np.ndarray:
    path = Path(path)
    buf = path.read_bytes()
    tokens, pos = _pgm_tokens(buf, 4)
    if tokens[0] != b"P5":
        raise ImageFormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageFormatError(f"{path}: bad PGM header") from exc
    if not 0 < maxval < 65536 or width < 1 or height < 1:
        raise ImageFormatError(f"{path}: unsupported PGM header values")
    pos += 1  # single whitespace byte after maxval
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    n = width * height
    if len(buf) - pos < n * dtype.itemsize:
        raise ImageFormatError(f"{path}: truncated PGM data")
    data = np.frombuffer(buf, dtype=dtype, count=n, offset=pos)
    return data.reshape(height, width).astype(np.float64) / maxval


def write_pgm(path, x, maxval: int = 255) -> None:
    """Write ``x`` (nominal range [0, 1]) quantized to ``maxval`` levels."""
    x = as_grid(x)
    if not 0 < maxval < 65536:
        raise ValueError("maxval must be in 1..65535")
    q = np.clip(np.rint(x * maxval), 0, maxval)
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{x.shape[1]} {x.shape[0]}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + q.astype(dtype).tobytes())


def read_cif(path) -> np.ndarray:
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < _CIF_HEADER.size:
        raise ImageFormatError(f"{path}: truncated CIF1 header")
    magic, height, width, _ = _CIF_HEADER.unpack_from(buf)
    if magic != CIF_MAGIC:
        raise ImageFormatError(f"{path}: bad magic {magic!r}")
    n = height * width
    if len(buf) != _CIF_HEADER.size + 8 * n:
        raise ImageFormatError(f"{path}: expected {n} float64 values")
    data = np.frombuffer(buf, dtype="<f8", offset=_CIF_HEADER.size)
    return data.reshape(height, width).astype(np.float64)


def write_cif(path, x) -> None:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("CIF1 stores 2D grids only")
    header = _CIF_HEADER.pack(CIF_MAGIC, x.shape[0], x.shape[1], 0)
    Path(path).write_bytes(header + np.ascontiguousarray(x, dtype="<f8").tobytes())


def read_grid(path) -> np.ndarray:
    """Read a PGM or CIF1 file, dispatching on the magic bytes."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == CIF_MAGIC:
        return read_cif(path)
    if magic[:2] == b"P5":
        return read_pgm(path)
    raise ImageFormatError(f"{path}: unrecognized image format")


def write_grid(path, x) -> None:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        write_pgm(path, x)
    else:
        write_cif(path, x)


def center_crop(x: np.ndarray, size: int) -> np.ndarray:
    """Center crop to ``size`` x ``size``; smaller dimensions are kept."""
    if size <= 0:
        return x
    h, w = x.shape
    top = max((h - size) // 2, 0)
    left = max((w - size) // 2, 0)
    return x[top : top + size, left : left + size].copy()
