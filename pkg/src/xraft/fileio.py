"""Binary file formats: HSIC cubes, Middlebury .flo flows, PGM masks, PPM renders.

All multi-byte fields are little-endian except the netpbm text headers.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

FLO_MAGIC = 202021.25
CUBE_MAGIC = b"HSIC"
CUBE_HEADER = struct.Struct("<4sIIIB3s")
# A cube header announcing more values than this is rejected before allocation.
MAX_CUBE_VALUES = 1 << 31


class FormatError(ValueError):
    """A file does not follow the expected binary layout."""


def _need(buf: bytes, offset: int, size: int, path, what: str) -> None:
    missing = offset + size - len(buf)
    if missing > 0:
        raise FormatError(f"{path}: truncated {what}, missing {missing} byte(s)")


def write_cube_file(path: str | os.PathLike, values: np.ndarray, modality: int) -> None:
    values = np.asarray(values, dtype="<f4")
    if values.ndim != 3:
        raise FormatError(f"cube values must be [bands,H,W], got shape {values.shape}")
    bands, h, w = values.shape
    header = CUBE_HEADER.pack(CUBE_MAGIC, w, h, bands, modality, b"\0\0\0")
    Path(path).write_bytes(header + values.tobytes(order="C"))


def read_cube_file(path: str | os.PathLike) -> tuple[np.ndarray, int]:
    """Return ``(values[bands,H,W] float32, modality tag)``."""
    buf = Path(path).read_bytes()
    _need(buf, 0, CUBE_HEADER.size, path, "cube header")
    magic, w, h, bands, modality, reserved = CUBE_HEADER.unpack_from(buf)
    if magic != CUBE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {CUBE_MAGIC!r}")
    if modality not in (0, 1):
        raise FormatError(f"{path}: unknown modality tag {modality}")
    if reserved != b"\0\0\0":
        raise FormatError(f"{path}: reserved header bytes are not zero")
    count = w * h * bands
    if count > MAX_CUBE_VALUES:
        raise FormatError(f"{path}: header declares {bands}x{h}x{w} values, exceeds limit")
    _need(buf, CUBE_HEADER.size, 4 * count, path, "cube payload")
    if len(buf) != CUBE_HEADER.size + 4 * count:
        raise FormatError(f"{path}: {len(buf) - CUBE_HEADER.size - 4 * count} trailing byte(s)")
    values = np.frombuffer(buf, dtype="<f4", count=count, offset=CUBE_HEADER.size)
    return values.reshape(bands, h, w).astype(np.float32), modality


def write_flo(path: str | os.PathLike, flow: np.ndarray) -> None:
    """Write a ``[2,H,W]`` field as interleaved ``(u, v)`` float32 rows."""
    flow = np.asarray(flow, dtype=np.float32)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise FormatError(f"flow must be [2,H,W], got shape {flow.shape}")
    _, h, w = flow.shape
    header = struct.pack("<fii", FLO_MAGIC, w, h)
    payload = np.ascontiguousarray(flow.transpose(1, 2, 0)).astype("<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_flo(path: str | os.PathLike) -> np.ndarray:
    buf = Path(path).read_bytes()
    _need(buf, 0, 12, path, "flow header")
    magic, w, h = struct.unpack_from("<fii", buf)
    if magic != FLO_MAGIC:
        raise FormatError(f"{path}: bad flow magic {magic!r}")
    if w < 0 or h < 0:
        raise FormatError(f"{path}: negative flow size {w}x{h}")
    _need(buf, 12, 8 * w * h, path, "flow payload")
    if len(buf) != 12 + 8 * w * h:
        raise FormatError(f"{path}: {len(buf) - 12 - 8 * w * h} trailing byte(s)")
    data = np.frombuffer(buf, dtype="<f4", count=2 * w * h, offset=12)
    return data.reshape(h, w, 2).transpose(2, 0, 1).astype(np.float32)


def _read_netpbm(path, magic: bytes) -> tuple[int, int, int, bytes, int]:
    buf = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated netpbm header")
        fields.append(buf[start:pos])
    if fields[0] != magic:
        raise FormatError(f"{path}: bad magic {fields[0]!r}, expected {magic!r}")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed netpbm header") from exc
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit netpbm supported, maxval {maxval}")
    return w, h, maxval, buf, pos + 1


def write_pgm(path: str | os.PathLike, mask: np.ndarray) -> None:
    """Binary mask ``[H,W]`` as 8-bit P5: 0 invalid, 255 valid."""
    mask = np.asarray(mask).astype(bool)
    if mask.ndim != 2:
        raise FormatError(f"mask must be [H,W], got shape {mask.shape}")
    h, w = mask.shape
    pixels = np.where(mask, 255, 0).astype(np.uint8)
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + pixels.tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    w, h, _, buf, start = _read_netpbm(path, b"P5")
    _need(buf, start, w * h, path, "mask payload")
    pixels = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=start).reshape(h, w)
    if not np.isin(pixels, (0, 255)).all():
        raise FormatError(f"{path}: mask values must be 0 or 255")
    return pixels == 255


def write_ppm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write ``[3,H,W]`` floats (clamped to [0,1]) or ``[H,W,3]`` uint8 as P6."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        if image.ndim != 3 or image.shape[0] != 3:
            raise FormatError(f"float image must be [3,H,W], got shape {image.shape}")
        image = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8).transpose(1, 2, 0)
    if image.ndim != 3 or image.shape[2] != 3:
        raise FormatError(f"uint8 image must be [H,W,3], got shape {image.shape}")
    h, w, _ = image.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(image).tobytes())


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    """Return ``[H,W,3]`` uint8 pixels."""
    w, h, _, buf, start = _read_netpbm(path, b"P6")
    _need(buf, start, 3 * w * h, path, "image payload")
    return np.frombuffer(buf, dtype=np.uint8, count=3 * w * h, offset=start).reshape(h, w, 3).copy()
