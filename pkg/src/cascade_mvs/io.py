"""Raster file formats: PFM, 8-bit PGM/PPM and the FMAP/VOL1 debug dumps."""

from __future__ import annotations

import re
import struct
from pathlib import Path

import numpy as np

from .errors import IoError


def write_pfm(path, data: np.ndarray) -> None:
    """Write a single-channel little-endian PFM (rows stored bottom-up)."""
    data = np.asarray(data)
    if data.ndim != 2:
        raise ValueError("write_pfm expects a 2-D array")
    h, w = data.shape
    body = np.ascontiguousarray(np.flipud(data).astype("<f4")).tobytes()
    try:
        with open(path, "wb") as f:
            f.write(b"Pf\n%d %d\n-1.0\n" % (w, h))
            f.write(body)
    except OSError as exc:
        raise IoError(str(exc)) from exc


def read_pfm(path) -> np.ndarray:
    """Read a PFM file (``Pf`` or ``PF``, either endianness) as float32, top row first."""
    try:
        with open(path, "rb") as f:
            kind = f.readline().strip()
            dims = f.readline().split()
            scale = float(f.readline().strip())
            raw = f.read()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    if kind not in (b"Pf", b"PF") or len(dims) != 2:
        raise IoError(f"{path}: not a PFM file")
    w, h = int(dims[0]), int(dims[1])
    channels = 3 if kind == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(raw, dtype=dtype, count=w * h * channels)
    shape = (h, w, channels) if channels == 3 else (h, w)
    return np.flipud(arr.reshape(shape)).astype(np.float32)


_PNM_TOKEN = re.compile(rb"(?:#[^\n]*\n|\s)*(\S+)")


def read_pnm(path) -> np.ndarray:
    """Read an 8-bit binary PGM (P5) or PPM (P6) into floats in [0, 1]."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    pos = 0
    fields = []
    for _ in range(4):
        m = _PNM_TOKEN.match(raw, pos)
        if m is None:
            raise IoError(f"{path}: truncated PNM header")
        fields.append(m.group(1))
        pos = m.end()
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise IoError(f"{path}: only 8-bit P5/P6 images are supported")
    channels = 3 if magic == b"P6" else 1
    pixels = np.frombuffer(raw, dtype=np.uint8, count=w * h * channels, offset=pos + 1)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return pixels.reshape(shape).astype(np.float64) / 255.0


def write_pnm(path, image: np.ndarray) -> None:
    """Write a float image in [0, 1] as PGM (2-D) or PPM (H, W, 3)."""
    image = np.asarray(image)
    q = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    magic = b"P6" if q.ndim == 3 else b"P5"
    h, w = q.shape[:2]
    try:
        with open(path, "wb") as f:
            f.write(b"%s\n%d %d\n255\n" % (magic, w, h))
            f.write(q.tobytes())
    except OSError as exc:
        raise IoError(str(exc)) from exc


def _dump(path, magic: bytes, data: np.ndarray) -> None:
    # data arrives channel-first (C, H, W); stored pixel-major (H, W, C)
    c, h, w = data.shape
    body = np.ascontiguousarray(np.moveaxis(data, 0, -1).astype("<f4")).tobytes()
    try:
        with open(path, "wb") as f:
            f.write(magic + struct.pack("<3I", w, h, c))
            f.write(body)
    except OSError as exc:
        raise IoError(str(exc)) from exc


def _load(path, magic: bytes) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    if raw[:4] != magic:
        raise IoError(f"{path}: bad magic {raw[:4]!r}")
    w, h, c = struct.unpack("<3I", raw[4:16])
    arr = np.frombuffer(raw, dtype="<f4", count=w * h * c, offset=16).reshape(h, w, c)
    return np.moveaxis(arr, -1, 0).astype(np.float32)


def dump_features(path, feat: np.ndarray) -> None:
    """Debug dump of a ``(C, H, W)`` feature map ("FMAP", u32 W, H, C)."""
    _dump(path, b"FMAP", feat)


def load_features(path) -> np.ndarray:
    return _load(path, b"FMAP")


def dump_volume(path, vol: np.ndarray) -> None:
    """Debug dump of a ``(D, H, W)`` volume ("VOL1", u32 W, H, D)."""
    _dump(path, b"VOL1", vol)


def load_volume(path) -> np.ndarray:
    return _load(path, b"VOL1")
