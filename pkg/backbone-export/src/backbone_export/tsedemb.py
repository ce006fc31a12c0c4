"""TSEDEMB1 embedding container.

Layout (little-endian): magic ``TSEDEMB1`` (8 bytes), u32 version = 1,
u32 T, u32 D, f32 frame period in seconds, then T*D float32 values
row-major, then a u64 CRC-64/XZ of the float payload bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"TSEDEMB1"
VERSION = 1
_HEADER = struct.Struct("<IIIf")

_POLY = 0xC96C5795D7870F42  # ECMA-182, reflected


def _make_table():
    table = []
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ _POLY if crc & 1 else crc >> 1
        table.append(crc)
    return table


_TABLE = _make_table()


def crc64(data: bytes) -> int:
    crc = 0xFFFFFFFFFFFFFFFF
    for b in data:
        crc = _TABLE[(crc ^ b) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF


class FormatError(ValueError):
    """Malformed or corrupt TSEDEMB1 file."""


def write_embeddings(frames: np.ndarray, frame_period: float, path) -> None:
    """Write a (T, D) array as a TSEDEMB1 file; values are stored float32."""
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
        raise FormatError(f"embeddings must be (T>=1, D>=1), got shape {frames.shape}")
    if not np.isfinite(frames).all():
        raise FormatError("embeddings contain non-finite values")
    if frame_period <= 0:
        raise FormatError(f"frame period must be positive, got {frame_period}")
    t, d = frames.shape
    payload = np.ascontiguousarray(frames, dtype="<f4").tobytes()
    blob = MAGIC + _HEADER.pack(VERSION, t, d, frame_period)
    Path(path).write_bytes(blob + payload + struct.pack("<Q", crc64(payload)))


def read_embeddings(path) -> tuple[np.ndarray, float]:
    """Read back a TSEDEMB1 file as ((T, D) float32 array, frame_period)."""
    path = Path(path)
    blob = path.read_bytes()
    head = len(MAGIC) + _HEADER.size
    if len(blob) < head:
        raise FormatError(f"{path}: truncated header")
    if blob[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:8]!r}")
    version, t, d, frame_period = _HEADER.unpack(blob[8:head])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    size = t * d * 4
    if len(blob) < head + size + 8:
        raise FormatError(f"{path}: truncated payload for T={t} D={d}")
    payload = blob[head : head + size]
    (stored,) = struct.unpack("<Q", blob[head + size : head + size + 8])
    if stored != crc64(payload):
        raise FormatError(f"{path}: CRC mismatch")
    return np.frombuffer(payload, dtype="<f4").reshape(t, d), float(frame_period)
