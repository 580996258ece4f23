"""Standalone ADFT reader/writer.

Byte layout (integers little-endian):

    magic   4 bytes  b"ADFT"
    version u32      1
    n_scales u32
    per scale:
        label_len u8, label UTF-8
        h u32, w u32, c u32
        h*w*c float32 values, row-major (h, w, c)

Deliberately implemented here from the format description rather than
imported, so the exporter and the consumer cross-check each other's bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"ADFT"
VERSION = 1


class AdftError(ValueError):
    pass


def write_adft(path, scales: list) -> None:
    """``scales`` is a list of (label, array) with (h, w, c) float arrays."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(scales))]
    for label, grid in scales:
        grid = np.ascontiguousarray(grid, dtype="<f4")
        if grid.ndim != 3:
            raise AdftError(f"scale {label!r}: expected (h, w, c), got {grid.shape}")
        raw = label.encode("utf-8")
        if len(raw) > 255:
            raise AdftError(f"label too long: {label!r}")
        chunks.append(struct.pack("<B", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<III", *grid.shape))
        chunks.append(grid.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_adft(path) -> list:
    """Returns a list of (label, (h, w, c) float32 array)."""
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise AdftError(f"{path}: truncated at offset {pos}")
        out = data[pos : pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise AdftError(f"{path}: bad magic")
    version, n_scales = struct.unpack("<II", take(8))
    if version != VERSION:
        raise AdftError(f"{path}: unsupported version {version}")
    out = []
    for _ in range(n_scales):
        (label_len,) = struct.unpack("<B", take(1))
        label = take(label_len).decode("utf-8")
        h, w, c = struct.unpack("<III", take(12))
        grid = np.frombuffer(take(4 * h * w * c), dtype="<f4").reshape(h, w, c)
        out.append((label, grid))
    return out
