"""Writer for the engine's FMAP container.

Layout (all little-endian): magic "FMAP", version u32=1, C, H, W as u32,
then C*H*W IEEE-754 f32 values in channel-major, row-major order. One file
per image, file stem = image name.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"FMAP"
VERSION = 1


def write_fmap(array: np.ndarray, destination) -> None:
    data = np.ascontiguousarray(array, dtype=np.float32)
    if data.ndim != 3 or min(data.shape) < 1:
        raise ValueError(f"feature map must be C x H x W, got shape {data.shape}")
    if not np.isfinite(data).all():
        raise ValueError("feature map contains non-finite values")
    c, h, w = data.shape
    payload = MAGIC + struct.pack("<IIII", VERSION, c, h, w) + data.astype("<f4").tobytes()
    Path(destination).write_bytes(payload)
