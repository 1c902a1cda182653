"""R-MAC aggregation: multi-scale region grids, channel-wise max pooling,
and adaptive spatial downsampling for oversized maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_io import FeatureMap

# Minimum fraction of the window side that consecutive windows must share
# along the longer axis (classic R-MAC constant).
OVERLAP_FRACTION = 0.4

DEFAULT_LEVELS = 3


@dataclass(frozen=True)
class Region:
    """One pooling window: top-left cell (x, y), extent (w, h), grid scale."""

    x: int
    y: int
    w: int
    h: int
    scale: int


def _axis_count(length: int, side: int, base: int) -> int:
    """Smallest window count >= base whose consecutive overlap is >= 40% of side.

    A single window only qualifies when it covers the whole axis. The overlap
    test side - (length-side)/(k-1) >= 0.4*side is evaluated in exact integer
    arithmetic so boundary cases are platform independent.
    """
    k = base
    while True:
        if k == 1:
            if side >= length:
                return k
        elif 10 * (side * (k - 1) - (length - side)) >= 4 * side * (k - 1):
            return k
        k += 1


def _axis_starts(length: int, side: int, count: int) -> list[int]:
    """Window starts spaced uniformly over [0, length-side], floored exactly."""
    if count == 1:
        return [0]
    return [(i * (length - side)) // (count - 1) for i in range(count)]


def rmac_regions(width: int, height: int, levels: int = DEFAULT_LEVELS) -> list[Region]:
    """Build the R-MAC window grid for a width x height map.

    At scale l (1..levels) windows are squares of side floor(2*min(W,H)/(l+1)),
    clamped to >= 1. The shorter axis gets l windows; the longer axis gets the
    smallest count >= l keeping consecutive windows overlapped by at least 40%
    of their side. Window starts are spaced uniformly and floored. The list is
    ordered by (scale, y, x) and is fully deterministic.
    """
    if width < 1 or height < 1:
        raise ValueError(f"map dimensions must be positive, got {width}x{height}")
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    regions: list[Region] = []
    for scale in range(1, levels + 1):
        side = max(1, (2 * min(width, height)) // (scale + 1))
        kx = ky = scale
        if width > height:
            kx = _axis_count(width, side, scale)
        elif height > width:
            ky = _axis_count(height, side, scale)
        xs = _axis_starts(width, side, kx)
        ys = _axis_starts(height, side, ky)
        for y in ys:
            for x in xs:
                regions.append(Region(x=x, y=y, w=side, h=side, scale=scale))
    return regions


def region_mac(fmap: FeatureMap, region: Region) -> np.ndarray:
    """Channel-wise maximum over one region; returns a float64 C-vector."""
    if (
        region.x < 0
        or region.y < 0
        or region.w < 1
        or region.h < 1
        or region.x + region.w > fmap.width
        or region.y + region.h > fmap.height
    ):
        raise ValueError(
            f"region {region} out of bounds for {fmap.width}x{fmap.height} map"
        )
    window = fmap.data[:, region.y : region.y + region.h, region.x : region.x + region.w]
    return window.max(axis=(1, 2)).astype(np.float64)


def rmac(fmap: FeatureMap, levels: int = DEFAULT_LEVELS, region_norm: bool = True) -> np.ndarray:
    """Aggregate a feature map into one C-dimensional descriptor.

    Each region's max-pooled vector is L2-normalized (zero vectors pass
    through) and the normalized vectors are summed in a fixed sequential
    order using 64-bit accumulation. The result is raw: global L2 and
    whitening are applied later by post-processing. With region_norm=False
    the raw max vectors are summed without per-region normalization.
    """
    acc = np.zeros(fmap.channels, dtype=np.float64)
    for region in rmac_regions(fmap.width, fmap.height, levels):
        vec = region_mac(fmap, region)
        if region_norm:
            norm = np.linalg.norm(vec)
            if norm > 0.0:
                vec = vec / norm
        acc += vec
    return acc


def downsample(fmap: FeatureMap, out_h: int, out_w: int, mode: str = "max") -> FeatureMap:
    """Adaptive pooling to out_h x out_w; output cell (i, j) pools the input
    window [floor(i*H/H'), ceil((i+1)*H/H')) x [floor(j*W/W'), ceil((j+1)*W/W')).
    """
    if mode not in ("max", "avg"):
        raise ValueError(f"unknown downsample mode {mode!r}")
    h, w = fmap.height, fmap.width
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    if out_h > h or out_w > w:
        raise ValueError(
            f"cannot upsample {h}x{w} map to {out_h}x{out_w}; downsampling only"
        )
    if out_h == h and out_w == w:
        return fmap
    out = np.empty((fmap.channels, out_h, out_w), dtype=np.float32)
    for i in range(out_h):
        r0 = (i * h) // out_h
        r1 = -((-(i + 1) * h) // out_h)
        for j in range(out_w):
            c0 = (j * w) // out_w
            c1 = -((-(j + 1) * w) // out_w)
            window = fmap.data[:, r0:r1, c0:c1]
            if mode == "max":
                out[:, i, j] = window.max(axis=(1, 2))
            else:
                out[:, i, j] = window.mean(axis=(1, 2), dtype=np.float64)
    return FeatureMap(fmap.name, out)
