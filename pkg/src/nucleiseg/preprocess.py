"""Input-side normalization and block partitioning.

Images are 8-bit RGB rasters held as ``(height, width, 3)`` uint8 arrays.
All later stages consume the non-overlapping block tiling produced here.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class DegenerateChannelWarning(UserWarning):
    """A color channel had coinciding stretch quantiles and was passed through."""


class BlockScale(Enum):
    SUB = "sub"        # quadrant of a base block, used when a block is multimodal
    BASE = "base"
    SUPER = "super"    # aligned 2x2 group of base blocks, used when a block is class-dominant


@dataclass(frozen=True)
class Block:
    """A rectangular image region; ``x0, y0`` is the top-left pixel."""

    x0: int
    y0: int
    w: int
    h: int
    scale: BlockScale = BlockScale.BASE

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.y0, self.y0 + self.h), slice(self.x0, self.x0 + self.w)


@dataclass
class BlockGrid:
    """Non-overlapping tiling of an image into square base blocks.

    Edge blocks are truncated to the image bounds rather than padded, so
    per-block statistics never see synthetic pixels.
    """

    width: int
    height: int
    base: int
    nx: int = field(init=False)
    ny: int = field(init=False)
    blocks: list[Block] = field(init=False)

    def __post_init__(self) -> None:
        self.nx = math.ceil(self.width / self.base)
        self.ny = math.ceil(self.height / self.base)
        self.blocks = [self.block_at(bx, by) for by in range(self.ny) for bx in range(self.nx)]

    def block_at(self, bx: int, by: int) -> Block:
        if not (0 <= bx < self.nx and 0 <= by < self.ny):
            raise IndexError(f"block index ({bx}, {by}) outside {self.nx}x{self.ny} grid")
        x0 = bx * self.base
        y0 = by * self.base
        return Block(x0, y0, min(self.base, self.width - x0), min(self.base, self.height - y0))

    def __iter__(self):
        return iter(self.blocks)

    def __len__(self) -> int:
        return len(self.blocks)


def validate_rgb(img: np.ndarray) -> np.ndarray:
    """Check that ``img`` is a (h, w, 3) uint8 raster with h, w >= 1."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (h, w, 3) RGB array, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"image must be at least 1x1, got shape {img.shape}")
    if img.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {img.dtype}")
    return img


def _nearest_rank(sorted_values: np.ndarray, q: float) -> float:
    # nearest-rank quantile: smallest value with at least ceil(q*n) values <= it
    n = sorted_values.size
    idx = max(math.ceil(q * n), 1) - 1
    return float(sorted_values[idx])


def enhance_contrast(img: np.ndarray, low_pct: float = 0.01, high_pct: float = 0.99) -> np.ndarray:
    """Per-channel linear percentile stretch of an 8-bit RGB image.

    Values at or below the ``low_pct`` quantile map to 0, values at or above
    the ``high_pct`` quantile map to 255, linear in between.  Quantiles use
    the nearest-rank rule on the sorted channel values, so the result is
    bit-exact across platforms.  A channel whose two quantiles coincide is
    passed through unchanged with a :class:`DegenerateChannelWarning`.
    """
    img = validate_rgb(img)
    if not 0.0 <= low_pct < high_pct <= 1.0:
        raise ValueError(f"need 0 <= low_pct < high_pct <= 1, got ({low_pct}, {high_pct})")

    out = np.empty_like(img)
    for c in range(3):
        channel = img[:, :, c]
        ordered = np.sort(channel, axis=None)
        lo = _nearest_rank(ordered, low_pct)
        hi = _nearest_rank(ordered, high_pct)
        if hi == lo:
            warnings.warn(
                f"channel {c}: stretch quantiles coincide at {lo}; passing through",
                DegenerateChannelWarning,
                stacklevel=2,
            )
            out[:, :, c] = channel
            continue
        stretched = (channel.astype(np.float64) - lo) * (255.0 / (hi - lo))
        out[:, :, c] = np.clip(np.rint(stretched), 0.0, 255.0).astype(np.uint8)
    return out


def partition_blocks(img: np.ndarray, base: int = 50) -> BlockGrid:
    """Tile an image into ceil(w/base) x ceil(h/base) base blocks."""
    img = validate_rgb(img)
    if base < 8:
        raise ValueError(f"base block size must be >= 8, got {base}")
    h, w = img.shape[:2]
    return BlockGrid(width=w, height=h, base=base)
