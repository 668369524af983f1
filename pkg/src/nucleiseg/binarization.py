"""Adaptive per-block binarization of the normalized channel map.

Each base block is thresholded at the valley of its bimodal channel
histogram.  Blocks whose histogram is not bimodal fall back along the two
remedies the method defines: multimodal blocks are split into four
quadrants and reprocessed at the finer scale, class-dominant blocks are
merged into their aligned 2x2 super-block and reprocessed at the coarser
scale.  Every pixel is written exactly once, at the finest scale that
claimed it, so the stitched mask is independent of block processing order.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from nucleiseg.color_transform import block_channel, rec601_luma
from nucleiseg.config import PipelineConfig
from nucleiseg.preprocess import Block, BlockGrid, BlockScale, validate_rgb


class ValleyError(ValueError):
    """The two peaks are adjacent: no interior bin can hold a valley."""


@dataclass(frozen=True)
class Histogram:
    """Uniform histogram over [0, 1] with a mass-preserving smoothed view."""

    bin_count: int
    edges: np.ndarray     # bin_count + 1 uniform edges
    counts: np.ndarray    # int64 raw counts
    smoothed: np.ndarray  # float64, same total mass as counts

    @property
    def centers(self) -> np.ndarray:
        return (self.edges[:-1] + self.edges[1:]) / 2.0


class Modality(Enum):
    BIMODAL = "bimodal"
    MULTIMODAL = "multimodal"
    DOMINANT = "dominant"


@dataclass(frozen=True)
class ModalityClass:
    """Histogram shape classification for one block.

    ``threshold`` is set for bimodal blocks only.  ``mode_mean`` is the
    count-weighted mean channel value of the dominant mode and is set for
    dominant blocks; it drives the terminal background/nucleus decision.
    """

    kind: Modality
    peaks: tuple[int, ...]
    threshold: float | None = None
    mode_mean: float | None = None


def _smooth_mass_preserving(counts: np.ndarray, radius: int) -> np.ndarray:
    """Centered moving average that redistributes edge-truncated mass.

    Each bin spreads its count uniformly over the window clipped to the
    histogram range, so the total mass is preserved exactly; away from the
    edges this equals the plain centered moving average.
    """
    counts = counts.astype(np.float64)
    if radius == 0:
        return counts
    n = counts.size
    idx = np.arange(n)
    width = np.minimum(idx + radius, n - 1) - np.maximum(idx - radius, 0) + 1
    return np.convolve(counts / width, np.ones(2 * radius + 1), mode="same")


def build_histogram(values: np.ndarray, bins: int = 32, smooth_radius: int = 2) -> Histogram:
    """Histogram channel values into uniform bins over [0, 1].

    The closed upper edge (value 1.0) lands in the last bin.
    """
    if bins < 8:
        raise ValueError(f"need at least 8 bins, got {bins}")
    if smooth_radius < 0:
        raise ValueError(f"smooth_radius must be >= 0, got {smooth_radius}")
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size and (values.min() < 0.0 or values.max() > 1.0):
        raise ValueError("channel values must lie in [0, 1]")
    idx = np.minimum((values * bins).astype(np.int64), bins - 1)
    counts = np.bincount(idx, minlength=bins).astype(np.int64)
    return Histogram(
        bin_count=bins,
        edges=np.linspace(0.0, 1.0, bins + 1),
        counts=counts,
        smoothed=_smooth_mass_preserving(counts, smooth_radius),
    )


def _find_peaks(smoothed: np.ndarray, min_height: float, min_separation: int) -> list[int]:
    """Plateau-aware local maxima, tallest-first merge of close neighbors."""
    n = smoothed.size
    candidates: list[tuple[int, float]] = []
    i = 0
    while i < n:
        j = i
        while j + 1 < n and smoothed[j + 1] == smoothed[i]:
            j += 1
        rises_left = i == 0 or smoothed[i - 1] < smoothed[i]
        falls_right = j == n - 1 or smoothed[j + 1] < smoothed[i]
        if rises_left and falls_right and smoothed[i] > 0.0 and smoothed[i] >= min_height:
            candidates.append(((i + j) // 2, float(smoothed[i])))
        i = j + 1
    kept: list[int] = []
    for pos, _height in sorted(candidates, key=lambda c: (-c[1], c[0])):
        if all(abs(pos - other) >= min_separation for other in kept):
            kept.append(pos)
    return sorted(kept)


def _valley_bin(smoothed: np.ndarray, lo_peak: int, hi_peak: int) -> int:
    """Minimum-count bin strictly between two peaks, ties toward their midpoint."""
    if hi_peak - lo_peak < 2:
        raise ValleyError(f"peaks at bins {lo_peak} and {hi_peak} leave no interior bin")
    interior = np.arange(lo_peak + 1, hi_peak)
    section = smoothed[interior]
    ties = interior[section == section.min()]
    midpoint = (lo_peak + hi_peak) / 2.0
    return int(min(ties, key=lambda b: (abs(b - midpoint), b)))


def _mode_mean(hist: Histogram, bins: slice) -> float:
    """Count-weighted mean channel value over a run of bins."""
    counts = hist.counts[bins].astype(np.float64)
    total = counts.sum()
    if total == 0.0:
        # all mass smoothed in from outside the run; fall back to smoothed weights
        counts = hist.smoothed[bins]
        total = counts.sum()
    return float(np.dot(counts, hist.centers[bins]) / total)


def classify_modality(
    hist: Histogram,
    peak_min_fraction: float = 0.1,
    dominance_ratio: float = 0.15,
    peak_min_separation: int = 3,
) -> ModalityClass:
    """Classify a block histogram as bimodal, multimodal or class-dominant.

    Peaks are local maxima of the smoothed counts at least
    ``peak_min_fraction`` of the tallest bin.  Exactly two peaks make the
    block bimodal unless the minority mode holds less than
    ``dominance_ratio`` of the pixels, which means one class dominates; one
    peak is always dominant; three or more peaks are multimodal.
    """
    total = int(hist.counts.sum())
    if total == 0:
        raise ValueError("cannot classify an empty histogram")
    min_height = peak_min_fraction * float(hist.smoothed.max())
    peaks = _find_peaks(hist.smoothed, min_height, peak_min_separation)
    if len(peaks) >= 3:
        return ModalityClass(kind=Modality.MULTIMODAL, peaks=tuple(peaks))
    if len(peaks) == 1:
        return ModalityClass(
            kind=Modality.DOMINANT,
            peaks=tuple(peaks),
            mode_mean=_mode_mean(hist, slice(None)),
        )
    lo, hi = peaks
    try:
        valley = _valley_bin(hist.smoothed, lo, hi)
    except ValleyError:
        return ModalityClass(
            kind=Modality.DOMINANT,
            peaks=tuple(peaks),
            mode_mean=_mode_mean(hist, slice(None)),
        )
    mass_low = int(hist.counts[: valley + 1].sum())
    mass_high = total - mass_low
    if min(mass_low, mass_high) < dominance_ratio * total:
        dominant = slice(0, valley + 1) if mass_low >= mass_high else slice(valley + 1, None)
        return ModalityClass(
            kind=Modality.DOMINANT,
            peaks=tuple(peaks),
            mode_mean=_mode_mean(hist, dominant),
        )
    return ModalityClass(
        kind=Modality.BIMODAL,
        peaks=tuple(peaks),
        threshold=float(hist.centers[valley]),
    )


def valley_threshold(
    hist: Histogram,
    peaks: tuple[int, int] | None = None,
    peak_min_fraction: float = 0.1,
    peak_min_separation: int = 3,
) -> float:
    """Adaptive threshold at the valley between exactly two histogram peaks.

    Raises ValueError when the peak count differs from two and
    :class:`ValleyError` when the peaks are adjacent.
    """
    if peaks is None:
        min_height = peak_min_fraction * float(hist.smoothed.max())
        found = _find_peaks(hist.smoothed, min_height, peak_min_separation)
        if len(found) != 2:
            raise ValueError(f"need exactly two qualifying peaks, found {len(found)}")
        peaks = (found[0], found[1])
    lo, hi = sorted(peaks)
    return float(hist.centers[_valley_bin(hist.smoothed, lo, hi)])


def binarize_block(values: np.ndarray, threshold: float) -> np.ndarray:
    """Nucleus mask: channel value at or below the threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return np.asarray(values, dtype=np.float64) <= threshold


@dataclass(frozen=True)
class BlockRecord:
    """Per-region forensics emitted by :func:`adaptive_binarize`."""

    x0: int
    y0: int
    w: int
    h: int
    scale: str                                      # BlockScale value
    outcome: str
    threshold: float | None
    energy: tuple[float, float, float] | None


@dataclass
class _RegionState:
    block: Block
    flat: bool                    # constant or near-constant region
    mean_luma: float
    values: np.ndarray | None     # (h, w) normalized channel, None when flat
    cls: ModalityClass | None
    energy: tuple[float, float, float] | None


def _region_state(img: np.ndarray, block: Block, cfg: PipelineConfig) -> _RegionState:
    pixels = img[block.slices].reshape(-1, 3)
    luma = rec601_luma(pixels)
    mean_luma = float(luma.mean())
    if (cfg.flat_std > 0.0 and float(luma.std()) <= cfg.flat_std) or pixels.shape[0] < 2:
        return _RegionState(block, True, mean_luma, None, None, None)
    channel = block_channel(pixels, cfg.channel_mode)
    if channel.degenerate:
        return _RegionState(block, True, mean_luma, None, None, None)
    hist = build_histogram(channel.values, cfg.histogram_bins, cfg.smooth_radius)
    cls = classify_modality(
        hist, cfg.peak_min_fraction, cfg.dominance_ratio, cfg.peak_min_separation
    )
    energy = tuple(float(e) for e in channel.energy) if channel.energy is not None else None
    state = _RegionState(
        block, False, mean_luma, channel.values.reshape(block.h, block.w), cls, energy
    )
    state.hist = hist
    return state


def _terminal_mask(state: _RegionState, cfg: PipelineConfig) -> tuple[np.ndarray, str, float | None]:
    """Resolve a region at its final scale, with no further split or merge.

    Bimodal regions threshold at their valley.  Dominant (and flat) regions
    become all background or all nucleus depending on whether the dominant
    mode sits at or above ``background_p_cutoff``; flat regions use their
    mean luma on the same scale, since per-block normalization has erased
    the absolute brightness a single-class region needs.  Multimodal
    regions threshold at the valley between their two tallest peaks.
    """
    shape = (state.block.h, state.block.w)
    if state.flat:
        if state.mean_luma / 255.0 >= cfg.background_p_cutoff:
            return np.zeros(shape, dtype=bool), "flat-background", None
        return np.ones(shape, dtype=bool), "flat-nucleus", None
    cls = state.cls
    if cls.kind is Modality.BIMODAL:
        return state.values <= cls.threshold, "bimodal", cls.threshold
    if cls.kind is Modality.DOMINANT:
        if cls.mode_mean >= cfg.background_p_cutoff:
            return np.zeros(shape, dtype=bool), "dominant-background", None
        return np.ones(shape, dtype=bool), "dominant-nucleus", None
    # multimodal at a terminal scale: best-effort valley between the two tallest peaks
    hist: Histogram = state.hist
    by_height = sorted(cls.peaks, key=lambda p: (-hist.smoothed[p], p))[:2]
    try:
        t = valley_threshold(hist, (by_height[0], by_height[1]))
    except ValleyError:
        mean = _mode_mean(hist, slice(None))
        if mean >= cfg.background_p_cutoff:
            return np.zeros(shape, dtype=bool), "multimodal-background", None
        return np.ones(shape, dtype=bool), "multimodal-nucleus", None
    return state.values <= t, "multimodal-valley", t


def _quadrants(block: Block) -> list[Block]:
    sx = block.w // 2
    sy = block.h // 2
    parts = [
        Block(block.x0, block.y0, sx, sy, BlockScale.SUB),
        Block(block.x0 + sx, block.y0, block.w - sx, sy, BlockScale.SUB),
        Block(block.x0, block.y0 + sy, sx, block.h - sy, BlockScale.SUB),
        Block(block.x0 + sx, block.y0 + sy, block.w - sx, block.h - sy, BlockScale.SUB),
    ]
    return [p for p in parts if p.w > 0 and p.h > 0]


def _super_region(grid: BlockGrid, gi: int, gj: int) -> Block:
    x0 = 2 * gi * grid.base
    y0 = 2 * gj * grid.base
    x1 = min((2 * gi + 2) * grid.base, grid.width)
    y1 = min((2 * gj + 2) * grid.base, grid.height)
    return Block(x0, y0, x1 - x0, y1 - y0, BlockScale.SUPER)


def _record(records: list[BlockRecord] | None, block: Block, outcome: str,
            threshold: float | None, energy) -> None:
    if records is not None:
        records.append(
            BlockRecord(block.x0, block.y0, block.w, block.h, block.scale.value,
                        outcome, threshold, energy)
        )


def adaptive_binarize(
    img: np.ndarray,
    grid: BlockGrid,
    cfg: PipelineConfig,
    records: list[BlockRecord] | None = None,
) -> np.ndarray:
    """Binarize an image block by block with split and merge fallbacks.

    Base blocks with a bimodal histogram are thresholded in place.
    Multimodal blocks are reprocessed as four independent quadrants.
    Class-dominant blocks defer to their aligned 2x2 super-block, which is
    reprocessed once at the coarser scale and fills exactly the deferred
    members.  Pass a list as ``records`` to collect per-region forensics.
    """
    img = validate_rgb(img)
    h, w = img.shape[:2]
    if grid.width != w or grid.height != h:
        raise ValueError(f"grid covers {grid.width}x{grid.height}, image is {w}x{h}")

    mask = np.zeros((h, w), dtype=bool)
    deferred: dict[tuple[int, int], list[Block]] = {}

    for by in range(grid.ny):
        for bx in range(grid.nx):
            block = grid.block_at(bx, by)
            state = _region_state(img, block, cfg)
            if not state.flat and state.cls.kind is Modality.MULTIMODAL:
                for quad in _quadrants(block):
                    qstate = _region_state(img, quad, cfg)
                    qmask, outcome, t = _terminal_mask(qstate, cfg)
                    mask[quad.slices] = qmask
                    _record(records, quad, outcome, t, qstate.energy)
                continue
            if not state.flat and state.cls.kind is Modality.DOMINANT:
                deferred.setdefault((bx // 2, by // 2), []).append(block)
                _record(records, block, "dominant-deferred", None, state.energy)
                continue
            region_mask, outcome, t = _terminal_mask(state, cfg)
            mask[block.slices] = region_mask
            _record(records, block, outcome, t, state.energy)

    for gi, gj in sorted(deferred):
        region = _super_region(grid, gi, gj)
        state = _region_state(img, region, cfg)
        region_mask, outcome, t = _terminal_mask(state, cfg)
        for member in deferred[(gi, gj)]:
            local = (
                slice(member.y0 - region.y0, member.y0 - region.y0 + member.h),
                slice(member.x0 - region.x0, member.x0 - region.x0 + member.w),
            )
            mask[member.slices] = region_mask[local]
        _record(records, region, outcome, t, state.energy)

    return mask
