"""Pipeline configuration and its flat key=value file format.

Every free parameter of the segmentation pipeline lives here so a run can
be reproduced exactly from its serialized config.  Unknown keys in a config
file are errors: a typo must not silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

CHANNEL_MODES = ("P", "L")


@dataclass
class PipelineConfig:
    """Tunables for segmentation, binarization and morphological refinement.

    Attributes:
        block_size: side length in pixels of the base analysis blocks.
        histogram_bins: number of uniform bins over [0, 1] for the per-block
            channel histogram.
        smooth_radius: half-width of the mass-preserving moving average
            applied to histogram counts before peak analysis.
        peak_min_fraction: a histogram peak qualifies only if its smoothed
            height is at least this fraction of the tallest bin.
        peak_min_separation: minimum distance in bins between qualifying
            peaks; closer peaks are merged into the taller one.
        dominance_ratio: with two peaks, the block still counts as
            class-dominant when the minority mode holds less than this
            fraction of the block's pixels.
        background_p_cutoff: terminal decision for blocks that never become
            bimodal: all background when the dominant mode's mean channel
            value is at or above this cutoff, all nucleus otherwise.
        flat_std: blocks whose luma standard deviation is at or below this
            value (8-bit units) are treated as flat single-class regions and
            decided directly from their mean luma; 0 disables the shortcut.
        min_area: instances smaller than this many pixels are removed.
        solidity_threshold: components less solid than this are candidates
            for concavity splitting.
        max_iterations: hard cap on morphological refinement passes.
        contrast_low / contrast_high: percentile pair for the global
            per-channel contrast stretch.
        channel_mode: "P" for the per-block principal component channel,
            "L" for CIELAB lightness (ablation path).
    """

    block_size: int = 50
    histogram_bins: int = 32
    smooth_radius: int = 2
    peak_min_fraction: float = 0.1
    peak_min_separation: int = 3
    dominance_ratio: float = 0.15
    background_p_cutoff: float = 0.5
    flat_std: float = 8.0
    min_area: int = 30
    solidity_threshold: float = 0.88
    max_iterations: int = 10
    contrast_low: float = 0.01
    contrast_high: float = 0.99
    channel_mode: str = "P"

    def __post_init__(self) -> None:
        if self.block_size < 8:
            raise ValueError(f"block_size must be >= 8, got {self.block_size}")
        if self.histogram_bins < 8:
            raise ValueError(f"histogram_bins must be >= 8, got {self.histogram_bins}")
        if self.smooth_radius < 0:
            raise ValueError(f"smooth_radius must be >= 0, got {self.smooth_radius}")
        if not 0.0 <= self.peak_min_fraction <= 1.0:
            raise ValueError(f"peak_min_fraction must be in [0, 1], got {self.peak_min_fraction}")
        if self.peak_min_separation < 1:
            raise ValueError(f"peak_min_separation must be >= 1, got {self.peak_min_separation}")
        if not 0.0 <= self.dominance_ratio <= 0.5:
            raise ValueError(f"dominance_ratio must be in [0, 0.5], got {self.dominance_ratio}")
        if not 0.0 < self.background_p_cutoff < 1.0:
            raise ValueError(f"background_p_cutoff must be in (0, 1), got {self.background_p_cutoff}")
        if self.flat_std < 0.0:
            raise ValueError(f"flat_std must be >= 0, got {self.flat_std}")
        if self.min_area < 1:
            raise ValueError(f"min_area must be >= 1, got {self.min_area}")
        if not 0.0 < self.solidity_threshold <= 1.0:
            raise ValueError(f"solidity_threshold must be in (0, 1], got {self.solidity_threshold}")
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if not 0.0 <= self.contrast_low < self.contrast_high <= 1.0:
            raise ValueError(
                f"contrast percentiles must satisfy 0 <= low < high <= 1, "
                f"got ({self.contrast_low}, {self.contrast_high})"
            )
        if self.channel_mode not in CHANNEL_MODES:
            raise ValueError(f"channel_mode must be one of {CHANNEL_MODES}, got {self.channel_mode!r}")

    def to_text(self) -> str:
        """Serialize as one ``key = value`` line per field, in field order."""
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {value!r}" if isinstance(value, str) else f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PipelineConfig":
        """Parse the key=value format written by :meth:`to_text`.

        Raises ValueError on unknown keys, duplicate keys, missing '=' or
        values that do not parse as the field's type.
        """
        field_types = {f.name: f.type for f in dataclasses.fields(cls)}
        seen: dict[str, object] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in field_types:
                raise ValueError(f"line {lineno}: unknown config key {key!r}")
            if key in seen:
                raise ValueError(f"line {lineno}: duplicate config key {key!r}")
            seen[key] = _parse_value(key, value, field_types[key], lineno)
        return cls(**seen)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def _parse_value(key: str, value: str, typ: object, lineno: int):
    # dataclass field types arrive as strings under `from __future__ import annotations`
    name = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    try:
        if name == "int":
            return int(value)
        if name == "float":
            return float(value)
        if name == "str":
            if len(value) >= 2 and value[0] == value[-1] and value[0] in "'\"":
                return value[1:-1]
            return value
    except ValueError as exc:
        raise ValueError(f"line {lineno}: key {key!r}: {exc}") from exc
    raise ValueError(f"line {lineno}: key {key!r} has unsupported type {name}")
