"""Per-block data-driven color transform.

Each block's RGB pixel cloud is decorrelated with PCA.  The first principal
component carries nearly all of the color variance in stained tissue, so the
pipeline keeps only that projection ("P"), sign-oriented so that brighter
pixels score higher, and min-max normalized to [0, 1].  The CIELAB lightness
channel is also provided, purely as an ablation alternative to P.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

REC601_LUMA = np.array([0.299, 0.587, 0.114])

# sRGB -> XYZ (D65) middle row, i.e. the Y coefficients
_SRGB_Y = np.array([0.2126729, 0.7151522, 0.0721750])


class ZeroCorrelationWarning(UserWarning):
    """Sign orientation found exactly zero covariance with luminance."""


@dataclass(frozen=True)
class EigenDecomp:
    """Eigenvalues (descending) and matching unit eigenvectors (columns)."""

    values: np.ndarray   # shape (3,), values[0] >= values[1] >= values[2]
    vectors: np.ndarray  # shape (3, 3), vectors[:, i] pairs with values[i]


def block_covariance(pixels: np.ndarray) -> np.ndarray:
    """Sample covariance of a block's RGB values, divisor n.

    The population divisor keeps the energy-conservation identity exact:
    the eigenvalue sum equals the mean squared deviation of the pixels.
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 3)
    n = pixels.shape[0]
    if n < 2:
        raise ValueError(f"covariance needs at least 2 pixels, got {n}")
    centered = pixels - pixels.mean(axis=0)
    cov = centered.T @ centered / n
    return (cov + cov.T) / 2.0


def eigen3(m: np.ndarray) -> EigenDecomp:
    """Eigendecomposition of a symmetric PSD 3x3 matrix, sorted descending."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError(f"expected 3x3 matrix, got shape {m.shape}")
    scale = 1.0 + float(np.abs(m).max())
    if float(np.abs(m - m.T).max()) > 1e-8 * scale:
        raise ValueError("matrix is not symmetric within tolerance")
    values, vectors = np.linalg.eigh(m)
    trace = float(np.trace(m))
    if values[0] < -1e-9 * (1.0 + abs(trace)):
        raise ValueError(f"matrix is not PSD within tolerance (lambda_min={values[0]})")
    return EigenDecomp(values=values[::-1].copy(), vectors=vectors[:, ::-1].copy())


def project(pixels: np.ndarray, mean: np.ndarray, axis: np.ndarray) -> np.ndarray:
    """Project centered pixels onto a unit axis: dot(pixel - mean, axis)."""
    axis = np.asarray(axis, dtype=np.float64)
    norm = float(np.linalg.norm(axis))
    if abs(norm - 1.0) > 1e-9:
        raise ValueError(f"projection axis must be unit length, |axis| = {norm}")
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 3)
    return (pixels - np.asarray(mean, dtype=np.float64)) @ axis


def rec601_luma(pixels: np.ndarray) -> np.ndarray:
    """Y = 0.299 R + 0.587 G + 0.114 B, used only for sign decisions."""
    return np.asarray(pixels, dtype=np.float64).reshape(-1, 3) @ REC601_LUMA


def orient_sign(raw_p: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    """Flip the raw projection so brighter pixels score higher on average.

    An eigenvector is only defined up to sign; the covariance of the raw
    projection with luminance decides which sign maps background (bright)
    to high values.  Exactly zero covariance keeps the input sign and warns.
    """
    raw_p = np.asarray(raw_p, dtype=np.float64).reshape(-1)
    luma = rec601_luma(pixels)
    if raw_p.shape != luma.shape:
        raise ValueError("raw projection and pixels must align one-to-one")
    cov = float(np.dot(raw_p - raw_p.mean(), luma - luma.mean())) / raw_p.size
    if cov < 0.0:
        return -raw_p
    if cov == 0.0:
        warnings.warn(
            "projection is uncorrelated with luminance; keeping original sign",
            ZeroCorrelationWarning,
            stacklevel=2,
        )
    return raw_p


def normalize01(field: np.ndarray) -> tuple[np.ndarray, bool]:
    """Min-max scale a scalar field to [0, 1].

    Returns the scaled field and a degeneracy flag.  A constant field has no
    range to scale; it maps to all 0.5 with the flag set, and the caller is
    expected to treat such blocks as pure background.
    """
    field = np.asarray(field, dtype=np.float64)
    if field.size == 0:
        raise ValueError("cannot normalize an empty field")
    lo = float(field.min())
    hi = float(field.max())
    if hi == lo:
        return np.full_like(field, 0.5), True
    return (field - lo) / (hi - lo), False


def energy_distribution(values: np.ndarray) -> np.ndarray:
    """Eigenvalue energy fractions (lambda_i / sum), descending order."""
    values = np.asarray(values, dtype=np.float64)
    total = float(values.sum())
    if total <= 0.0:
        raise ValueError("constant block: total energy is zero")
    return values / total


def srgb_lightness(pixels: np.ndarray) -> np.ndarray:
    """CIELAB L* of 8-bit sRGB pixels under D65, in [0, 100]."""
    rgb = np.asarray(pixels, dtype=np.float64).reshape(-1, 3) / 255.0
    linear = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    y = linear @ _SRGB_Y
    delta = 6.0 / 29.0
    f = np.where(y > delta**3, np.cbrt(y), y / (3.0 * delta**2) + 4.0 / 29.0)
    return 116.0 * f - 16.0


@dataclass(frozen=True)
class ChannelResult:
    """Normalized scalar channel for one block plus diagnostics."""

    values: np.ndarray            # flat, in [0, 1]
    degenerate: bool              # constant-color block, values are all 0.5
    energy: np.ndarray | None     # (P, Q, R) energy fractions; None in L mode or degenerate


def block_channel(pixels: np.ndarray, mode: str = "P") -> ChannelResult:
    """Compute the normalized decision channel for one block of pixels.

    Mode "P": PCA projection onto the leading eigenvector, sign-oriented by
    luminance, min-max normalized.  Mode "L": CIELAB lightness, min-max
    normalized.  Blocks too small or constant come back degenerate.
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 3)
    if mode == "L":
        values, degenerate = normalize01(srgb_lightness(pixels))
        return ChannelResult(values=values, degenerate=degenerate, energy=None)
    if mode != "P":
        raise ValueError(f"unknown channel mode {mode!r}")
    if pixels.shape[0] < 2:
        return ChannelResult(values=np.full(pixels.shape[0], 0.5), degenerate=True, energy=None)
    cov = block_covariance(pixels)
    if float(np.trace(cov)) == 0.0:
        return ChannelResult(values=np.full(pixels.shape[0], 0.5), degenerate=True, energy=None)
    decomp = eigen3(cov)
    raw = project(pixels, pixels.mean(axis=0), decomp.vectors[:, 0])
    oriented = orient_sign(raw, pixels)
    values, degenerate = normalize01(oriented)
    energy = None if degenerate else energy_distribution(decomp.values)
    return ChannelResult(values=values, degenerate=degenerate, energy=energy)
