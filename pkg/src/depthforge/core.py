"""Depth/mask/image containers and validity semantics.

Depth maps are plain ``(H, W)`` float arrays where 0 marks a missing
measurement.  Masks are ``(H, W)`` bool arrays and RGB images are
``(H, W, 3)`` float arrays in [0, 1].  After normalization 0 becomes a
legal depth value, so downstream code always carries the validity mask
explicitly instead of relying on the sentinel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateRange, DimensionMismatch, InvalidRange


@dataclass(frozen=True)
class NormalizationParams:
    """Affine map ``n = scale * depth + shift`` onto [-1, 1]."""

    scale: float
    shift: float

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise InvalidRange(f"normalization scale must be > 0, got {self.scale}")


def as_depth(d, name: str = "depth") -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {d.shape}")
    if not np.all(np.isfinite(d)) or np.any(d < 0):
        raise InvalidRange(f"{name} must be finite and non-negative")
    return d


def as_mask(m, shape=None, name: str = "mask") -> np.ndarray:
    m = np.asarray(m)
    if m.dtype != bool:
        if not np.all((m == 0) | (m == 1)):
            raise InvalidRange(f"{name} values must be 0 or 1")
        m = m.astype(bool)
    if shape is not None and m.shape != tuple(shape):
        raise DimensionMismatch(f"{name} shape {m.shape} != {tuple(shape)}")
    return m


def as_rgb(img, shape=None) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionMismatch(f"rgb must be (H, W, 3), got {img.shape}")
    if shape is not None and img.shape[:2] != tuple(shape):
        raise DimensionMismatch(f"rgb shape {img.shape[:2]} != {tuple(shape)}")
    if np.any(~np.isfinite(img)) or img.min() < 0 or img.max() > 1:
        raise InvalidRange("rgb intensities must lie in [0, 1]")
    return img


def valid_mask(d) -> np.ndarray:
    return np.asarray(d) > 0


def ingest_depth(d, max_depth: float | None = None) -> np.ndarray:
    """Sanitize raw sensor depth: non-finite, negative and beyond-cap values become missing."""
    d = np.array(d, dtype=np.float64)
    bad = ~np.isfinite(d) | (d < 0)
    if max_depth is not None:
        bad |= d > max_depth
    d[bad] = 0.0
    return d


def normalize_depth(d, mask=None, quantiles: tuple[float, float] | None = None):
    """Map valid depths affinely onto [-1, 1].

    Statistics come from valid pixels only.  With ``quantiles=(lo, hi)``
    the low/high quantiles replace min/max and the result is clipped to
    [-1, 1]; this trades exact invertibility for robustness to outliers.

    Returns ``(d_norm, params)``; missing pixels are 0 in ``d_norm``.
    """
    d = as_depth(d)
    m = valid_mask(d) if mask is None else as_mask(mask, d.shape) & (d > 0)
    vals = d[m]
    if vals.size < 2:
        raise DegenerateRange("normalization needs at least two valid pixels")
    if quantiles is None:
        lo, hi = float(vals.min()), float(vals.max())
    else:
        lo, hi = (float(v) for v in np.quantile(vals, quantiles))
    if not hi > lo:
        raise DegenerateRange(f"depth range is degenerate (min=max={lo})")
    scale = 2.0 / (hi - lo)
    shift = -(hi + lo) / (hi - lo)
    out = np.zeros_like(d)
    out[m] = scale * vals + shift
    if quantiles is not None:
        out[m] = np.clip(out[m], -1.0, 1.0)
    return out, NormalizationParams(scale, shift)


def denormalize_depth(d_norm, p: NormalizationParams, mask=None) -> np.ndarray:
    """Inverse of :func:`normalize_depth`.  Pixels outside ``mask`` come back as 0."""
    d_norm = np.asarray(d_norm, dtype=np.float64)
    out = (d_norm - p.shift) / p.scale
    if mask is not None:
        out = np.where(as_mask(mask, d_norm.shape), out, 0.0)
    return out


def random_scale_shift(d, rng_seed: int, a_range=(0.5, 2.0), b_range=(-0.5, 0.5)) -> np.ndarray:
    """Training-style augmentation ``a * d + b`` on valid pixels.

    The shift is clamped so the smallest valid depth stays strictly
    positive, which keeps the validity mask unchanged.
    """
    d = as_depth(d)
    a_lo, a_hi = a_range
    b_lo, b_hi = b_range
    if a_lo <= 0 or a_hi < a_lo:
        raise InvalidRange(f"scale range must be positive and ordered, got {a_range}")
    if b_hi < b_lo:
        raise InvalidRange(f"shift range must be ordered, got {b_range}")
    rng = np.random.default_rng(rng_seed)
    a = rng.uniform(a_lo, a_hi)
    b = rng.uniform(b_lo, b_hi)
    m = d > 0
    if m.any():
        dmin = d[m].min()
        # keep at least 0.1% of the scaled minimum depth
        b = max(b, -a * dmin * 0.999)
    out = np.zeros_like(d)
    out[m] = a * d[m] + b
    return out
