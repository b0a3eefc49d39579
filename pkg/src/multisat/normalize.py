"""Per-sensor pixel normalization into the ``[0, 255]`` float range.

Both maps are applied once, upstream of pre-training and fine-tuning alike.
They are not idempotent; the tile's ``normalization_id`` guards against a
second application.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .datamodel import S1, S2, Tile, ValidationError

S1_DB_RANGE = (-20.0, 5.0)
S2_HI_DN = 10000.0


class NormalizationError(ValueError):
    pass


@dataclass(frozen=True)
class NormalizationSpec:
    id: str
    kind: str  # "clip_linear" | "log_scale"
    lo: float
    hi: float

    def __post_init__(self):
        if self.kind not in ("clip_linear", "log_scale"):
            raise NormalizationError(f"unknown normalization kind {self.kind!r}")
        if not self.lo < self.hi:
            raise NormalizationError(f"{self.id}: lo must be < hi")


S1_SPEC = NormalizationSpec("s1_clip_db_-20_5", "clip_linear", *S1_DB_RANGE)
S2_SPEC = NormalizationSpec("s2_log1p_10000", "log_scale", 0.0, S2_HI_DN)
REGISTRY = {S1_SPEC.id: S1_SPEC, S2_SPEC.id: S2_SPEC}


def _finite(x: np.ndarray):
    if not np.all(np.isfinite(x)):
        raise NormalizationError("input contains non-finite values")


def clip_linear_scale(x, lo: float, hi: float) -> np.ndarray:
    if not lo < hi:
        raise NormalizationError(f"clip range needs lo < hi, got [{lo}, {hi}]")
    x = np.asarray(x, dtype=np.float64)
    _finite(x)
    return 255.0 * np.clip((x - lo) / (hi - lo), 0.0, 1.0)


def log_scale(x, hi_dn: float = S2_HI_DN) -> tuple[np.ndarray, int]:
    """``255 * clamp(ln(1+x) / ln(1+hi_dn), 0, 1)``; negatives are clamped to 0 first.

    Returns the scaled array and the number of negative inputs clamped.
    """
    if hi_dn <= 0:
        raise NormalizationError("hi_dn must be positive")
    x = np.asarray(x, dtype=np.float64)
    _finite(x)
    neg = int(np.count_nonzero(x < 0))
    x = np.maximum(x, 0.0)
    return 255.0 * np.clip(np.log1p(x) / math.log1p(hi_dn), 0.0, 1.0), neg


class NegativePixelCounter:
    """Running count of negative S2 digital numbers clamped before the log."""

    def __init__(self):
        self.count = 0

    def add(self, n: int):
        self.count += n


negative_pixels = NegativePixelCounter()


def _check(tile: Tile, modality: str):
    if tile.modality != modality:
        raise ValidationError(f"expected a {modality} tile, got {tile.modality}")
    if tile.normalization_id is not None:
        raise NormalizationError(f"tile already normalized ({tile.normalization_id})")


def normalize_s1(tile: Tile) -> Tile:
    _check(tile, S1)
    # Kept in float64; rounding to single precision happens only when a tile is written.
    out = clip_linear_scale(tile.pixels, S1_SPEC.lo, S1_SPEC.hi)
    return tile.with_pixels(out, S1_SPEC.id)


def normalize_s2(tile: Tile, hi_dn: float = S2_HI_DN) -> Tile:
    _check(tile, S2)
    out, neg = log_scale(tile.pixels, hi_dn)
    negative_pixels.add(neg)
    spec_id = S2_SPEC.id if hi_dn == S2_HI_DN else f"s2_log1p_{hi_dn:g}"
    return tile.with_pixels(out, spec_id)


def normalize_tile(tile: Tile) -> Tile:
    return normalize_s1(tile) if tile.modality == S1 else normalize_s2(tile)


def manifest_normalization_id() -> str:
    return f"{S1_SPEC.id}+{S2_SPEC.id}"
