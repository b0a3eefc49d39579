"""Stochastic image augmentations on channels-last float arrays in ``[0, 255]``.

Every function takes an explicit ``numpy.random.Generator``; nothing touches a
global random state, so a pipeline replayed from the same generator state is
bitwise identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

PIXEL_MAX = 255.0
LUMA = np.array([0.299, 0.587, 0.114])
JITTER_STRENGTH_REF = 5.0
CROP_TRIES = 10

OPS = ("crop_resize", "flip_h", "flip_v", "color_jitter", "color_drop", "gaussian_blur")
PRESETS = ("multimodal_spatial", "simclr_s2", "simclr_s1", "simclr_s1_improved")


class AugmentError(ValueError):
    pass


# ---------------------------------------------------------------- geometry


def bilinear_resize(img: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Resize with half-pixel centers and edge clamping."""
    h, w = img.shape[:2]
    oh, ow = out_hw
    if (oh, ow) == (h, w):
        return img.astype(np.float64, copy=True)
    ys = np.clip((np.arange(oh) + 0.5) * (h / oh) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(ow) + 0.5) * (w / ow) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    img = img.astype(np.float64)
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def sample_crop_box(h: int, w: int, area_range, aspect_range, rng: np.random.Generator):
    """Return ``(top, left, height, width)`` of a random box.

    Each try draws a relative area, a log-uniform aspect ratio (width/height)
    and, when the box fits, its offset. After ``CROP_TRIES`` misses the whole
    image is used, centered.
    """
    a_lo, a_hi = area_range
    log_r = (math.log(aspect_range[0]), math.log(aspect_range[1]))
    for _ in range(CROP_TRIES):
        area = rng.uniform(a_lo, a_hi) * h * w
        aspect = math.exp(rng.uniform(*log_r))
        bw = int(round(math.sqrt(area * aspect)))
        bh = int(round(math.sqrt(area / aspect)))
        if 0 < bw <= w and 0 < bh <= h:
            top = int(rng.integers(0, h - bh + 1))
            left = int(rng.integers(0, w - bw + 1))
            return top, left, bh, bw
    return 0, 0, h, w


def distorted_bbox_crop(img, area_range=(0.2, 1.0), aspect_range=(3 / 4, 4 / 3),
                        out_hw=(256, 256), rng: np.random.Generator | None = None):
    img = np.asarray(img)
    h, w = img.shape[:2]
    if h * w <= 1:
        raise AugmentError("image must be larger than 1x1")
    if not (0 < area_range[0] <= area_range[1] <= 1):
        raise AugmentError(f"invalid area range {area_range}")
    if not (0 < aspect_range[0] <= aspect_range[1]):
        raise AugmentError(f"invalid aspect range {aspect_range}")
    top, left, bh, bw = sample_crop_box(h, w, area_range, aspect_range, rng)
    return bilinear_resize(img[top:top + bh, left:left + bw], tuple(out_hw))


def random_flip(img, p_h: float, p_v: float, rng: np.random.Generator):
    img = np.asarray(img)
    u_h, u_v = rng.random(2)
    if u_h < p_h:
        img = img[:, ::-1]
    if u_v < p_v:
        img = img[::-1]
    return img


# ---------------------------------------------------------------- photometric


def _brightness(img, f):
    return img * f


def _contrast(img, f):
    mean = (img @ LUMA).mean() if img.shape[-1] == 3 else img.mean()
    return (img - mean) * f + mean


def _saturation(img, f):
    gray = (img @ LUMA)[..., None]
    return (img - gray) * f + gray


def _hue(img, shift):
    hsv = rgb_to_hsv(np.clip(img, 0, PIXEL_MAX) / PIXEL_MAX)
    hsv[..., 0] = (hsv[..., 0] + shift) % 1.0
    return hsv_to_rgb(hsv) * PIXEL_MAX


def jitter_factors(strength: float, channels: int, rng: np.random.Generator) -> list[tuple[str, float]]:
    """Draw the ordered list of ``(op, factor)`` applied by :func:`color_jitter`."""
    s = strength / JITTER_STRENGTH_REF
    lo, hi = max(0.0, 1 - 0.8 * s), 1 + 0.8 * s
    ops = ["brightness", "contrast"]
    if channels == 3:
        ops += ["saturation", "hue"]
    order = rng.permutation(len(ops))
    out = []
    for i in order:
        name = ops[i]
        if name == "hue":
            out.append((name, rng.uniform(-0.2 * s, 0.2 * s)))
        else:
            out.append((name, rng.uniform(lo, hi)))
    return out


_JITTER = {"brightness": _brightness, "contrast": _contrast, "saturation": _saturation, "hue": _hue}


def color_jitter(img, strength: float, p: float, rng: np.random.Generator):
    if strength < 0:
        raise AugmentError("jitter strength must be nonnegative")
    img = np.asarray(img, dtype=np.float64)
    if strength == 0 or rng.random() >= p:
        return img
    for name, f in jitter_factors(strength, img.shape[-1], rng):
        img = _JITTER[name](img, f)
    return np.clip(img, 0.0, PIXEL_MAX)


def color_drop(img, p: float, rng: np.random.Generator):
    img = np.asarray(img, dtype=np.float64)
    if img.shape[-1] != 3:
        raise AugmentError(f"color drop needs 3 channels, got {img.shape[-1]}")
    if rng.random() >= p:
        return img
    gray = img @ LUMA
    return np.repeat(gray[..., None], 3, axis=-1)


def gaussian_kernel(sigma: float) -> np.ndarray:
    half = int(math.ceil(2 * sigma))
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return k / k.sum()


def blur_with_sigma(img, sigma: float) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    k = gaussian_kernel(sigma)
    half = len(k) // 2
    if half == 0:
        return img.copy()
    h, w = img.shape[:2]
    if half >= min(h, w):
        raise AugmentError(f"blur radius {half} too large for a {h}x{w} image")
    padded = np.pad(img, ((half, half), (0, 0), (0, 0)), mode="reflect")
    rows = sum(k[i] * padded[i:i + h] for i in range(len(k)))
    padded = np.pad(rows, ((0, 0), (half, half), (0, 0)), mode="reflect")
    return sum(k[i] * padded[:, i:i + w] for i in range(len(k)))


def gaussian_blur(img, strength: float, p: float, rng: np.random.Generator):
    if strength < 0:
        raise AugmentError("blur strength must be nonnegative")
    img = np.asarray(img, dtype=np.float64)
    if strength == 0 or rng.random() >= p:
        return img
    sigma = rng.uniform(0.1, max(0.1, 0.5 * strength))
    return blur_with_sigma(img, sigma)


# ---------------------------------------------------------------- pipelines


@dataclass(frozen=True)
class AugmentOpSpec:
    op: str
    probability: float = 1.0
    strength: float = 0.0
    area_range: tuple[float, float] = (0.2, 1.0)
    aspect_range: tuple[float, float] = (3 / 4, 4 / 3)
    out_hw: tuple[int, int] = (256, 256)

    def __post_init__(self):
        if self.op not in OPS:
            raise AugmentError(f"unknown op {self.op!r}")
        if not 0 <= self.probability <= 1:
            raise AugmentError("probability outside [0, 1]")
        if self.strength < 0:
            raise AugmentError("negative strength")
        if not (0 < self.area_range[0] <= self.area_range[1] <= 1):
            raise AugmentError("crop area range must lie in (0, 1]")
        if min(self.out_hw) <= 0:
            raise AugmentError("output size must be positive")


@dataclass(frozen=True)
class PipelineSpec:
    name: str
    ops: tuple[AugmentOpSpec, ...] = field(default_factory=tuple)
    channels: tuple[int, ...] = (2, 3)

    def __post_init__(self):
        if any(o.op == "color_drop" for o in self.ops) and self.channels != (3,):
            raise AugmentError(f"{self.name}: color_drop requires a 3-channel-only pipeline")

    def op_names(self) -> list[str]:
        return [o.op for o in self.ops]

    def get(self, op: str) -> AugmentOpSpec:
        return next(o for o in self.ops if o.op == op)

    def with_output_size(self, size: int) -> "PipelineSpec":
        ops = tuple(replace(o, out_hw=(size, size)) if o.op == "crop_resize" else o for o in self.ops)
        return replace(self, ops=ops)


def build_pipeline(name: str, out_size: int = 256, area_range=(0.2, 1.0),
                   aspect_range=(3 / 4, 4 / 3)) -> PipelineSpec:
    crop = AugmentOpSpec("crop_resize", 1.0, area_range=tuple(area_range),
                         aspect_range=tuple(aspect_range), out_hw=(out_size, out_size))
    flips = (AugmentOpSpec("flip_h", 0.5), AugmentOpSpec("flip_v", 0.5))
    if name == "multimodal_spatial":
        return PipelineSpec(name, (crop, *flips))
    # Baseline photometric settings; the improved SAR preset weakens only the jitter.
    jitter = AugmentOpSpec("color_jitter", 0.8, strength=6.0)
    blur = AugmentOpSpec("gaussian_blur", 0.5, strength=4.0)
    if name == "simclr_s2":
        return PipelineSpec(name, (crop, *flips, jitter, AugmentOpSpec("color_drop", 0.2), blur), channels=(3,))
    if name == "simclr_s1":
        return PipelineSpec(name, (crop, *flips, jitter, blur))
    if name == "simclr_s1_improved":
        return PipelineSpec(name, (crop, *flips, AugmentOpSpec("color_jitter", 0.5, strength=5.0), blur))
    raise AugmentError(f"unknown preset {name!r}; choose from {PRESETS}")


def apply_pipeline(img, spec: PipelineSpec, rng: np.random.Generator) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    c = img.shape[-1]
    if c not in spec.channels:
        raise AugmentError(f"{spec.name} does not accept {c}-channel input")
    for o in spec.ops:
        if o.op == "crop_resize":
            img = distorted_bbox_crop(img, o.area_range, o.aspect_range, o.out_hw, rng)
        elif o.op == "flip_h":
            img = random_flip(img, o.probability, 0.0, rng)
        elif o.op == "flip_v":
            img = random_flip(img, 0.0, o.probability, rng)
        elif o.op == "color_jitter":
            img = color_jitter(img, o.strength, o.probability, rng)
        elif o.op == "color_drop":
            img = color_drop(img, o.probability, rng)
        elif o.op == "gaussian_blur":
            img = gaussian_blur(img, o.strength, o.probability, rng)
    return np.ascontiguousarray(img)


def pair_streams(seed: int, *key: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Two independent generators for the two members of a positive pair."""
    a, b = np.random.SeedSequence([seed, *key]).spawn(2)
    return np.random.default_rng(a), np.random.default_rng(b)
