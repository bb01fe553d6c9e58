"""Procedural matting data, training-sample augmentation, Random Alpha Blending
and real-world image degradations.

Every random choice flows through an explicit ``numpy.random.Generator``;
:func:`sample_rng` derives an independent stream per ``(seed, index)`` so
results do not depend on how samples are spread over workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import cv2
import numpy as np

from .core import MattingSample, clamp01, composite, merge_foregrounds, resample, unknown_region
from .guidance import PerturbConfig, cutmask, perturb_guidance, sample_cutmask_fraction

GENERATORS = ("soft_disk", "linear_ramp", "fractal_hair", "checker_texture")
TRANSPARENT_GENERATORS = ("checker_texture",)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


@dataclass
class SynthSpec:
    canvas: tuple[int, int] = (64, 64)
    generators: tuple[str, ...] = GENERATORS
    count: int = 8
    rng_seed: int = 0
    exclude_transparent: bool = False

    def __post_init__(self):
        self.canvas = tuple(self.canvas)
        self.generators = tuple(self.generators)
        bad = set(self.generators) - set(GENERATORS)
        if bad:
            raise ValueError(f"unknown generators {sorted(bad)}")
        if self.exclude_transparent:
            self.generators = tuple(g for g in self.generators if g not in TRANSPARENT_GENERATORS)
        if not self.generators:
            raise ValueError("no generators left")


@dataclass
class RealWorldConfig:
    jpeg_quality_range: tuple[int, int] = (60, 95)
    blur_sigma_range: tuple[float, float] = (0.0, 3.0)
    noise_std_range: tuple[float, float] = (0.0, 0.03)


@dataclass
class AugmentConfig:
    two_fg_prob: float = 0.5
    resize_range: tuple[float, float] = (0.75, 1.25)
    interpolations: tuple[str, ...] = ("nearest", "bilinear", "area", "cubic")
    rotation_deg: float = 30.0
    shear_deg: float = 10.0
    scale_range: tuple[float, float] = (0.8, 1.25)
    flip_prob: float = 0.5
    brightness: float = 0.1
    contrast: float = 0.1
    saturation: float = 0.1
    crop_size: int = 64
    cutmask_prob: float = 0.25
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    realworld: Optional[RealWorldConfig] = None
    use_composition_loss: bool = True

    def __post_init__(self):
        if self.crop_size % 8:
            raise ValueError("crop_size must be divisible by 8")
        if isinstance(self.perturb, dict):
            self.perturb = PerturbConfig(**self.perturb)
        if isinstance(self.realworld, dict):
            self.realworld = RealWorldConfig(**self.realworld)
        if self.realworld is not None and self.use_composition_loss:
            raise ValueError("real-world degradations break compositing; disable the composition loss")

    @classmethod
    def identity(cls, crop_size: int = 64) -> "AugmentConfig":
        """No merging, geometric or colour changes and no guidance corruption."""
        return cls(two_fg_prob=0.0, resize_range=(1.0, 1.0), interpolations=("bilinear",),
                   rotation_deg=0.0, shear_deg=0.0, scale_range=(1.0, 1.0), flip_prob=0.0,
                   brightness=0.0, contrast=0.0, saturation=0.0, crop_size=crop_size,
                   cutmask_prob=0.0, perturb=PerturbConfig(morph_kernel_range=(1, 1)))


# --- procedural content ----------------------------------------------------------


def _grid(h, w):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return yy + 0.5, xx + 0.5


def smooth_color_field(h: int, w: int, rng: np.random.Generator, cells: int = 4) -> np.ndarray:
    """Low-frequency random RGB field."""
    coarse = rng.uniform(0.0, 1.0, size=(cells, cells, 3))
    return resample(coarse, h, w, "bilinear")


def soft_disk(h, w, cy, cx, radius, feather) -> np.ndarray:
    """1 inside ``radius - feather``, 0 beyond ``radius + feather``, linear in between."""
    yy, xx = _grid(h, w)
    dist = np.hypot(yy - cy, xx - cx)
    return clamp01((radius + feather - dist) / (2.0 * feather))


def linear_ramp(h, w, angle, offset, width) -> np.ndarray:
    yy, xx = _grid(h, w)
    s = (xx - w / 2) * math.cos(angle) + (yy - h / 2) * math.sin(angle) - offset
    return clamp01(0.5 + s / width)


def _random_disk(h, w, rng):
    r = rng.uniform(0.18, 0.3) * min(h, w)
    f = rng.uniform(1.5, 0.25 * r)
    cy = rng.uniform(0.35, 0.65) * h
    cx = rng.uniform(0.35, 0.65) * w
    return soft_disk(h, w, cy, cx, r, f), (cy, cx, r)


def fractal_hair(h, w, rng, supersample: int = 4) -> np.ndarray:
    """Opaque blob with random-walk filaments rendered at sub-pixel width."""
    body, (cy, cx, r) = _random_disk(h, w, rng)
    s = supersample
    canvas = np.zeros((h * s, w * s), np.uint8)
    for _ in range(int(rng.integers(12, 24))):
        theta = rng.uniform(0, 2 * math.pi)
        y, x = (cy + r * math.sin(theta)) * s, (cx + r * math.cos(theta)) * s
        heading = theta
        pts = [(x, y)]
        for _ in range(int(rng.integers(20, 40))):
            heading += rng.normal(0.0, 0.35)
            y += 1.5 * s * math.sin(heading)
            x += 1.5 * s * math.cos(heading)
            pts.append((x, y))
        poly = np.round(np.array(pts)).astype(np.int32).reshape(-1, 1, 2)
        cv2.polylines(canvas, [poly], False, 255, thickness=1)
    strands = cv2.resize(canvas.astype(np.float64) / 255.0, (w, h), interpolation=cv2.INTER_AREA)
    return np.maximum(body, clamp01(strands))


def checker_texture(h, w, rng) -> np.ndarray:
    """Disk whose interior alternates opaque and semi-transparent cells."""
    body, _ = _random_disk(h, w, rng)
    cell = int(rng.integers(3, 8))
    yy, xx = np.mgrid[0:h, 0:w]
    checker = np.where(((yy // cell) + (xx // cell)) % 2 == 0, 1.0, rng.uniform(0.3, 0.7))
    return body * checker


def generate_alpha(kind: str, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    if kind == "soft_disk":
        return _random_disk(h, w, rng)[0]
    if kind == "linear_ramp":
        angle = rng.uniform(0, 2 * math.pi)
        offset = rng.uniform(-0.15, 0.15) * min(h, w)
        width = rng.uniform(3.0, 0.3 * min(h, w))
        return linear_ramp(h, w, angle, offset, width)
    if kind == "fractal_hair":
        return fractal_hair(h, w, rng)
    if kind == "checker_texture":
        return checker_texture(h, w, rng)
    raise ValueError(f"unknown generator {kind!r}")


def generate_foreground(spec: SynthSpec, rng: np.random.Generator, kind: Optional[str] = None):
    """Return ``(alpha, fg)``; ``fg`` is defined on the whole canvas."""
    h, w = spec.canvas
    kind = kind or spec.generators[int(rng.integers(len(spec.generators)))]
    alpha = generate_alpha(kind, h, w, rng)
    fg = smooth_color_field(h, w, rng, cells=3)
    return alpha, fg


def generate_background(shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Smooth colour field plus oriented stripes, so background has texture."""
    h, w = shape
    base = smooth_color_field(h, w, rng, cells=5)
    yy, xx = _grid(h, w)
    angle = rng.uniform(0, math.pi)
    freq = rng.uniform(0.15, 0.6)
    stripes = 0.5 + 0.5 * np.sin(freq * (xx * math.cos(angle) + yy * math.sin(angle)))
    amp = rng.uniform(0.1, 0.3)
    return clamp01(base * (1 - amp) + amp * stripes[..., None] * rng.uniform(0, 1, size=3))


def make_pools(spec: SynthSpec, n_fg: int, n_bg: int, seed: Optional[int] = None):
    """Foreground pool of ``(alpha, fg)`` pairs and a background pool."""
    seed = spec.rng_seed if seed is None else seed
    fgs = [generate_foreground(spec, sample_rng(seed, i)) for i in range(n_fg)]
    bgs = [generate_background(spec.canvas, sample_rng(seed, 10_000 + i)) for i in range(n_bg)]
    return fgs, bgs


# --- augmentation ----------------------------------------------------------------

_CV_INTERP = {"nearest": cv2.INTER_NEAREST, "bilinear": cv2.INTER_LINEAR,
              "area": cv2.INTER_AREA, "cubic": cv2.INTER_CUBIC}


def _random_resize(alpha, fg, aug, rng):
    lo, hi = aug.resize_range
    if lo == hi == 1.0:
        return alpha, fg
    s = rng.uniform(lo, hi)
    interp = _CV_INTERP[aug.interpolations[int(rng.integers(len(aug.interpolations)))]]
    h, w = alpha.shape
    nh, nw = max(1, int(round(h * s))), max(1, int(round(w * s)))
    alpha = clamp01(cv2.resize(alpha, (nw, nh), interpolation=interp))
    fg = clamp01(cv2.resize(fg, (nw, nh), interpolation=interp))
    return alpha, fg


def _random_affine(alpha, fg, aug, rng):
    rot = rng.uniform(-aug.rotation_deg, aug.rotation_deg)
    shear = rng.uniform(-aug.shear_deg, aug.shear_deg)
    scale = rng.uniform(*aug.scale_range)
    flip = rng.uniform() < aug.flip_prob
    if rot == 0 and shear == 0 and scale == 1 and not flip:
        return alpha, fg
    h, w = alpha.shape
    c = np.array([w / 2, h / 2])
    t = math.radians(rot)
    sh = math.tan(math.radians(shear))
    lin = scale * np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]]) @ np.array([[1, sh], [0, 1]])
    if flip:
        lin = lin @ np.array([[-1, 0], [0, 1]])
    m = np.hstack([lin, (c - lin @ c)[:, None]])
    alpha = cv2.warpAffine(alpha, m, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    fg = cv2.warpAffine(fg, m, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT)
    return clamp01(alpha), clamp01(fg)


def _color_jitter(fg, aug, rng):
    if not (aug.brightness or aug.contrast or aug.saturation):
        return fg
    out = fg + rng.uniform(-aug.brightness, aug.brightness)
    mean = out.mean()
    out = (out - mean) * (1 + rng.uniform(-aug.contrast, aug.contrast)) + mean
    gray = out.mean(axis=2, keepdims=True)
    out = (out - gray) * (1 + rng.uniform(-aug.saturation, aug.saturation)) + gray
    return clamp01(out)


def _pad_to(alpha, fg, size):
    h, w = alpha.shape
    ph, pw = max(0, size - h), max(0, size - w)
    if ph or pw:
        alpha = np.pad(alpha, ((0, ph), (0, pw)))
        fg = np.pad(fg, ((0, ph), (0, pw), (0, 0)), mode="edge")
    return alpha, fg


def choose_crop(alpha: np.ndarray, size: int, rng: np.random.Generator):
    """Top-left corner of a ``size`` crop centred on a random unknown pixel, plus that pixel."""
    h, w = alpha.shape
    ys, xs = np.nonzero((alpha > 0) & (alpha < 1))
    if len(ys):
        i = int(rng.integers(len(ys)))
        cy, cx = int(ys[i]), int(xs[i])
    else:
        cy, cx = h // 2, w // 2
    top = min(max(cy - size // 2, 0), h - size)
    left = min(max(cx - size // 2, 0), w - size)
    return top, left, (cy - top, cx - left)


def _fit_background(bg, size, rng):
    h, w = bg.shape[:2]
    if h < size or w < size:
        bg = resample(bg, max(h, size), max(w, size), "bilinear")
        h, w = bg.shape[:2]
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return bg[top:top + size, left:left + size].copy()


def make_training_sample(fg_pool: Sequence, bg_pool: Sequence, aug: AugmentConfig,
                         rng: np.random.Generator) -> MattingSample:
    """One augmented, cropped and composited sample with a perturbed guidance mask."""
    if not fg_pool or not bg_pool:
        raise ValueError("pools must be non-empty")
    i = int(rng.integers(len(fg_pool)))
    alpha, fg = (np.asarray(x, dtype=np.float64) for x in fg_pool[i])
    meta = {"fg_index": i}
    if aug.two_fg_prob > 0 and rng.uniform() < aug.two_fg_prob:
        j = int(rng.integers(len(fg_pool)))
        a2, f2 = fg_pool[j]
        if a2.shape != alpha.shape:
            a2 = resample(a2, *alpha.shape, "bilinear")
            f2 = resample(f2, *alpha.shape, "bilinear")
        alpha, fg = merge_foregrounds(alpha, fg, a2, f2)
        meta["fg2_index"] = j

    alpha, fg = _random_resize(alpha, fg, aug, rng)
    alpha, fg = _random_affine(alpha, fg, aug, rng)
    fg = _color_jitter(fg, aug, rng)

    size = aug.crop_size
    alpha, fg = _pad_to(alpha, fg, size)
    top, left, center = choose_crop(alpha, size, rng)
    alpha = alpha[top:top + size, left:left + size].copy()
    fg = fg[top:top + size, left:left + size].copy()
    meta["crop_center"] = center

    k = int(rng.integers(len(bg_pool)))
    bg = _fit_background(np.asarray(bg_pool[k], dtype=np.float64), size, rng)
    meta["bg_index"] = k
    image = composite(alpha, fg, bg)

    guide = perturb_guidance(alpha, aug.perturb, rng)
    if aug.cutmask_prob > 0 and rng.uniform() < aug.cutmask_prob:
        guide = cutmask(guide, sample_cutmask_fraction(aug.perturb, guide.shape, rng), rng)

    if aug.realworld is not None:
        image = apply_realworld_noise(image, aug.realworld, rng)
    meta["use_composition_loss"] = aug.realworld is None and aug.use_composition_loss
    return MattingSample(image=image, alpha=alpha, foreground=fg, background=bg, guidance=guide,
                         unknown_region=unknown_region(alpha), meta=meta)


def make_rab_sample(fg_pool: Sequence[np.ndarray], alpha_pool: Sequence[np.ndarray],
                    bg_pool: Sequence[np.ndarray], rng: np.random.Generator) -> MattingSample:
    """Random Alpha Blending: an unrelated random alpha blends a random foreground over a random background.

    ``fg_pool`` holds colour images (or ``(alpha, fg)`` pairs, whose colour is used).
    """
    if not fg_pool or not alpha_pool or not bg_pool:
        raise ValueError("pools must be non-empty")
    i = int(rng.integers(len(fg_pool)))
    j = int(rng.integers(len(alpha_pool)))
    k = int(rng.integers(len(bg_pool)))
    fg = fg_pool[i][1] if isinstance(fg_pool[i], tuple) else fg_pool[i]
    alpha = alpha_pool[j][0] if isinstance(alpha_pool[j], tuple) else alpha_pool[j]
    fg = np.asarray(fg, dtype=np.float64)
    h, w = fg.shape[:2]
    alpha = resample(np.asarray(alpha, dtype=np.float64), h, w, "bilinear")
    bg = np.asarray(bg_pool[k], dtype=np.float64)
    if bg.shape[:2] != (h, w):
        bg = resample(bg, h, w, "bilinear")
    image = composite(alpha, fg, bg)
    return MattingSample(image=image, alpha=alpha, foreground=fg, background=bg, guidance=alpha.copy(),
                         unknown_region=unknown_region(alpha), detail_region=None,
                         meta={"fg_index": i, "alpha_index": j, "bg_index": k, "supervision": "full"})


# --- real-world degradations -------------------------------------------------------


def degrade(image: np.ndarray, quality: int, sigma: float, noise_std: float,
            rng: np.random.Generator) -> np.ndarray:
    """JPEG round trip, then Gaussian blur, then additive Gaussian noise.

    ``quality >= 100`` is treated as lossless: baseline JPEG at quality 100 still
    moves values by up to 4/255 through 8-bit YCbCr rounding, so the step is skipped.
    """
    if quality >= 100:
        out = clamp01(np.asarray(image, dtype=np.float64))
    else:
        u8 = np.rint(clamp01(image) * 255).astype(np.uint8)[..., ::-1]
        params = [cv2.IMWRITE_JPEG_QUALITY, int(quality),
                  cv2.IMWRITE_JPEG_SAMPLING_FACTOR, cv2.IMWRITE_JPEG_SAMPLING_FACTOR_444]
        ok, buf = cv2.imencode(".jpg", np.ascontiguousarray(u8), params)
        if not ok:
            raise RuntimeError("JPEG encoding failed")
        out = cv2.imdecode(buf, cv2.IMREAD_COLOR)[..., ::-1].astype(np.float64) / 255.0
    if sigma > 0:
        out = cv2.GaussianBlur(out, (0, 0), sigmaX=sigma, sigmaY=sigma, borderType=cv2.BORDER_REFLECT_101)
    if noise_std > 0:
        out = out + rng.normal(0.0, noise_std, size=out.shape)
    return clamp01(out)


def apply_realworld_noise(image: np.ndarray, cfg: RealWorldConfig, rng: np.random.Generator) -> np.ndarray:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) image")
    q = int(rng.integers(cfg.jpeg_quality_range[0], cfg.jpeg_quality_range[1] + 1))
    sigma = rng.uniform(*cfg.blur_sigma_range)
    std = rng.uniform(*cfg.noise_std_range)
    return degrade(image, q, sigma, std, rng)
