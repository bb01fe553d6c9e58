"""Guidance masks: binarization, morphology, random perturbation, CutMask, trimaps."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

TRIMAP_UNKNOWN = 0.5
MORPH_OPS = ("dilate", "erode", "dilate_erode", "erode_dilate")


@dataclass
class PerturbConfig:
    binarize_threshold_range: tuple[float, float] = (0.0, 1.0)
    morph_kernel_range: tuple[int, int] = (1, 30)
    cutmask_fraction_range: tuple[float, float] = (0.25, 0.5)
    rng_seed: int = 0

    def __post_init__(self):
        lo, hi = self.binarize_threshold_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"bad threshold range {self.binarize_threshold_range}")
        klo, khi = self.morph_kernel_range
        if not 1 <= klo <= khi:
            raise ValueError(f"bad kernel range {self.morph_kernel_range}")
        flo, fhi = self.cutmask_fraction_range
        if not 0.0 < flo <= fhi < 1.0:
            raise ValueError(f"bad cutmask fraction range {self.cutmask_fraction_range}")


def odd_kernel(k: int) -> int:
    """Round a kernel size up to the nearest odd integer."""
    k = int(k)
    return k if k % 2 else k + 1


def _check_kernel(k: int) -> int:
    if int(k) != k or k < 1 or k % 2 == 0:
        raise ValueError(f"kernel size must be a positive odd integer, got {k}")
    return int(k)


def binarize(alpha: np.ndarray, threshold: float) -> np.ndarray:
    # ties go to background
    return (alpha > threshold).astype(np.float64)


def dilate(mask: np.ndarray, k: int) -> np.ndarray:
    """Square k x k dilation, zero padding outside the image."""
    k = _check_kernel(k)
    if k == 1:
        return mask.astype(np.float64, copy=True)
    return ndimage.maximum_filter(mask.astype(np.float64), size=k, mode="constant", cval=0.0)


def erode(mask: np.ndarray, k: int) -> np.ndarray:
    """Square k x k erosion, one-padding outside the image."""
    k = _check_kernel(k)
    if k == 1:
        return mask.astype(np.float64, copy=True)
    return ndimage.minimum_filter(mask.astype(np.float64), size=k, mode="constant", cval=1.0)


def random_morphology(mask: np.ndarray, kernel_range: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    """Dilate and/or erode in a random order with random (odd) kernels.

    At least one of the two operations is always applied.
    """
    op = MORPH_OPS[rng.integers(len(MORPH_OPS))]
    lo, hi = kernel_range
    k1 = odd_kernel(rng.integers(lo, hi + 1))
    k2 = odd_kernel(rng.integers(lo, hi + 1))
    if op == "dilate":
        return dilate(mask, k1)
    if op == "erode":
        return erode(mask, k1)
    if op == "dilate_erode":
        return erode(dilate(mask, k1), k2)
    return dilate(erode(mask, k1), k2)


def perturb_guidance(
    alpha: np.ndarray, cfg: PerturbConfig, rng: Optional[np.random.Generator] = None
) -> np.ndarray:
    """Turn a ground-truth matte into a corrupted binary guidance mask.

    Binarizes at a uniformly drawn threshold, then applies random morphology.
    ``rng`` overrides the generator seeded from ``cfg.rng_seed``.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    t = rng.uniform(*cfg.binarize_threshold_range)
    return random_morphology(binarize(alpha, t), cfg.morph_kernel_range, rng)


def _patch_side(fraction: float, dim: int) -> int:
    side = int(round(fraction * dim))
    return max(1, min(side, dim))


def cutmask_boxes(shape: tuple[int, int], fraction, rng: np.random.Generator):
    """Pick equally sized source and destination rectangles.

    ``fraction`` is either one scalar or a per-axis ``(fh, fw)`` pair. Returns
    ``(src, dst)`` as ``(top, left, height, width)`` tuples.
    """
    h, w = shape
    fh, fw = (fraction, fraction) if np.isscalar(fraction) else fraction
    if min(fh * h, fw * w) < 1:
        raise ValueError("cutmask patch would be smaller than one pixel")
    ph, pw = _patch_side(fh, h), _patch_side(fw, w)
    src = (int(rng.integers(0, h - ph + 1)), int(rng.integers(0, w - pw + 1)), ph, pw)
    dst = (int(rng.integers(0, h - ph + 1)), int(rng.integers(0, w - pw + 1)), ph, pw)
    return src, dst


def copy_patch(mask: np.ndarray, src, dst) -> np.ndarray:
    out = mask.copy()
    st, sl, ph, pw = src
    dt, dl = dst[:2]
    out[dt:dt + ph, dl:dl + pw] = mask[st:st + ph, sl:sl + pw]
    return out


def cutmask(mask: np.ndarray, fraction, rng: np.random.Generator) -> np.ndarray:
    """Overwrite one random patch of ``mask`` with the content of another."""
    src, dst = cutmask_boxes(mask.shape[:2], fraction, rng)
    return copy_patch(mask, src, dst)


def sample_cutmask_fraction(cfg: PerturbConfig, shape: tuple[int, int], rng: np.random.Generator):
    """Draw per-axis patch fractions, snapped so sides stay within the range bounds."""
    lo, hi = cfg.cutmask_fraction_range
    out = []
    for dim in shape:
        f = rng.uniform(lo, hi)
        side = min(max(round(f * dim), math.ceil(lo * dim)), math.floor(hi * dim))
        out.append(side / dim)
    return tuple(out)


def trimap_from_prob(
    prob: np.ndarray, fg_thresh: float = 0.95, bg_thresh: float = 0.05, unknown_dilate: int = 20
) -> np.ndarray:
    """Three-level trimap (0 / 0.5 / 1) from a foreground probability map.

    The unknown band is grown by ``unknown_dilate`` pixels (chessboard
    distance) on each side, overwriting neighbouring FG/BG labels.
    """
    if fg_thresh <= bg_thresh:
        raise ValueError("fg_thresh must exceed bg_thresh")
    fg = (prob > fg_thresh).astype(np.float64)
    bg = (prob < bg_thresh).astype(np.float64)
    k = 2 * int(unknown_dilate) + 1
    sure_fg = erode(fg, k)
    sure_bg = erode(bg, k)
    trimap = np.full(prob.shape, TRIMAP_UNKNOWN)
    trimap[sure_fg == 1] = 1.0
    trimap[sure_bg == 1] = 0.0
    return trimap


def _is_trimap(x: np.ndarray) -> bool:
    return bool(np.isin(x, (0.0, TRIMAP_UNKNOWN, 1.0)).all())


def _is_binary(x: np.ndarray) -> bool:
    return bool(np.isin(x, (0.0, 1.0)).all())


def encode_guidance(source: np.ndarray, mode: str) -> np.ndarray:
    """Convert a trimap, binary mask or soft matte into a guidance channel.

    ``trimapfg`` keeps only the confident foreground of a trimap,
    ``trimap_soft`` keeps the trimap as {0, 0.5, 1}, ``binary`` and
    ``soft_matte`` pass their input through.
    """
    source = np.asarray(source, dtype=np.float64)
    if mode == "trimapfg":
        if not _is_trimap(source):
            raise ValueError("trimapfg expects a trimap with values {0, 0.5, 1}")
        return (source == 1.0).astype(np.float64)
    if mode == "trimap_soft":
        if not _is_trimap(source):
            raise ValueError("trimap_soft expects a trimap with values {0, 0.5, 1}")
        return source.copy()
    if mode == "binary":
        if not _is_binary(source):
            raise ValueError("binary mode expects a {0, 1} mask")
        return source.copy()
    if mode == "soft_matte":
        if source.min() < 0 or source.max() > 1:
            raise ValueError("soft_matte expects values in [0, 1]")
        return source.copy()
    raise ValueError(f"unknown guidance mode {mode!r}")
