"""Image / matte data model, compositing, resampling and PNG I/O.

Planes are plain numpy float64 arrays with values in [0, 1]:
``(H, W)`` for alpha mattes and region masks, ``(H, W, 3)`` for colour images.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import cv2
import numpy as np
import torch
import torch.nn.functional as F

MERGE_EPS = 1e-8
RESAMPLE_MODES = ("bilinear", "nearest", "area")


def clamp01(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 1.0)


def _check_hw(*planes: np.ndarray) -> None:
    shapes = {p.shape[:2] for p in planes}
    if len(shapes) != 1:
        raise ValueError(f"plane size mismatch: {sorted(shapes)}")


def composite(alpha: np.ndarray, fg: np.ndarray, bg: np.ndarray) -> np.ndarray:
    """Blend ``fg`` over ``bg``: I = alpha * F + (1 - alpha) * B."""
    if fg.ndim != 3 or bg.ndim != 3 or fg.shape[2] != 3 or bg.shape[2] != 3:
        raise ValueError("fg and bg must be (H, W, 3)")
    _check_hw(alpha, fg, bg)
    a = alpha[..., None] if alpha.ndim == 2 else alpha
    return clamp01(a * fg + (1.0 - a) * bg)


def resample(plane: np.ndarray, target_h: int, target_w: int, mode: str = "bilinear") -> np.ndarray:
    """Resize a plane to ``(target_h, target_w)``.

    ``bilinear`` uses half-pixel centres with edge clamping, ``nearest`` picks
    ``floor(dst * scale)`` and ``area`` is box-filter averaging.
    """
    if target_h < 1 or target_w < 1:
        raise ValueError(f"target size must be >= 1, got {(target_h, target_w)}")
    if mode not in RESAMPLE_MODES:
        raise ValueError(f"unknown resample mode {mode!r}")
    src = np.asarray(plane, dtype=np.float64)
    if src.shape[:2] == (target_h, target_w):
        return clamp01(src.copy())
    chw = src[None] if src.ndim == 2 else src.transpose(2, 0, 1)
    t = torch.from_numpy(np.ascontiguousarray(chw))[None]
    size = (target_h, target_w)
    if mode == "bilinear":
        out = F.interpolate(t, size=size, mode="bilinear", align_corners=False)
    elif mode == "nearest":
        out = F.interpolate(t, size=size, mode="nearest")
    else:
        out = F.adaptive_avg_pool2d(t, size)
    out = out[0].numpy()
    out = out[0] if src.ndim == 2 else out.transpose(1, 2, 0)
    return clamp01(out)


def merge_foregrounds(a1: np.ndarray, f1: np.ndarray, a2: np.ndarray, f2: np.ndarray):
    """Stack object 1 over object 2 (over-operator with alpha-weighted colour).

    Returns ``(alpha, fg)``. Where the merged alpha is 0 the colour of the
    second foreground is kept so ``fg`` stays defined on the whole canvas.
    """
    _check_hw(a1, f1, a2, f2)
    alpha = clamp01(a1 + a2 * (1.0 - a1))
    w1 = a1[..., None]
    w2 = ((1.0 - a1) * a2)[..., None]
    mixed = (w1 * f1 + w2 * f2) / np.maximum(alpha, MERGE_EPS)[..., None]
    fg = np.where((alpha > 0)[..., None], mixed, f2)
    return alpha, clamp01(fg)


def unknown_region(alpha: np.ndarray) -> np.ndarray:
    """Binary mask of pixels with 0 < alpha < 1."""
    return ((alpha > 0) & (alpha < 1)).astype(np.float64)


@dataclass
class MattingSample:
    image: np.ndarray
    alpha: np.ndarray
    foreground: np.ndarray
    background: np.ndarray
    guidance: np.ndarray
    unknown_region: Optional[np.ndarray] = None
    detail_region: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.alpha.shape[:2]

    def validate(self, atol: float = 1e-6, check_composite: bool = True) -> None:
        """Raise ``ValueError`` if any invariant of the sample is violated."""
        planes = [self.image, self.alpha, self.foreground, self.background, self.guidance]
        planes += [p for p in (self.unknown_region, self.detail_region) if p is not None]
        _check_hw(*planes)
        for p in planes:
            if not np.all(np.isfinite(p)) or p.min() < 0 or p.max() > 1:
                raise ValueError("plane values must be finite and in [0, 1]")
        for p in (self.unknown_region, self.detail_region):
            if p is not None and not np.isin(p, (0.0, 1.0)).all():
                raise ValueError("region masks must be strictly binary")
        if check_composite:
            err = np.abs(composite(self.alpha, self.foreground, self.background) - self.image).max()
            if err > atol:
                raise ValueError(f"image deviates from composite by {err:.3g}")


# --- PNG I/O -----------------------------------------------------------------


def read_png(path: str | Path) -> np.ndarray:
    """Load an 8/16-bit grayscale or RGB PNG as float64 in [0, 1]."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise OSError(f"cannot read image {path}")
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise OSError(f"unsupported PNG dtype {raw.dtype} in {path}")
    if raw.ndim == 3:
        if raw.shape[2] == 4:
            raw = raw[..., :3]
        raw = raw[..., ::-1]
    return raw.astype(np.float64) / scale


def write_png(path: str | Path, plane: np.ndarray, bits: int = 8) -> None:
    """Write a plane as PNG; 16-bit output round-trips 16-bit input exactly."""
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    maxval = 255 if bits == 8 else 65535
    data = np.rint(clamp01(plane) * maxval).astype(np.uint8 if bits == 8 else np.uint16)
    if data.ndim == 3:
        data = np.ascontiguousarray(data[..., ::-1])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), data):
        raise OSError(f"cannot write image {path}")
