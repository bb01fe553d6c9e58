"""Masked matting losses: L1, composition, Laplacian pyramid, and the level-weighted total.

All tensors are ``(N, C, H, W)``. Masks are ``(N, 1, H, W)`` with values in {0, 1}
and are treated as constants. Masked means are taken per sample and then
averaged over the batch; a sample with an empty mask contributes zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor

_BINOMIAL = (1.0, 4.0, 6.0, 4.0, 1.0)


@dataclass
class LossWeights:
    level_weights: tuple[float, float, float] = (1.0, 2.0, 3.0)
    l1: float = 1.0
    comp: float = 1.0
    lap: float = 1.0
    lap_levels: int = 5

    def __post_init__(self):
        self.level_weights = tuple(self.level_weights)
        if min(self.level_weights) < 0 or min(self.l1, self.comp, self.lap) < 0:
            raise ValueError("loss weights must be non-negative")


def _masked_mean(err: Tensor, mask: Tensor) -> Tensor:
    """Per-sample mean of ``err`` (averaged over channels) on ``mask``, then batch mean."""
    num = (err * mask).sum(dim=(1, 2, 3)) / err.shape[1]
    den = mask.sum(dim=(1, 2, 3)).clamp(min=1.0)
    return (num / den).mean()


def l1_loss(pred: Tensor, gt: Tensor, mask: Tensor) -> Tensor:
    return _masked_mean((pred - gt).abs(), mask)


def composition_loss(pred_alpha: Tensor, fg: Tensor, bg: Tensor, image: Tensor, mask: Tensor) -> Tensor:
    comp = pred_alpha * fg + (1 - pred_alpha) * bg
    return _masked_mean((comp - image).abs(), mask)


def _gauss_kernel(channels: int, like: Tensor) -> Tensor:
    k1 = torch.tensor(_BINOMIAL, dtype=like.dtype, device=like.device) / 16.0
    k2 = torch.outer(k1, k1)
    return k2.expand(channels, 1, 5, 5).contiguous()


def _blur(x: Tensor, kernel: Tensor) -> Tensor:
    return F.conv2d(F.pad(x, (2, 2, 2, 2), mode="replicate"), kernel, groups=x.shape[1])


def _downsample(x: Tensor, kernel: Tensor) -> Tensor:
    return _blur(x, kernel)[:, :, ::2, ::2]


def _upsample(x: Tensor, size, kernel: Tensor) -> Tensor:
    n, c, h, w = x.shape
    xp = F.pad(x, (1, 1, 1, 1), mode="replicate")
    z = x.new_zeros(n, c, 2 * (h + 2), 2 * (w + 2))
    z[:, :, ::2, ::2] = 4 * xp
    out = F.conv2d(z, kernel, groups=c)
    return out[:, :, :size[0], :size[1]]


def laplacian_pyramid(x: Tensor, levels: int) -> list[Tensor]:
    """``levels`` band-pass images followed by the low-pass residual."""
    kernel = _gauss_kernel(x.shape[1], x)
    pyr = []
    cur = x
    for _ in range(levels):
        down = _downsample(cur, kernel)
        pyr.append(cur - _upsample(down, cur.shape[2:], kernel))
        cur = down
    pyr.append(cur)
    return pyr


def laplacian_loss(pred: Tensor, gt: Tensor, mask: Tensor, levels: int = 5) -> Tensor:
    """Sum over pyramid levels k of 2**k * mean |band_k(pred*mask) - band_k(gt*mask)|."""
    if min(pred.shape[2:]) < 2 ** levels:
        raise ValueError(f"input {tuple(pred.shape[2:])} too small for {levels} pyramid levels")
    pp = laplacian_pyramid(pred * mask, levels)
    pg = laplacian_pyramid(gt * mask, levels)
    return sum((2 ** k) * F.l1_loss(a, b) for k, (a, b) in enumerate(zip(pp, pg)))


def level_loss(pred: Tensor, gt: Tensor, g: Tensor, fg: Tensor, bg: Tensor, image: Tensor,
               weights: LossWeights = LossWeights()) -> Tensor:
    loss = weights.l1 * l1_loss(pred, gt, g)
    if weights.comp:
        loss = loss + weights.comp * composition_loss(pred, fg, bg, image, g)
    if weights.lap:
        loss = loss + weights.lap * laplacian_loss(pred, gt, g, weights.lap_levels)
    return loss


def total_loss(pyramid, gt: Tensor, fg: Tensor, bg: Tensor, image: Tensor,
               weights: LossWeights = LossWeights(), details: bool = False):
    """Level-weighted sum of per-level losses; level 0 is supervised on the whole image.

    With ``details=True`` returns ``(total, [loss_0, loss_1, loss_2])``.
    """
    masks = list(pyramid.self_guidance)
    masks[0] = torch.ones_like(gt)
    per_level = [
        level_loss(alpha, gt, g.detach(), fg, bg, image, weights)
        for alpha, g in zip(pyramid.fused, masks)
    ]
    total = sum(w * l for w, l in zip(weights.level_weights, per_level))
    return (total, per_level) if details else total


def color_loss(pred_fg: Tensor, fg: Tensor, alpha: Tensor, bg: Tensor, image: Tensor, mask: Tensor,
               lap_levels: int = 5) -> Tensor:
    """Foreground-colour loss: L1 + composition + Laplacian, all under ``mask``."""
    l1 = _masked_mean((pred_fg - fg).abs(), mask)
    comp = _masked_mean((alpha * pred_fg + (1 - alpha) * bg - image).abs(), mask)
    return l1 + comp + laplacian_loss(pred_fg, fg, mask, lap_levels)
