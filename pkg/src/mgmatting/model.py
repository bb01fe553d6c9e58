"""Progressive Refinement Network and the foreground colour network.

Both networks share a small U-Net style encoder-decoder with an optional
multi-rate context pooling block at the stride-8 bottleneck. Downsampling is
2x2 max pooling and upsampling is bilinear, so with horizontally symmetric
kernels the whole network is exactly flip-equivariant on even-sized inputs.
"""

from __future__ import annotations

import json
import pickle
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import guidance as _guidance

CHECKPOINT_VERSION = 1
STRIDES = (8, 4, 1)


@dataclass
class PRNConfig:
    input_channels: int = 4
    encoder_widths: tuple[int, ...] = (16, 32, 64, 128)
    use_context_pooling: bool = True
    context_rates: tuple[int, ...] = (1, 2, 4)
    head_width: int = 32
    norm: str = "batch"
    test_dilation: tuple[int, int] = (15, 7)

    def __post_init__(self):
        self.encoder_widths = tuple(self.encoder_widths)
        self.context_rates = tuple(self.context_rates)
        self.test_dilation = tuple(self.test_dilation)
        if len(self.encoder_widths) != 4:
            raise ValueError("encoder_widths needs 4 entries (strides 1, 2, 4, 8)")
        if self.input_channels != 4:
            raise ValueError("PRN takes RGB + guidance (4 channels)")
        for k in self.test_dilation:
            if k < 1 or k % 2 == 0:
                raise ValueError(f"test dilation kernels must be odd, got {self.test_dilation}")


@dataclass
class ColorNetConfig:
    input_channels: int = 4
    encoder_widths: tuple[int, ...] = (16, 32, 64, 128)
    use_context_pooling: bool = True
    context_rates: tuple[int, ...] = (1, 2, 4)
    norm: str = "batch"

    def __post_init__(self):
        self.encoder_widths = tuple(self.encoder_widths)
        self.context_rates = tuple(self.context_rates)
        if len(self.encoder_widths) != 4:
            raise ValueError("encoder_widths needs 4 entries (strides 1, 2, 4, 8)")
        if self.input_channels != 4:
            raise ValueError("colour net takes RGB + alpha (4 channels)")


def _norm(kind: str, ch: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm2d(ch)
    if kind == "group":
        return nn.GroupNorm(min(8, ch), ch)
    raise ValueError(f"unknown norm {kind!r}")


class ConvNormReLU(nn.Sequential):
    def __init__(self, cin, cout, norm="batch", dilation=1):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=dilation, dilation=dilation, bias=False),
            _norm(norm, cout),
            nn.ReLU(inplace=True),
        )


class DoubleConv(nn.Sequential):
    def __init__(self, cin, cout, norm="batch"):
        super().__init__(ConvNormReLU(cin, cout, norm), ConvNormReLU(cout, cout, norm))


class ContextPooling(nn.Module):
    """Parallel dilated 3x3 branches plus a global-average branch, merged by 1x1 conv."""

    def __init__(self, cin, cout, rates=(1, 2, 4), norm="batch"):
        super().__init__()
        self.branches = nn.ModuleList(ConvNormReLU(cin, cout, norm, dilation=r) for r in rates)
        self.image_pool = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(cin, cout, 1, bias=False),
            nn.ReLU(inplace=True),
        )
        self.project = nn.Sequential(
            nn.Conv2d(cout * (len(rates) + 1), cout, 1, bias=False),
            _norm(norm, cout),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        feats = [b(x) for b in self.branches]
        feats.append(self.image_pool(x).expand(-1, -1, x.shape[2], x.shape[3]))
        return self.project(torch.cat(feats, dim=1))


class AlphaHead(nn.Sequential):
    """Conv-BN-ReLU-Conv side prediction head."""

    def __init__(self, cin, width, cout=1, norm="batch"):
        super().__init__(
            nn.Conv2d(cin, width, 3, padding=1, bias=False),
            _norm(norm, width),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, cout, 3, padding=1),
        )


def _up(x: Tensor, size) -> Tensor:
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class UNetBackbone(nn.Module):
    """Encoder-decoder returning decoder features at strides 8, 4 and 1."""

    def __init__(self, cin, widths, use_context_pooling=True, rates=(1, 2, 4), norm="batch"):
        super().__init__()
        w0, w1, w2, w3 = widths
        self.enc0 = DoubleConv(cin, w0, norm)
        self.enc1 = DoubleConv(w0, w1, norm)
        self.enc2 = DoubleConv(w1, w2, norm)
        self.enc3 = DoubleConv(w2, w3, norm)
        self.context = ContextPooling(w3, w3, rates, norm) if use_context_pooling else nn.Identity()
        self.dec2 = DoubleConv(w3 + w2, w2, norm)
        self.dec1 = DoubleConv(w2 + w1, w1, norm)
        self.dec0 = DoubleConv(w1 + w0, w0, norm)
        self.out_channels = (w3, w2, w0)

    def forward(self, x):
        e0 = self.enc0(x)
        e1 = self.enc1(F.max_pool2d(e0, 2))
        e2 = self.enc2(F.max_pool2d(e1, 2))
        e3 = self.context(self.enc3(F.max_pool2d(e2, 2)))
        d2 = self.dec2(torch.cat([_up(e3, e2.shape[2:]), e2], dim=1))
        d1 = self.dec1(torch.cat([_up(d2, e1.shape[2:]), e1], dim=1))
        d0 = self.dec0(torch.cat([_up(d1, e0.shape[2:]), e0], dim=1))
        return e3, d2, d0


@dataclass
class PyramidPrediction:
    """Per-level raw outputs, fused outputs and the guidance masks used to fuse them.

    All planes are ``(N, 1, H, W)`` at the full input resolution. ``self_guidance``
    holds ``g0`` (all ones), ``g1`` and ``g2``.
    """

    raw: list[Tensor]
    fused: list[Tensor]
    self_guidance: list[Tensor] = field(default_factory=list)

    @property
    def alpha(self) -> Tensor:
        return self.fused[-1]


def prm_fuse(alpha_raw, alpha_prev, g):
    """Keep ``alpha_prev`` where g = 0 and take ``alpha_raw`` where g = 1."""
    if alpha_raw.shape != alpha_prev.shape or alpha_raw.shape != g.shape:
        raise ValueError(f"shape mismatch {alpha_raw.shape}, {alpha_prev.shape}, {g.shape}")
    return alpha_raw * g + alpha_prev * (1 - g)


def _dilate_tensor(mask: Tensor, k: int) -> Tensor:
    if k < 1 or k % 2 == 0:
        raise ValueError(f"dilation kernel must be a positive odd integer, got {k}")
    if k == 1:
        return mask
    # max-pool pads with -inf, which acts as zero padding for a {0,1} mask
    return F.max_pool2d(mask, k, stride=1, padding=k // 2)


def self_guidance_from(alpha_prev, k):
    """Mark pixels with 0 < alpha < 1 and dilate the result with a k x k square.

    Accepts a numpy ``(H, W)`` matte or an ``(N, 1, H, W)`` tensor. For tensors
    ``k`` may be a per-sample sequence of kernel sizes.
    """
    if isinstance(alpha_prev, np.ndarray):
        return _guidance.dilate(((alpha_prev > 0) & (alpha_prev < 1)).astype(np.float64), int(k))
    with torch.no_grad():
        g = ((alpha_prev > 0) & (alpha_prev < 1)).to(alpha_prev.dtype)
        if isinstance(k, (int, np.integer)):
            return _dilate_tensor(g, int(k))
        if len(k) != g.shape[0]:
            raise ValueError("need one dilation kernel per sample")
        return torch.cat([_dilate_tensor(g[i:i + 1], int(ki)) for i, ki in enumerate(k)], dim=0)


def _pad_to_multiple(x: Tensor, m: int = 8):
    h, w = x.shape[2:]
    ph, pw = (-h) % m, (-w) % m
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="replicate")
    return x, (h, w)


class PRN(nn.Module):
    """Matting network with side outputs at strides 8/4/1 fused by progressive refinement."""

    def __init__(self, cfg: Optional[PRNConfig] = None):
        super().__init__()
        self.cfg = cfg or PRNConfig()
        c = self.cfg
        self.backbone = UNetBackbone(c.input_channels, c.encoder_widths, c.use_context_pooling,
                                     c.context_rates, c.norm)
        c8, c4, c1 = self.backbone.out_channels
        self.head_os8 = AlphaHead(c8, c.head_width, norm=c.norm)
        self.head_os4 = AlphaHead(c4, c.head_width, norm=c.norm)
        self.head_os1 = nn.Conv2d(c1, 1, 3, padding=1)
        for head in (self.head_os8[-1], self.head_os4[-1], self.head_os1):
            nn.init.constant_(head.bias, 0.5)

    def raw_outputs(self, image: Tensor, guidance: Tensor) -> list[Tensor]:
        """Clamped raw predictions of every level, upsampled to input resolution."""
        if image.shape[1] != 3 or guidance.shape[1] != 1:
            raise ValueError(f"expected 3-channel image and 1-channel guidance, "
                             f"got {image.shape[1]} and {guidance.shape[1]}")
        x, (h, w) = _pad_to_multiple(torch.cat([image, guidance], dim=1))
        f8, f4, f1 = self.backbone(x)
        raws = []
        for feat, head in ((f8, self.head_os8), (f4, self.head_os4), (f1, self.head_os1)):
            a = head(feat).clamp(0.0, 1.0)
            if a.shape[2:] != x.shape[2:]:
                a = _up(a, x.shape[2:])
            raws.append(a[:, :, :h, :w])
        return raws

    def forward(
        self,
        image: Tensor,
        guidance: Tensor,
        guidance_override: Optional[Sequence[Tensor]] = None,
        override_samples: Optional[Tensor] = None,
        dilation=None,
    ) -> PyramidPrediction:
        """Run the network and fuse its three levels.

        ``dilation`` gives the self-guidance kernels ``(K1, K2)``, each an int or a
        per-sample sequence; it defaults to ``cfg.test_dilation``.
        ``guidance_override`` replaces the computed ``(g1, g2)``; with
        ``override_samples`` (bool, shape ``(N,)``) only the flagged samples use it.
        """
        raws = self.raw_outputs(image, guidance)
        dilation = self.cfg.test_dilation if dilation is None else dilation
        fused = [raws[0]]
        masks = [torch.ones_like(raws[0])]
        for level in (1, 2):
            g = self_guidance_from(fused[-1], dilation[level - 1])
            if guidance_override is not None:
                over = guidance_override[level - 1].to(g.dtype)
                if override_samples is None:
                    g = over
                else:
                    g = torch.where(override_samples.view(-1, 1, 1, 1), over, g)
            masks.append(g)
            fused.append(prm_fuse(raws[level], fused[-1], g))
        return PyramidPrediction(raw=raws, fused=fused, self_guidance=masks)


class ColorNet(nn.Module):
    """Encoder-decoder predicting a full-image foreground colour map from (image, alpha)."""

    def __init__(self, cfg: Optional[ColorNetConfig] = None):
        super().__init__()
        self.cfg = cfg or ColorNetConfig()
        c = self.cfg
        self.backbone = UNetBackbone(c.input_channels, c.encoder_widths, c.use_context_pooling,
                                     c.context_rates, c.norm)
        self.head = nn.Conv2d(self.backbone.out_channels[2], 3, 3, padding=1)

    def forward(self, image: Tensor, alpha: Tensor) -> Tensor:
        x, (h, w) = _pad_to_multiple(torch.cat([image, alpha], dim=1))
        _, _, f1 = self.backbone(x)
        # predict a residual on the observed colour
        out = x[:, :3] + self.head(f1)
        return out.clamp(0.0, 1.0)[:, :, :h, :w]


# --- numpy-facing inference ------------------------------------------------------


def _param_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def image_to_tensor(plane: np.ndarray, dtype=torch.float32) -> Tensor:
    """``(H, W)`` or ``(H, W, C)`` numpy plane to a ``(1, C, H, W)`` tensor."""
    arr = plane[..., None] if plane.ndim == 2 else plane
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).to(dtype).unsqueeze(0)


def tensor_to_image(t: Tensor) -> np.ndarray:
    arr = t.detach().cpu().double().numpy()[0].transpose(1, 2, 0)
    return arr[..., 0] if arr.shape[2] == 1 else arr


def predict_pyramid(model: PRN, image: np.ndarray, guidance: np.ndarray,
                    guidance_override=None, dilation=None) -> PyramidPrediction:
    model.eval()
    dtype = _param_dtype(model)
    with torch.no_grad():
        over = None
        if guidance_override is not None:
            over = [image_to_tensor(g, dtype) for g in guidance_override]
        return model(image_to_tensor(image, dtype), image_to_tensor(guidance, dtype),
                     guidance_override=over, dilation=dilation)


def predict_foreground(model: ColorNet, image: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    model.eval()
    dtype = _param_dtype(model)
    with torch.no_grad():
        out = model(image_to_tensor(image, dtype), image_to_tensor(alpha, dtype))
    return tensor_to_image(out)


def refine(image: np.ndarray, guidance: np.ndarray, checkpoint) -> np.ndarray:
    """Final fused alpha for ``image`` under any guidance encoding.

    ``checkpoint`` is a path or an already built :class:`PRN`.
    """
    model = checkpoint if isinstance(checkpoint, PRN) else load_model(checkpoint, kind="matte")
    return tensor_to_image(predict_pyramid(model, image, guidance).alpha)


# --- checkpoints -----------------------------------------------------------------


class CheckpointError(Exception):
    pass


_KINDS = {"matte": (PRN, PRNConfig), "color": (ColorNet, ColorNetConfig)}


def model_kind(model: nn.Module) -> str:
    return "matte" if isinstance(model, PRN) else "color"


def build_model(kind: str, config: Union[dict, PRNConfig, ColorNetConfig, None] = None) -> nn.Module:
    cls, cfg_cls = _KINDS[kind]
    if isinstance(config, dict):
        config = cfg_cls(**config)
    return cls(config or cfg_cls())


def save_checkpoint(path, model: nn.Module, extra: Optional[dict] = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": model_kind(model),
        "config": asdict(model.cfg),
        "weights": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "dtype": str(_param_dtype(model)).replace("torch.", ""),
    }
    if extra:
        payload.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(_canonical(payload), path)


def _canonical(obj):
    """Rebuild ``obj`` so equal contents always serialize to equal bytes.

    Tensors become fresh contiguous copies; JSON-like metadata is round-tripped
    through JSON so pickle's identity-based memo depends on content only.
    """
    if isinstance(obj, dict) and not _has_tensor(obj):
        try:
            return json.loads(json.dumps(obj))
        except TypeError:
            pass
    if isinstance(obj, torch.Tensor):
        return obj.detach().clone().contiguous()
    if isinstance(obj, dict):
        return {k: _canonical(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return type(obj)(_canonical(v) for v in obj)
    return obj


def _has_tensor(obj) -> bool:
    if isinstance(obj, torch.Tensor):
        return True
    if isinstance(obj, dict):
        return any(_has_tensor(v) for v in obj.values())
    if isinstance(obj, (list, tuple)):
        return any(_has_tensor(v) for v in obj)
    return False


def load_checkpoint(path) -> dict:
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
        raise CheckpointError(f"cannot load checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path} is not a version-{CHECKPOINT_VERSION} checkpoint")
    for key in ("kind", "config", "weights"):
        if key not in payload:
            raise CheckpointError(f"checkpoint {path} lacks {key!r}")
    return payload


def load_model(path, kind: Optional[str] = None, config=None) -> nn.Module:
    """Rebuild a model from a checkpoint, validating kind and config."""
    payload = load_checkpoint(path)
    if kind is not None and payload["kind"] != kind:
        raise CheckpointError(f"expected a {kind} checkpoint, found {payload['kind']}")
    if config is not None:
        want = asdict(config) if not isinstance(config, dict) else config
        have = asdict(build_model(payload["kind"], payload["config"]).cfg)
        if asdict(build_model(payload["kind"], want).cfg) != have:
            raise CheckpointError("checkpoint config does not match the requested config")
    model = build_model(payload["kind"], payload["config"])
    model = model.to(getattr(torch, payload.get("dtype", "float32")))
    try:
        model.load_state_dict(payload["weights"])
    except RuntimeError as exc:
        raise CheckpointError(f"weights do not fit config: {exc}") from exc
    model.eval()
    return model
