"""Training loops for the matting network and the foreground colour network.

Randomness for iteration ``it`` comes from ``sample_rng(seed, it)``, so a run
resumed from a checkpoint replays exactly the same batches, curriculum draws
and dilation kernels as an uninterrupted one.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .core import MattingSample
from .datagen import AugmentConfig, make_rab_sample, make_training_sample, sample_rng
from .guidance import PerturbConfig, cutmask, odd_kernel, perturb_guidance, sample_cutmask_fraction
from .losses import LossWeights, color_loss, total_loss
from .model import ColorNet, ColorNetConfig, PRN, PRNConfig, load_checkpoint, save_checkpoint, self_guidance_from

log = logging.getLogger(__name__)

GROUND_TRUTH = "ground_truth"
SELF = "self"


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    total_iters: int = 2000
    warmup_iters: int = 100
    peak_lr: float = 1e-3
    adam_betas: tuple[float, float] = (0.5, 0.999)
    batch_size: int = 4
    gt_phase_end: int = 200
    mixed_phase_end: int = 600
    loss: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    weight_decay: float = 0.0
    grad_clip: Optional[float] = None
    checkpoint_every: Optional[int] = None
    dtype: str = "float32"
    self_dilation_ranges: tuple[tuple[int, int], tuple[int, int]] = ((1, 30), (1, 15))
    color_supervision: str = "full"

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossWeights(**self.loss)
        self.adam_betas = tuple(self.adam_betas)
        self.self_dilation_ranges = tuple(tuple(r) for r in self.self_dilation_ranges)
        if not 0 <= self.warmup_iters < self.total_iters:
            raise ValueError("need 0 <= warmup_iters < total_iters")
        if not 0 <= self.gt_phase_end <= self.mixed_phase_end <= self.total_iters:
            raise ValueError("need gt_phase_end <= mixed_phase_end <= total_iters")
        if self.color_supervision not in ("full", "foreground"):
            raise ValueError("color_supervision must be 'full' or 'foreground'")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @classmethod
    def full_scale(cls) -> "TrainConfig":
        return cls(total_iters=100_000, warmup_iters=5_000, batch_size=40,
                   gt_phase_end=5_000, mixed_phase_end=15_000)

    @property
    def ckpt_interval(self) -> int:
        return self.checkpoint_every or max(self.total_iters // 20, 1)


def guidance_source(it: int, cfg: TrainConfig, rng: np.random.Generator) -> str:
    """Curriculum: ground-truth guidance, then a fair coin per sample, then self-guidance."""
    if it < cfg.gt_phase_end:
        return GROUND_TRUTH
    if it < cfg.mixed_phase_end:
        return GROUND_TRUTH if rng.uniform() < 0.5 else SELF
    return SELF


def lr_at(it: int, cfg: TrainConfig) -> float:
    """Linear warm-up from 0 to ``peak_lr``, then cosine decay to 0."""
    if it < cfg.warmup_iters:
        return cfg.peak_lr * it / cfg.warmup_iters
    progress = (it - cfg.warmup_iters) / (cfg.total_iters - cfg.warmup_iters)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# --- data streams ----------------------------------------------------------------


class FixedSetStream:
    """Batches drawn from a fixed sample list, with guidance re-perturbed from the alpha each time."""

    def __init__(self, samples: Sequence[MattingSample], batch_size: int,
                 perturb: Optional[PerturbConfig] = PerturbConfig(), cutmask_prob: float = 0.25):
        self.samples = list(samples)
        self.batch_size = batch_size
        self.perturb = perturb
        self.cutmask_prob = cutmask_prob

    def __call__(self, it: int, rng: np.random.Generator) -> list[MattingSample]:
        idx = rng.integers(len(self.samples), size=self.batch_size)
        batch = []
        for i in idx:
            s = self.samples[int(i)]
            if self.perturb is not None:
                g = perturb_guidance(s.alpha, self.perturb, rng)
                if self.cutmask_prob and rng.uniform() < self.cutmask_prob:
                    g = cutmask(g, sample_cutmask_fraction(self.perturb, g.shape, rng), rng)
                s = MattingSample(s.image, s.alpha, s.foreground, s.background, g,
                                  s.unknown_region, s.detail_region, s.meta)
            batch.append(s)
        return batch


class SyntheticStream:
    """Fresh augmented samples every iteration."""

    def __init__(self, fg_pool, bg_pool, aug: AugmentConfig, batch_size: int):
        self.fg_pool, self.bg_pool, self.aug, self.batch_size = fg_pool, bg_pool, aug, batch_size

    def __call__(self, it, rng):
        return [make_training_sample(self.fg_pool, self.bg_pool, self.aug, rng) for _ in range(self.batch_size)]


class RABStream:
    def __init__(self, fg_pool, alpha_pool, bg_pool, batch_size: int):
        self.fg_pool, self.alpha_pool, self.bg_pool = fg_pool, alpha_pool, bg_pool
        self.batch_size = batch_size

    def __call__(self, it, rng):
        return [make_rab_sample(self.fg_pool, self.alpha_pool, self.bg_pool, rng) for _ in range(self.batch_size)]


class FixedListStream:
    """Fixed batch order over a list of samples (no re-perturbation)."""

    def __init__(self, samples: Sequence[MattingSample], batch_size: int):
        self.samples, self.batch_size = list(samples), batch_size

    def __call__(self, it, rng):
        idx = rng.integers(len(self.samples), size=self.batch_size)
        return [self.samples[int(i)] for i in idx]


def _stack(planes, dtype) -> torch.Tensor:
    arr = np.stack([p[..., None] if p.ndim == 2 else p for p in planes]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def collate(batch: Sequence[MattingSample], dtype=torch.float32) -> dict:
    return {
        "image": _stack([s.image for s in batch], dtype),
        "alpha": _stack([s.alpha for s in batch], dtype),
        "fg": _stack([s.foreground for s in batch], dtype),
        "bg": _stack([s.background for s in batch], dtype),
        "guidance": _stack([s.guidance for s in batch], dtype),
        "use_comp": all(s.meta.get("use_composition_loss", True) for s in batch),
    }


# --- generic loop ----------------------------------------------------------------


@dataclass
class TrainResult:
    model: nn.Module
    log: list[dict]
    last_checkpoint: Optional[Path] = None


def _make_optimizer(model, cfg):
    return torch.optim.Adam(model.parameters(), lr=cfg.peak_lr, betas=cfg.adam_betas,
                            weight_decay=cfg.weight_decay)


def _config_echo(model, cfg, echo=None):
    if echo is not None:
        return echo
    return {"model": asdict(model.cfg), "train": asdict(cfg)}


def _fit(model: nn.Module, stream: Callable, cfg: TrainConfig, step_loss: Callable,
         run_dir=None, resume=None, config_echo=None, on_step=None) -> TrainResult:
    dtype = getattr(torch, cfg.dtype)
    model.to(dtype)
    opt = _make_optimizer(model, cfg)
    start = 0
    if resume is not None:
        payload = load_checkpoint(resume)
        model.load_state_dict(payload["weights"])
        opt.load_state_dict(payload["optimizer"])
        start = int(payload["iter"])
        if payload.get("rng_state", {}).get("seed", cfg.seed) != cfg.seed:
            raise ValueError("resume checkpoint was produced with a different seed")

    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(
            json.dumps(_config_echo(model, cfg, config_echo), indent=2, sort_keys=True) + "\n")
        log_path = run_dir / "log.jsonl"
        if resume is None or not log_path.exists():
            log_path.write_text("")
        else:
            kept = [l for l in log_path.read_text().splitlines() if l and json.loads(l)["iter"] < start]
            log_path.write_text("".join(l + "\n" for l in kept))

    records, last_ckpt = [], None
    for it in range(start, cfg.total_iters):
        rng = sample_rng(cfg.seed, it)
        batch = stream(it, rng)
        model.train()
        loss, per_level = step_loss(model, batch, it, rng, dtype)
        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite loss at iteration {it}")
        lr = lr_at(it, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip:
            nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()

        rec = {"iter": it, "lr": lr, "loss_total": loss.item(),
               "loss_per_level": [l.item() for l in per_level]}
        records.append(rec)
        if run_dir is not None:
            with (run_dir / "log.jsonl").open("a") as fh:
                fh.write(json.dumps(rec) + "\n")
        if on_step is not None:
            on_step(rec)
        done = it + 1
        if run_dir is not None and (done % cfg.ckpt_interval == 0 or done == cfg.total_iters):
            last_ckpt = run_dir / f"ckpt_{done:06d}.bin"
            save_checkpoint(last_ckpt, model, extra={
                "iter": done,
                "optimizer": opt.state_dict(),
                "rng_state": {"seed": cfg.seed, "next_iter": done},
                "config_echo": _config_echo(model, cfg, config_echo),
            })
    model.eval()
    return TrainResult(model=model, log=records, last_checkpoint=last_ckpt)


def _kernels(rng, n, lo_hi):
    lo, hi = lo_hi
    return [odd_kernel(int(k)) for k in rng.integers(lo, hi + 1, size=n)]


def matte_step(cfg: TrainConfig):
    """Loss closure for one matting iteration (curriculum + per-sample self-guidance dilation)."""

    def step(model, batch, it, rng, dtype):
        b = collate(batch, dtype)
        n = b["image"].shape[0]
        use_gt = torch.tensor([guidance_source(it, cfg, rng) == GROUND_TRUTH for _ in range(n)])
        k1 = _kernels(rng, n, cfg.self_dilation_ranges[0])
        k2 = _kernels(rng, n, cfg.self_dilation_ranges[1])
        override = None
        if use_gt.any():
            override = [self_guidance_from(b["alpha"], k1), self_guidance_from(b["alpha"], k2)]
        pyr = model(b["image"], b["guidance"], guidance_override=override,
                    override_samples=use_gt if override is not None else None, dilation=(k1, k2))
        weights = cfg.loss if b["use_comp"] else LossWeights(
            cfg.loss.level_weights, cfg.loss.l1, 0.0, cfg.loss.lap, cfg.loss.lap_levels)
        return total_loss(pyr, b["alpha"], b["fg"], b["bg"], b["image"], weights, details=True)

    return step


def color_step(cfg: TrainConfig):
    def step(model, batch, it, rng, dtype):
        b = collate(batch, dtype)
        if cfg.color_supervision == "full":
            mask = torch.ones_like(b["alpha"])
        else:
            mask = (b["alpha"] > 0).to(dtype)
        pred = model(b["image"], b["alpha"])
        loss = color_loss(pred, b["fg"], b["alpha"], b["bg"], b["image"], mask, cfg.loss.lap_levels)
        return loss, [loss]

    return step


def train_matte(stream: Callable, model_cfg: Optional[PRNConfig] = None, train_cfg: Optional[TrainConfig] = None,
                run_dir=None, resume=None, config_echo=None, on_step=None) -> TrainResult:
    """Train a :class:`PRN`; returns the model and per-iteration log records."""
    train_cfg = train_cfg or TrainConfig()
    torch.manual_seed(train_cfg.seed)
    model = PRN(model_cfg)
    return _fit(model, stream, train_cfg, matte_step(train_cfg), run_dir, resume, config_echo, on_step)


def train_color(stream: Callable, color_cfg: Optional[ColorNetConfig] = None,
                train_cfg: Optional[TrainConfig] = None, run_dir=None, resume=None,
                config_echo=None, on_step=None) -> TrainResult:
    """Train a :class:`ColorNet` on Random Alpha Blending samples."""
    train_cfg = train_cfg or TrainConfig()
    torch.manual_seed(train_cfg.seed)
    model = ColorNet(color_cfg)
    return _fit(model, stream, train_cfg, color_step(train_cfg), run_dir, resume, config_echo, on_step)
