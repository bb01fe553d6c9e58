"""``mgmatting`` command line: synth, train, eval, refine, perturb.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import dataset, metrics
from .config import ConfigError, RunConfig
from .core import MattingSample, clamp01, composite, read_png, write_png
from .datagen import make_pools, make_training_sample, sample_rng
from .guidance import (PerturbConfig, binarize, cutmask, dilate, encode_guidance, erode, odd_kernel,
                       TRIMAP_UNKNOWN)
from .model import CheckpointError, load_model, predict_foreground, refine
from .trainer import DivergenceError, FixedSetStream, RABStream, SyntheticStream, train_color, train_matte

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
OUT_ROOT_ENV = "MGMATTING_OUT_ROOT"
PANEL_BACKDROP = (0.0, 0.8, 0.2)

log = logging.getLogger("mgmatting")


class DataError(Exception):
    pass


def _default_out(command: str) -> Path:
    return Path(os.environ.get(OUT_ROOT_ENV, "runs")) / command


# --- synth -----------------------------------------------------------------------


def _synth_one(args) -> MattingSample:
    index, cfg_dict = args
    cfg = RunConfig()
    cfg.update(cfg_dict)
    spec, aug = cfg.synth_spec(), cfg.augment()
    rng = sample_rng(cfg.seed, index)
    # each sample owns a private pool so results are independent of worker count
    pool_seed = int(rng.integers(2**31))
    fgs, bgs = make_pools(spec, 2, 1, seed=pool_seed)
    return make_training_sample(fgs, bgs, aug, rng)


def cmd_synth(cfg: RunConfig, out: Path, count=None, validate=False) -> list[str]:
    n = int(count if count is not None else cfg.data["synth"]["count"])
    jobs = [(i, cfg.resolved()) for i in range(n)]
    workers = int(cfg.data["workers"])
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            samples = list(pool.map(_synth_one, jobs))
    else:
        samples = [_synth_one(j) for j in jobs]
    ids = []
    for i, s in enumerate(samples):
        if validate:
            s.validate(check_composite=s.meta.get("use_composition_loss", True))
        dataset.write_sample(out, i, s)
        ids.append(dataset.sample_id(i))
    dataset.write_manifest(out, ids, cfg.seed, cfg.resolved())
    if validate:
        for sid in ids:
            s = dataset.read_sample(out, sid)
            s.validate(atol=dataset.ROUND_TRIP_ATOL, check_composite=cfg.augment().realworld is None)
    cfg.dump(out / "config.json")
    return ids


# --- train -----------------------------------------------------------------------


def cmd_train(cfg: RunConfig, data: str, out: Path, mode: str = "matte", resume=None):
    tcfg = cfg.train()
    if data == "synthetic":
        fgs, bgs = make_pools(cfg.synth_spec(), cfg.data["synth"]["pool_size"], cfg.data["synth"]["pool_size"])
        if mode == "matte":
            stream = SyntheticStream(fgs, bgs, cfg.augment(), tcfg.batch_size)
        else:
            stream = RABStream([f for _, f in fgs], [a for a, _ in fgs], bgs, tcfg.batch_size)
    else:
        try:
            samples = dataset.load_dataset(data)
        except (OSError, ValueError, KeyError) as exc:
            raise DataError(f"cannot load dataset {data}: {exc}") from exc
        if not samples:
            raise DataError(f"dataset {data} is empty")
        if mode == "matte":
            aug = cfg.augment()
            stream = FixedSetStream(samples, tcfg.batch_size, aug.perturb, aug.cutmask_prob)
        else:
            stream = RABStream([s.foreground for s in samples], [s.alpha for s in samples],
                               [s.background for s in samples], tcfg.batch_size)
    echo = cfg.resolved()
    if mode == "matte":
        return train_matte(stream, cfg.model(), tcfg, run_dir=out, resume=resume, config_echo=echo)
    return train_color(stream, cfg.color_model(), tcfg, run_dir=out, resume=resume, config_echo=echo)


# --- eval ------------------------------------------------------------------------


def _eval_one(args):
    sid, pred, sample, regions = args
    return [{"sample": sid, **r.row()} for r in metrics.evaluate(pred, sample.alpha, sample, regions)]


def cmd_eval(cfg: RunConfig, data: str, out: Path, checkpoint=None, pred_dir=None, regions=None,
             guidance_mode="binary") -> dict:
    regions = list(regions or cfg.data["eval"]["regions"])
    try:
        ids = dataset.read_manifest(data)["samples"]
        samples = [dataset.read_sample(data, sid) for sid in ids]
    except (OSError, KeyError) as exc:
        raise DataError(f"cannot load dataset {data}: {exc}") from exc
    for s in samples:
        for r in regions:
            if r != "whole" and getattr(s, f"{r}_region", None) is None:
                raise DataError(f"sample {s.meta['id']} has no {r} region mask")
    model = load_model(checkpoint, kind="matte") if checkpoint else None
    jobs = []
    for sid, s in zip(ids, samples):
        if pred_dir is not None:
            pred = read_png(Path(pred_dir) / f"{sid}.png")
        else:
            pred = refine(s.image, _load_guidance_array(s.guidance, guidance_mode), model)
        jobs.append((sid, pred, s, regions))
    workers = int(cfg.data["workers"])
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            nested = list(pool.map(_eval_one, jobs))
    else:
        nested = [_eval_one(j) for j in jobs]
    rows = [r for group in nested for r in group]
    out.mkdir(parents=True, exist_ok=True)
    agg = metrics.write_reports(rows, out / "eval.csv", out / "eval.json")
    cfg.dump(out / "config.json")
    return agg


# --- refine ----------------------------------------------------------------------


def _load_guidance_array(raw: np.ndarray, mode: str) -> np.ndarray:
    """Snap a decoded guidance image to the value set its mode expects."""
    if raw.ndim == 3:
        raw = raw.mean(axis=2)
    if mode in ("trimapfg", "trimap_soft"):
        snapped = np.where(raw > 0.75, 1.0, np.where(raw < 0.25, 0.0, TRIMAP_UNKNOWN))
        return encode_guidance(snapped, mode)
    if mode == "binary":
        return encode_guidance(binarize(raw, 0.5), mode)
    return encode_guidance(raw, mode)


def parse_ops(specs: list[str]):
    """Parse ``binarize:t``, ``dilate:k``, ``erode:k`` and ``cutmask:fraction[:seed]`` strings."""
    ops = []
    for spec in specs:
        name, *params = spec.split(":")
        try:
            if name == "binarize" and len(params) == 1:
                ops.append((name, float(params[0])))
            elif name in ("dilate", "erode") and len(params) == 1:
                k = int(params[0])
                if k < 1:
                    raise ValueError
                ops.append((name, odd_kernel(k)))
            elif name == "cutmask" and len(params) in (1, 2):
                ops.append((name, float(params[0]), int(params[1]) if len(params) == 2 else 0))
            else:
                raise ValueError
        except ValueError:
            raise ConfigError(f"malformed perturbation spec {spec!r}") from None
    return ops


def apply_ops(mask: np.ndarray, ops) -> np.ndarray:
    out = mask
    for op in ops:
        if op[0] == "binarize":
            out = binarize(out, op[1])
        elif op[0] == "dilate":
            out = dilate(out, op[1])
        elif op[0] == "erode":
            out = erode(out, op[1])
        elif op[0] == "cutmask":
            out = cutmask(out, op[1], np.random.default_rng(op[2]))
    return out


def make_panel(image, guidance, alpha, fg=None) -> np.ndarray:
    """Horizontal strip: input, guidance, alpha, composite over a solid colour."""
    backdrop = np.broadcast_to(np.asarray(PANEL_BACKDROP), image.shape)
    comp = composite(alpha, image if fg is None else fg, backdrop)
    gray = lambda p: np.repeat(p[..., None], 3, axis=2)
    return np.concatenate([image, gray(guidance), gray(alpha), comp], axis=1)


def cmd_refine(checkpoint, image_path, guidance_path, mode, out: Path, color_checkpoint=None,
               panel=False, perturb=None, gt_path=None) -> dict:
    try:
        image = read_png(image_path)
        raw_guidance = read_png(guidance_path)
    except OSError as exc:
        raise DataError(str(exc)) from exc
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=2)
    model = load_model(checkpoint, kind="matte")
    guide = _load_guidance_array(raw_guidance, mode)
    ops = parse_ops(perturb or [])
    perturbed = apply_ops(guide, ops) if ops else guide
    alpha = refine(image, perturbed, model)
    out.mkdir(parents=True, exist_ok=True)
    write_png(out / "alpha.png", alpha)
    report = {"alpha": str(out / "alpha.png")}
    fg = None
    if color_checkpoint:
        fg = predict_foreground(load_model(color_checkpoint, kind="color"), image, alpha)
        write_png(out / "foreground.png", fg)
        report["foreground"] = str(out / "foreground.png")
    if panel:
        write_png(out / "panel.png", make_panel(image, perturbed, alpha, fg))
        report["panel"] = str(out / "panel.png")
    if gt_path:
        gt = read_png(gt_path)
        report["sad"] = metrics.sad(alpha, gt)
        if ops:
            base = metrics.sad(refine(image, guide, model), gt)
            report["sad_unperturbed"] = base
            report["sad_delta"] = report["sad"] - base
            report["sad_delta_rel"] = report["sad_delta"] / base if base else float("inf")
    return report


def cmd_perturb(input_path, ops_specs: list[str], out_path) -> np.ndarray:
    ops = parse_ops(ops_specs)
    try:
        mask = read_png(input_path)
    except OSError as exc:
        raise DataError(str(exc)) from exc
    if mask.ndim == 3:
        mask = mask.mean(axis=2)
    result = clamp01(apply_ops(mask, ops))
    write_png(out_path, result)
    return result


# --- argument parsing --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. train.total_iters=50")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--out", type=Path)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mgmatting", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic matting dataset")
    p.add_argument("--count", type=int)
    p.add_argument("--validate", action="store_true", help="check every sample's invariants")

    p = sub.add_parser("train", parents=[common], help="train the matting or colour network")
    p.add_argument("--data", default="synthetic", help="dataset directory or 'synthetic'")
    p.add_argument("--mode", choices=("matte", "color"), default="matte")
    p.add_argument("--resume", type=Path)

    p = sub.add_parser("eval", parents=[common], help="evaluate predictions on a dataset")
    p.add_argument("--data", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--pred-dir", type=Path, help="directory of predicted alpha PNGs named like the dataset")
    p.add_argument("--regions", help="comma separated subset of unknown,whole,detail")
    p.add_argument("--mode", default="binary", choices=("binary", "trimap_soft", "trimapfg", "soft_matte"),
                   help="how to read the dataset guidance")

    p = sub.add_parser("refine", parents=[common], help="predict an alpha matte for one image")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--guidance", type=Path, required=True)
    p.add_argument("--mode", default="binary", choices=("binary", "trimap_soft", "trimapfg", "soft_matte"))
    p.add_argument("--color-checkpoint", type=Path)
    p.add_argument("--panel", action="store_true")
    p.add_argument("--perturb", nargs="+", help="ops applied to the guidance first, e.g. erode:30")
    p.add_argument("--gt", type=Path, help="ground-truth alpha; reports SAD (and its change under --perturb)")

    p = sub.add_parser("perturb", parents=[common], help="apply guidance perturbations to a mask")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("ops", nargs="+", help="binarize:T dilate:K erode:K cutmask:FRACTION[:SEED]")
    return parser


def _load_config(args) -> RunConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.workers is not None:
        overrides.append(f"workers={args.workers}")
    return RunConfig.load(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    out = args.out or _default_out(args.command)
    try:
        if args.command == "perturb":
            if args.out is None:
                out = out.with_suffix(".png")
            cmd_perturb(args.input, args.ops, out)
            print(out)
            return EXIT_OK
        cfg = _load_config(args)
        if args.command == "synth":
            ids = cmd_synth(cfg, out, args.count, args.validate)
            print(json.dumps({"out": str(out), "count": len(ids)}))
        elif args.command == "train":
            res = cmd_train(cfg, args.data, out, args.mode, args.resume)
            last = res.log[-1] if res.log else {}
            print(json.dumps({"out": str(out), "checkpoint": str(res.last_checkpoint),
                              "final_loss": last.get("loss_total")}))
        elif args.command == "eval":
            regions = args.regions.split(",") if args.regions else None
            agg = cmd_eval(cfg, args.data, out, args.checkpoint, args.pred_dir, regions, args.mode)
            print(json.dumps(agg, sort_keys=True))
        elif args.command == "refine":
            report = cmd_refine(args.checkpoint, args.image, args.guidance, args.mode, out,
                                args.color_checkpoint, args.panel, args.perturb, args.gt)
            print(json.dumps(report, sort_keys=True))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, CheckpointError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
