"""On-disk dataset layout.

::

    image/NNNN.png  alpha/NNNN.png  fg/NNNN.png  bg/NNNN.png  guidance/NNNN.png
    regions/NNNN_unknown.png  [regions/NNNN_detail.png]
    manifest.json

Planes are written as 16-bit PNG.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np

from .core import MattingSample, read_png, write_png

BITS = 16
# composite of 16-bit quantized planes vs the quantized image
ROUND_TRIP_ATOL = 3.0 / 65535


def sample_id(index: int) -> str:
    return f"{index:04d}"


def write_sample(root, index: int, sample: MattingSample) -> None:
    root = Path(root)
    sid = sample_id(index)
    write_png(root / "image" / f"{sid}.png", sample.image, BITS)
    write_png(root / "alpha" / f"{sid}.png", sample.alpha, BITS)
    write_png(root / "fg" / f"{sid}.png", sample.foreground, BITS)
    write_png(root / "bg" / f"{sid}.png", sample.background, BITS)
    write_png(root / "guidance" / f"{sid}.png", sample.guidance, BITS)
    if sample.unknown_region is not None:
        write_png(root / "regions" / f"{sid}_unknown.png", sample.unknown_region, BITS)
    if sample.detail_region is not None:
        write_png(root / "regions" / f"{sid}_detail.png", sample.detail_region, BITS)


def write_manifest(root, ids: list[str], seed: int, config: dict) -> None:
    manifest = {"count": len(ids), "seed": seed, "samples": ids, "config": config}
    Path(root, "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(root) -> dict:
    path = Path(root, "manifest.json")
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json in {root}")
    return json.loads(path.read_text())


def _optional(path: Path) -> Optional[np.ndarray]:
    return read_png(path) if path.exists() else None


def read_sample(root, sid: str) -> MattingSample:
    root = Path(root)
    return MattingSample(
        image=read_png(root / "image" / f"{sid}.png"),
        alpha=read_png(root / "alpha" / f"{sid}.png"),
        foreground=read_png(root / "fg" / f"{sid}.png"),
        background=read_png(root / "bg" / f"{sid}.png"),
        guidance=read_png(root / "guidance" / f"{sid}.png"),
        unknown_region=_optional(root / "regions" / f"{sid}_unknown.png"),
        detail_region=_optional(root / "regions" / f"{sid}_detail.png"),
        meta={"id": sid},
    )


def load_dataset(root) -> list[MattingSample]:
    return [read_sample(root, sid) for sid in read_manifest(root)["samples"]]
