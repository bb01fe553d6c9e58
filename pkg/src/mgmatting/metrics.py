"""Matting error metrics (SAD, MSE, Grad, Conn) over a region mask.

Conventions follow the widely used matting evaluation code: SAD, Grad and
Conn are divided by 1000; MSE is a plain mean and is multiplied by 1e3 only
when reported.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from scipy import ndimage

REGIONS = ("unknown", "whole", "detail")
MSE_REPORT_SCALE = 1e3


def _region(pred: np.ndarray, region: Optional[np.ndarray]) -> np.ndarray:
    if region is None:
        return np.ones(pred.shape, dtype=bool)
    if region.shape != pred.shape:
        raise ValueError(f"region shape {region.shape} != {pred.shape}")
    return region > 0.5


def _check(pred, gt):
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)


def abs_diff_sum(pred, gt, region=None) -> float:
    """Unscaled sum of |pred - gt| over the region, correctly rounded."""
    pred, gt = _check(pred, gt)
    return math.fsum(np.abs(pred - gt)[_region(pred, region)].tolist())


def sad(pred, gt, region=None) -> float:
    return abs_diff_sum(pred, gt, region) / 1000.0


def mse(pred, gt, region=None) -> float:
    pred, gt = _check(pred, gt)
    r = _region(pred, region)
    n = r.sum()
    return float(((pred - gt) ** 2)[r].sum() / n) if n else 0.0


def _gauss_factors(sigma: float):
    """Unit-norm 1-D Gaussian and Gaussian-derivative taps, radius ceil(3 sigma)."""
    r = math.ceil(3 * sigma)
    u = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(u ** 2) / (2 * sigma ** 2)) / (sigma * math.sqrt(2 * math.pi))
    dg = -u * g / sigma ** 2
    return g / np.sqrt((g ** 2).sum()), dg / np.sqrt((dg ** 2).sum())


def gauss_derivative_kernels(sigma: float = 1.4):
    """x- and y-derivative-of-Gaussian kernels, radius ceil(3 sigma), unit L2 norm."""
    g, dg = _gauss_factors(sigma)
    hx = np.outer(g, dg)
    return hx, hx.T.copy()


def _derivative(alpha: np.ndarray, g: np.ndarray, dg: np.ndarray, axis: int) -> np.ndarray:
    """Smooth across ``axis`` with ``g``, then convolve along it with the odd taps ``dg``.

    The derivative is summed as pairwise differences so flat inputs give exactly 0.
    """
    r = len(dg) // 2
    smooth = ndimage.correlate1d(alpha, g, axis=1 - axis, mode="nearest")
    pad = [(0, 0), (0, 0)]
    pad[axis] = (r, r)
    p = np.pad(smooth, pad, mode="edge")
    n = alpha.shape[axis]
    out = np.zeros_like(smooth)
    for j in range(1, r + 1):
        ahead = np.take(p, np.arange(r + j, r + j + n), axis=axis)
        behind = np.take(p, np.arange(r - j, r - j + n), axis=axis)
        out += dg[r - j] * (ahead - behind)
    return out


def gradient_magnitude(alpha: np.ndarray, sigma: float = 1.4) -> np.ndarray:
    """Per-pixel gradient magnitude; equals convolving with the kernels above, replicate borders."""
    g, dg = _gauss_factors(sigma)
    alpha = np.asarray(alpha, dtype=np.float64)
    gx = _derivative(alpha, g, dg, axis=1)
    gy = _derivative(alpha, g, dg, axis=0)
    return np.sqrt(gx ** 2 + gy ** 2)


def grad_error(pred, gt, region=None, sigma: float = 1.4) -> float:
    pred, gt = _check(pred, gt)
    diff = (gradient_magnitude(pred, sigma) - gradient_magnitude(gt, sigma)) ** 2
    return float(diff[_region(pred, region)].sum() / 1000.0)


def _largest_component(mask: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(mask)  # 4-connectivity
    if n == 0:
        return np.zeros(mask.shape, dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (np.argmax(sizes) + 1)


def connectivity_levels(pred, gt, step: float = 0.1) -> np.ndarray:
    """Per-pixel last threshold at which the pixel still belongs to the shared largest component."""
    n_steps = int(round(1.0 / step))
    thresholds = [i * step for i in range(n_steps + 1)]
    level = np.full(pred.shape, -1.0)
    for i in range(1, len(thresholds)):
        omega = _largest_component((pred >= thresholds[i]) & (gt >= thresholds[i]))
        newly_lost = (level == -1) & ~omega
        level[newly_lost] = thresholds[i - 1]
    level[level == -1] = 1.0
    return level


def conn_error(pred, gt, region=None, step: float = 0.1, theta: float = 0.15) -> float:
    pred, gt = _check(pred, gt)
    level = connectivity_levels(pred, gt, step)
    d_pred = pred - level
    d_gt = gt - level
    phi_pred = 1 - d_pred * (d_pred >= theta)
    phi_gt = 1 - d_gt * (d_gt >= theta)
    return float(np.abs(phi_pred - phi_gt)[_region(pred, region)].sum() / 1000.0)


@dataclass
class MetricReport:
    region: str
    sad: float
    mse: float
    grad: float
    conn: float
    pixel_count: int

    def row(self) -> dict:
        """Reporting view: MSE scaled by 1e3."""
        d = asdict(self)
        d["mse"] = self.mse * MSE_REPORT_SCALE
        return d


def region_mask(sample, region: str, shape) -> Optional[np.ndarray]:
    if region == "whole":
        return np.ones(shape)
    if region not in REGIONS:
        raise ValueError(f"unknown region {region!r}")
    mask = getattr(sample, f"{region}_region", None) if sample is not None else None
    if mask is None:
        raise ValueError(f"sample has no {region} region mask")
    return mask


def evaluate(pred, gt, sample=None, regions: Iterable[str] = ("whole",)) -> list[MetricReport]:
    """One :class:`MetricReport` per requested region."""
    reports = []
    for name in regions:
        mask = region_mask(sample, name, pred.shape)
        reports.append(MetricReport(
            region=name,
            sad=sad(pred, gt, mask),
            mse=mse(pred, gt, mask),
            grad=grad_error(pred, gt, mask),
            conn=conn_error(pred, gt, mask),
            pixel_count=int((mask > 0.5).sum()),
        ))
    return reports


def write_reports(rows: list[dict], csv_path, json_path) -> dict:
    """Write per-(sample, region) rows as CSV and per-region means as JSON."""
    fields = ["sample", "region", "sad", "mse", "grad", "conn", "pixel_count"]
    csv_path, json_path = Path(csv_path), Path(json_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with csv_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r[k] for k in fields})
    agg = aggregate(rows)
    json_path.write_text(json.dumps(agg, indent=2, sort_keys=True) + "\n")
    return agg


def aggregate(rows: list[dict]) -> dict:
    out = {}
    for name in dict.fromkeys(r["region"] for r in rows):
        sel = [r for r in rows if r["region"] == name]
        out[name] = {k: math.fsum(r[k] for r in sel) / len(sel) for k in ("sad", "mse", "grad", "conn")}
        out[name]["count"] = len(sel)
    return out
