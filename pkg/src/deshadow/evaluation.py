"""Region-masked error metrics in CIELAB and dataset-level aggregation.

The headline metric is the root mean squared Lab error over shadow (S),
non-shadow (N) and all (A) pixels. Per pixel, the squared channel
differences are averaged over L*, a*, b*; the region value is the square
root of the region mean of that per-pixel score. The all-region MSE is
computed as the count-weighted mean of the region MSEs, so the
decomposition identity holds exactly.

Because much of the literature reports the per-channel mean absolute
Lab difference under the same name, an "mae" mode is provided and every
report labels which convention produced it.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import colorio
from .datasets import SampleRecord, load_sample
from .errors import ShapeError

METRIC_MODES = ("rmse", "mae")


@dataclass
class RegionMetrics:
    shadow: float | None
    nonshadow: float | None
    all: float
    shadow_count: int
    nonshadow_count: int
    mode: str = "rmse"


def _region_score(score: np.ndarray, mask: np.ndarray) -> tuple[float | None, float | None, float]:
    """Region means of a per-pixel score with the exact weighted-mean identity."""
    n_s = int(mask.sum())
    n_n = int(mask.size - n_s)
    mean_s = float(score[mask == 1].mean()) if n_s else None
    mean_n = float(score[mask == 0].mean()) if n_n else None
    if mean_s is None:
        mean_all = mean_n
    elif mean_n is None:
        mean_all = mean_s
    else:
        mean_all = (n_s * mean_s + n_n * mean_n) / (n_s + n_n)
    return mean_s, mean_n, mean_all


def rmse_lab(
    pred: np.ndarray,
    gt: np.ndarray,
    mask: np.ndarray,
    mode: str = "rmse",
    quantize: bool = False,
) -> RegionMetrics:
    """Lab-space error between prediction and ground truth, split by region.

    mask is (H, W) with 1 marking shadow pixels. mode "rmse" is the
    root-mean-square convention described in the module docstring; "mae"
    is the per-channel mean absolute difference. quantize snaps both
    images to the 8-bit lattice before conversion.
    """
    if pred.shape != gt.shape:
        raise ShapeError(f"rmse_lab: shape mismatch {pred.shape} vs {gt.shape}")
    if mask.shape != pred.shape[:2]:
        raise ShapeError(f"rmse_lab: mask shape {mask.shape} vs image {pred.shape[:2]}")
    if mode not in METRIC_MODES:
        raise ShapeError(f"unknown metric mode {mode!r}")
    if quantize:
        pred = colorio.quantize_to_8bit(pred)
        gt = colorio.quantize_to_8bit(gt)
    diff = colorio.srgb_to_lab(gt) - colorio.srgb_to_lab(pred)
    if mode == "rmse":
        score = (diff**2).mean(axis=2)
    else:
        score = np.abs(diff).mean(axis=2)
    mean_s, mean_n, mean_all = _region_score(score, mask)
    if mode == "rmse":
        to_metric = lambda v: None if v is None else math.sqrt(v)
        mean_s, mean_n, mean_all = to_metric(mean_s), to_metric(mean_n), to_metric(mean_all)
    n_s = int(mask.sum())
    return RegionMetrics(
        shadow=mean_s,
        nonshadow=mean_n,
        all=mean_all,
        shadow_count=n_s,
        nonshadow_count=int(mask.size - n_s),
        mode=mode,
    )


def derive_eval_mask(shadow: np.ndarray, shadow_free: np.ndarray, tau_l: float = 5.0) -> np.ndarray:
    """Shadow mask from the pair itself: pixels whose L* rises by more than
    tau_l from shadow to shadow-free, smoothed by one 3x3 majority vote."""
    if shadow.shape != shadow_free.shape:
        raise ShapeError(f"derive_eval_mask: shape mismatch {shadow.shape} vs {shadow_free.shape}")
    delta_l = colorio.srgb_to_lab(shadow_free)[..., 0] - colorio.srgb_to_lab(shadow)[..., 0]
    raw = (delta_l > tau_l).astype(np.uint8)
    padded = np.pad(raw, 1, mode="edge")
    votes = np.zeros_like(raw, dtype=np.int32)
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            votes += padded[dy : dy + raw.shape[0], dx : dx + raw.shape[1]]
    return (votes >= 5).astype(np.uint8)


def mask_score(pred_mask: np.ndarray, gt_mask: np.ndarray) -> tuple[float, float]:
    """(pixel accuracy, balanced error rate) of a predicted binary mask."""
    if pred_mask.shape != gt_mask.shape:
        raise ShapeError(f"mask_score: shape mismatch {pred_mask.shape} vs {gt_mask.shape}")
    pred = pred_mask.astype(bool)
    gt = gt_mask.astype(bool)
    accuracy = float((pred == gt).mean())
    errors = []
    if gt.any():
        errors.append(float((~pred[gt]).mean()))
    if (~gt).any():
        errors.append(float(pred[~gt].mean()))
    return accuracy, float(np.mean(errors))


@dataclass
class EvaluationRow:
    name: str
    metrics: RegionMetrics


@dataclass
class EvaluationResult:
    rows: list[EvaluationRow]
    mean: RegionMetrics
    skipped: list[str]
    mask_source: str
    mode: str


def _mean_metrics(rows: list[EvaluationRow], mode: str, pooled: bool) -> RegionMetrics:
    n_s = sum(r.metrics.shadow_count for r in rows)
    n_n = sum(r.metrics.nonshadow_count for r in rows)
    if pooled:
        # pool pixels: combine region MSEs (or MAEs) weighted by counts
        def pool(values, counts):
            pairs = [(v, c) for v, c in zip(values, counts) if v is not None and c > 0]
            if not pairs:
                return None
            if mode == "rmse":
                return math.sqrt(sum(v * v * c for v, c in pairs) / sum(c for _, c in pairs))
            return sum(v * c for v, c in pairs) / sum(c for _, c in pairs)

        s = pool([r.metrics.shadow for r in rows], [r.metrics.shadow_count for r in rows])
        n = pool([r.metrics.nonshadow for r in rows], [r.metrics.nonshadow_count for r in rows])
        a = pool(
            [r.metrics.all for r in rows],
            [r.metrics.shadow_count + r.metrics.nonshadow_count for r in rows],
        )
    else:
        def per_image(vals):
            vals = [v for v in vals if v is not None]
            return float(np.mean(vals)) if vals else None

        s = per_image([r.metrics.shadow for r in rows])
        n = per_image([r.metrics.nonshadow for r in rows])
        a = per_image([r.metrics.all for r in rows])
    return RegionMetrics(shadow=s, nonshadow=n, all=a, shadow_count=n_s, nonshadow_count=n_n, mode=mode)


def evaluate_dataset(
    predictor,
    records: list[SampleRecord],
    mask_source: str = "provided",
    mode: str = "rmse",
    image_size: int | None = None,
    quantize: bool = False,
    pooled_mean: bool = False,
    tau_l: float = 5.0,
) -> EvaluationResult:
    """Per-image region metrics plus a dataset mean row.

    predictor maps one (H, W, 3) shadow image to its removal result.
    mask_source "provided" uses each record's mask file and skips records
    without one; "derived" thresholds the L* difference of the pair.
    The mean row averages per-image metrics unless pooled_mean is set.
    """
    if mask_source not in ("provided", "derived"):
        raise ShapeError(f"unknown mask source {mask_source!r}")
    rows: list[EvaluationRow] = []
    skipped: list[str] = []
    for rec in records:
        try:
            shadow, free, mask = load_sample(rec, image_size)
        except Exception as exc:  # unreadable pair: report and continue
            skipped.append(f"{rec.stem}: {exc}")
            continue
        if mask_source == "provided":
            if mask is None:
                skipped.append(f"{rec.stem}: no mask provided")
                continue
        else:
            mask = derive_eval_mask(shadow, free, tau_l)
        pred = predictor(shadow)
        rows.append(EvaluationRow(rec.stem, rmse_lab(pred, free, mask, mode=mode, quantize=quantize)))
    if not rows:
        raise ShapeError("evaluate_dataset: nothing evaluated")
    mean = _mean_metrics(rows, mode, pooled_mean)
    return EvaluationResult(rows=rows, mean=mean, skipped=skipped, mask_source=mask_source, mode=mode)


CSV_HEADER = ("image", "S", "N", "A", "S_count", "N_count", "mode")


def write_csv(result: EvaluationResult, path) -> None:
    def cell(v):
        return "" if v is None else repr(v)

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for row in result.rows:
            m = row.metrics
            writer.writerow(
                [row.name, cell(m.shadow), cell(m.nonshadow), cell(m.all), m.shadow_count, m.nonshadow_count, m.mode]
            )
        m = result.mean
        writer.writerow(
            ["mean", cell(m.shadow), cell(m.nonshadow), cell(m.all), m.shadow_count, m.nonshadow_count, m.mode]
        )


def format_summary(result: EvaluationResult, label: str = "") -> str:
    """Aligned S / N / A text table for terminal output."""
    def fmt(v):
        return "   -  " if v is None else f"{v:6.3f}"

    m = result.mean
    lines = [
        f"{'method':<16} {'S':>6} {'N':>6} {'A':>6}   ({m.mode}, mask={result.mask_source}, {len(result.rows)} images)",
        f"{label or 'result':<16} {fmt(m.shadow)} {fmt(m.nonshadow)} {fmt(m.all)}",
    ]
    if result.skipped:
        lines.append(f"skipped {len(result.skipped)} unpairable/maskless file(s)")
    return "\n".join(lines)


def write_mismatch_report(lines: list[str], path) -> None:
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))
