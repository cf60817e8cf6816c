"""MAE, maximum F-beta and S-measure, plus dataset-level aggregation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tenet.data import DatasetLayoutError, list_clips, read_map

BETA2 = 0.3
NUM_THRESHOLDS = 256
S_MU = 0.5
_EPS = np.finfo(np.float64).eps


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    return pred, gt


def mae(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    return float(np.abs(pred - gt).mean())


def f_beta_curve(pred, gt) -> np.ndarray:
    """F-beta at each of 256 uniform thresholds on [0, 1]; a pixel is positive when pred >= t."""
    pred, gt = _pair(pred, gt)
    fg = gt > 0.5
    positives = fg.sum()
    if positives == 0:
        raise ValueError("F-beta is undefined for an empty ground-truth foreground")
    thresholds = np.linspace(0.0, 1.0, NUM_THRESHOLDS)
    # count of pixels >= t, for all pixels and for foreground pixels
    all_sorted = np.sort(pred.ravel())
    fg_sorted = np.sort(pred[fg])
    predicted = all_sorted.size - np.searchsorted(all_sorted, thresholds, side="left")
    tp = fg_sorted.size - np.searchsorted(fg_sorted, thresholds, side="left")
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / np.maximum(predicted, 1), 0.0)
        recall = tp / positives
        denom = BETA2 * precision + recall
        f = np.where(denom > 0, (1 + BETA2) * precision * recall / np.where(denom > 0, denom, 1), 0.0)
    return f


def max_f_beta(pred, gt) -> float:
    return float(f_beta_curve(pred, gt).max())


def _object_score(values):
    if values.size == 0:
        return 0.0
    mean = values.mean()
    std = values.std(ddof=1) if values.size > 1 else 0.0
    return 2 * mean / (mean**2 + 1 + std + _EPS)


def s_object(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    fg = gt > 0.5
    u = fg.mean()
    score_fg = _object_score(pred[fg])
    score_bg = _object_score(1 - pred[~fg])
    return float(u * score_fg + (1 - u) * score_bg)


def _centroid(fg):
    h, w = fg.shape
    if not fg.any():
        return int(round(w / 2)), int(round(h / 2))
    ys, xs = np.nonzero(fg)
    return int(round(xs.mean())) + 1, int(round(ys.mean())) + 1


def _block_ssim(pred, gt):
    n = pred.size
    x, y = pred.mean(), gt.mean()
    var_x = ((pred - x) ** 2).sum() / (n - 1 + _EPS)
    var_y = ((gt - y) ** 2).sum() / (n - 1 + _EPS)
    cov = ((pred - x) * (gt - y)).sum() / (n - 1 + _EPS)
    num = 4 * x * y * cov
    den = (x**2 + y**2) * (var_x + var_y)
    if num != 0:
        return num / (den + _EPS)
    return 1.0 if den == 0 else 0.0


def s_region(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    fg = (gt > 0.5).astype(np.float64)
    h, w = fg.shape
    cx, cy = _centroid(fg > 0)
    total = float(h * w)
    score = 0.0
    for rows, cols in (
        (slice(0, cy), slice(0, cx)),
        (slice(0, cy), slice(cx, w)),
        (slice(cy, h), slice(0, cx)),
        (slice(cy, h), slice(cx, w)),
    ):
        block_p, block_g = pred[rows, cols], fg[rows, cols]
        if block_p.size == 0:
            continue
        score += block_p.size / total * _block_ssim(block_p, block_g)
    return float(score)


def s_measure(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    fg = gt > 0.5
    ratio = fg.mean()
    if ratio == 0:
        score = 1 - pred.mean()
    elif ratio == 1:
        score = pred.mean()
    else:
        score = S_MU * s_object(pred, gt) + (1 - S_MU) * s_region(pred, gt)
    return float(min(max(score, 0.0), 1.0))


@dataclass
class ClipScores:
    clip: str
    frames: int
    mae: float
    maxf: float
    smeasure: float
    maxf_skipped: int = 0


@dataclass
class MetricReport:
    clips: list = field(default_factory=list)

    @property
    def frames(self):
        return sum(c.frames for c in self.clips)

    def _mean(self, attr):
        vals = [getattr(c, attr) for c in self.clips if not np.isnan(getattr(c, attr))]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def mae(self):
        return self._mean("mae")

    @property
    def maxf(self):
        return self._mean("maxf")

    @property
    def smeasure(self):
        return self._mean("smeasure")

    @property
    def maxf_skipped(self):
        return sum(c.maxf_skipped for c in self.clips)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["clip", "frames", "mae", "maxf", "smeasure"])
        for c in self.clips:
            writer.writerow([c.clip, c.frames, f"{c.mae:.6f}", f"{c.maxf:.6f}", f"{c.smeasure:.6f}"])
        writer.writerow(["mean", self.frames, f"{self.mae:.6f}", f"{self.maxf:.6f}", f"{self.smeasure:.6f}"])
        return buf.getvalue()

    def to_table(self) -> str:
        width = max([len(c.clip) for c in self.clips] + [4])
        lines = [f"{'clip':<{width}}  frames     MAE   maxF     S"]
        for c in self.clips + [ClipScores("mean", self.frames, self.mae, self.maxf, self.smeasure)]:
            lines.append(f"{c.clip:<{width}}  {c.frames:6d}  {c.mae:.4f} {c.maxf:.4f} {c.smeasure:.4f}")
        if self.maxf_skipped:
            lines.append(f"({self.maxf_skipped} frames with empty ground truth excluded from maxF)")
        return "\n".join(lines)


def evaluate_clip(name, preds, gts) -> ClipScores:
    maes, fs, ss = [], [], []
    skipped = 0
    for pred, gt in zip(preds, gts):
        maes.append(mae(pred, gt))
        ss.append(s_measure(pred, gt))
        if (np.asarray(gt) > 0.5).any():
            fs.append(max_f_beta(pred, gt))
        else:
            skipped += 1
    maxf = float(np.mean(fs)) if fs else float("nan")
    return ClipScores(name, len(maes), float(np.mean(maes)), maxf, float(np.mean(ss)), skipped)


def evaluate_dataset(pred_root, gt_root) -> MetricReport:
    """Score every ground-truth mask under ``gt_root`` against ``pred_root``.

    Both trees use the dataset layout (``<clip>/masks/<frame>.png``).
    """
    pred_root, gt_root = Path(pred_root), Path(gt_root)
    report = MetricReport()
    for clip_dir in list_clips(gt_root, marker="masks"):
        gt_paths = sorted((clip_dir / "masks").glob("*.png"))
        if not gt_paths:
            continue
        preds, gts = [], []
        for gt_path in gt_paths:
            pred_path = pred_root / clip_dir.name / "masks" / gt_path.name
            if not pred_path.exists():
                raise DatasetLayoutError(f"missing prediction for {clip_dir.name}/{gt_path.name} (expected {pred_path})")
            gts.append(read_map(gt_path))
            preds.append(read_map(pred_path))
        report.clips.append(evaluate_clip(clip_dir.name, preds, gts))
    return report
