"""Hybrid BCE + SSIM + IoU objective.

Every per-map loss takes (..., H, W) tensors and returns one value per map,
i.e. a tensor with the leading shape (a scalar for a single map).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

BCE_EPS = 1e-7
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
SSIM_WINDOW = 11
BRANCHES = ("spatial", "temporal", "video")


def _check(pred, gt):
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} and ground truth {tuple(gt.shape)} differ")


def bce_loss(pred, gt):
    """Binary cross-entropy summed over pixels."""
    _check(pred, gt)
    p = pred.clamp(BCE_EPS, 1 - BCE_EPS)
    return -(gt * torch.log(p) + (1 - gt) * torch.log(1 - p)).sum(dim=(-2, -1))


def ssim_loss(pred, gt, window: int = SSIM_WINDOW):
    """1 - mean SSIM over all window x window patches (uniform weights, stride 1, no padding)."""
    _check(pred, gt)
    h, w = pred.shape[-2:]
    if h < window or w < window:
        raise ValueError(f"{h}x{w} map is smaller than the {window}x{window} SSIM patch")
    lead = pred.shape[:-2]
    x = pred.reshape(-1, 1, h, w)
    y = gt.reshape(-1, 1, h, w).to(x.dtype)

    def mean(t):
        return F.avg_pool2d(t, window, stride=1)

    mu_x, mu_y = mean(x), mean(y)
    var_x = mean(x * x) - mu_x**2
    var_y = mean(y * y) - mu_y**2
    cov = mean(x * y) - mu_x * mu_y
    ssim = ((2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)) / (
        (mu_x**2 + mu_y**2 + SSIM_C1) * (var_x + var_y + SSIM_C2)
    )
    return (1 - ssim.mean(dim=(-3, -2, -1))).reshape(lead)


def iou_loss(pred, gt):
    """Soft IoU loss; two empty maps count as perfect agreement."""
    _check(pred, gt)
    inter = (pred * gt).sum(dim=(-2, -1))
    union = (pred + gt - pred * gt).sum(dim=(-2, -1))
    empty = union <= 0
    safe = torch.where(empty, torch.ones_like(union), union)
    return torch.where(empty, torch.zeros_like(union), 1 - inter / safe)


def hybrid_loss(pred, gt, window: int = SSIM_WINDOW):
    return bce_loss(pred, gt) + ssim_loss(pred, gt, window) + iou_loss(pred, gt)


@dataclass
class BranchLoss:
    bce: torch.Tensor
    ssim: torch.Tensor
    iou: torch.Tensor

    @property
    def total(self):
        return self.bce + self.ssim + self.iou


@dataclass
class LossBreakdown:
    branches: dict = field(default_factory=dict)

    @property
    def total(self):
        return sum(b.total for b in self.branches.values())

    def component(self, name):
        return sum(getattr(b, name) for b in self.branches.values())

    def as_floats(self):
        out = {}
        for branch, parts in self.branches.items():
            out[f"{branch}_bce"] = float(parts.bce)
            out[f"{branch}_ssim"] = float(parts.ssim)
            out[f"{branch}_iou"] = float(parts.iou)
            out[branch] = float(parts.total)
        out["total"] = float(self.total)
        return out


def branch_loss(pred, gt, window: int = SSIM_WINDOW) -> BranchLoss:
    """Hybrid loss parts, each averaged over all leading (batch/frame) dimensions."""
    return BranchLoss(bce_loss(pred, gt).mean(), ssim_loss(pred, gt, window).mean(), iou_loss(pred, gt).mean())


def total_loss(outputs, gts, window: int = SSIM_WINDOW, branches=BRANCHES) -> LossBreakdown:
    """Sum of the per-branch hybrid losses, each a mean over frames.

    ``outputs`` is a FrameOutputs; ``gts`` has the same (B, N, 1, H, W) shape as its maps.
    """
    preds = {
        "spatial": outputs.saliency_spatial,
        "temporal": outputs.saliency_temporal,
        "video": outputs.saliency_video,
    }
    return LossBreakdown({name: branch_loss(preds[name], gts, window) for name in branches})
