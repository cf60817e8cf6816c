"""Feature excitation, the curriculum-rate schedule and excitation-map construction."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

STAGE1_LAST_EPOCH = 2
STAGE2_LAST_EPOCH = 10
# Keeps beta strictly inside (0, 1) even where a float32 logistic saturates.
RATE_MARGIN = 1e-6


class ExcitationRate(nn.Module):
    """Learnable rate kept in (0, 1) by a logistic over an unconstrained scalar.

    beta = m + (1 - 2m) * sigmoid(raw) with a tiny margin m, so the bounds stay
    strict at any finite raw value in single precision.
    """

    def __init__(self, init: float = 0.5):
        super().__init__()
        if not RATE_MARGIN < init < 1 - RATE_MARGIN:
            raise ValueError("initial excitation rate must lie in (0, 1)")
        p = (init - RATE_MARGIN) / (1 - 2 * RATE_MARGIN)
        self.raw = nn.Parameter(torch.tensor(math.log(p / (1 - p))))

    def forward(self):
        return RATE_MARGIN + (1 - 2 * RATE_MARGIN) * torch.sigmoid(self.raw)

    def extra_repr(self):
        return f"beta={float(self.forward().detach()):.4f}"


def excite(features, excitation, beta):
    """Blend ``features`` with their excitation-gated copy.

    Computes ``beta * E * M + (1 - beta) * M`` in the factored form
    ``M * (1 - beta * (1 - E))``, which is exact when E == 1 or beta == 0.
    ``excitation`` is (..., 1, h, w) or (..., h, w) and broadcasts over channels.
    """
    if excitation.dim() == features.dim() - 1:
        excitation = excitation.unsqueeze(-3)
    if excitation.shape[-2:] != features.shape[-2:]:
        raise ValueError(
            f"excitation map is {tuple(excitation.shape[-2:])} but features are {tuple(features.shape[-2:])}"
        )
    if excitation.shape[-3] != 1:
        raise ValueError("excitation map must be single-channel")
    return features * (1 - beta * (1 - excitation))


def curriculum_alpha(epoch: int) -> float:
    """Ground-truth weight for ``epoch`` (1-based): 1, then a half-cosine to 0 over epochs 2..10."""
    if epoch < 1:
        raise ValueError(f"epochs are 1-based, got {epoch}")
    if epoch <= STAGE1_LAST_EPOCH:
        return 1.0
    if epoch > STAGE2_LAST_EPOCH:
        return 0.0
    span = STAGE2_LAST_EPOCH - STAGE1_LAST_EPOCH
    return 0.5 * (1.0 + math.cos(math.pi * (epoch - STAGE1_LAST_EPOCH) / span))


@dataclass(frozen=True)
class CurriculumState:
    epoch: int
    alpha: float
    stage: int


def curriculum_state(epoch: int) -> CurriculumState:
    if epoch <= STAGE1_LAST_EPOCH:
        stage = 1
    elif epoch <= STAGE2_LAST_EPOCH:
        stage = 2
    else:
        stage = 3
    return CurriculumState(epoch, curriculum_alpha(epoch), stage)


def make_excitation_map(gt, complementary, alpha: float):
    """``alpha * GT + (1 - alpha) * S``; returns GT / S themselves at the stage endpoints."""
    if not 0 <= alpha <= 1:
        raise ValueError(f"curriculum rate must lie in [0, 1], got {alpha}")
    complementary = complementary.clamp(0, 1)
    if alpha == 0:
        return complementary
    if gt is None:
        raise ValueError(f"ground truth is required when alpha = {alpha} > 0")
    if alpha == 1:
        return gt
    return alpha * gt + (1 - alpha) * complementary


def downsample_map(excitation, size):
    """Bilinear (antialiased) resize of an (..., h, w) map to ``size``."""
    h, w = size
    src_h, src_w = excitation.shape[-2:]
    if h < 1 or w < 1 or h > src_h or w > src_w:
        raise ValueError(f"cannot downsample a {src_h}x{src_w} map to {h}x{w}")
    if (h, w) == (src_h, src_w):
        return excitation
    lead = excitation.shape[:-2]
    flat = excitation.reshape(-1, 1, src_h, src_w)
    out = F.interpolate(flat, size=(h, w), mode="bilinear", align_corners=False, antialias=True)
    return out.clamp(0, 1).reshape(*lead, h, w)
