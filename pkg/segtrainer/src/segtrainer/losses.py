"""Focal + dice segmentation losses on per-class sigmoid logits.

Focal loss alone floods the output with false obstacles, dice alone learns
nothing valid, so training always combines both (equal weights by default).
"""

from __future__ import annotations

import torch


def focal_loss(logits: torch.Tensor, targets: torch.Tensor,
               gamma: float = 2.0) -> torch.Tensor:
    """Mean focal loss; logits and binary targets shaped (B, C, A, R)."""
    bce = torch.nn.functional.binary_cross_entropy_with_logits(
        logits, targets, reduction="none")
    p = torch.sigmoid(logits)
    p_t = p * targets + (1.0 - p) * (1.0 - targets)
    return ((1.0 - p_t) ** gamma * bce).mean()


def dice_loss(logits: torch.Tensor, targets: torch.Tensor,
              eps: float = 1.0) -> torch.Tensor:
    """Soft dice averaged over batch and channels."""
    p = torch.sigmoid(logits)
    dims = (-2, -1)
    inter = (p * targets).sum(dims)
    denom = p.sum(dims) + targets.sum(dims)
    dice = (2.0 * inter + eps) / (denom + eps)
    return 1.0 - dice.mean()


def combined_loss(logits: torch.Tensor, targets: torch.Tensor,
                  focal_weight: float = 1.0, dice_weight: float = 1.0,
                  gamma: float = 2.0) -> tuple:
    """(total, focal part, dice part); weights must not both be zero."""
    if focal_weight == 0.0 and dice_weight == 0.0:
        raise ValueError("degenerate loss: focal and dice weights are both zero")
    f = focal_loss(logits, targets, gamma)
    d = dice_loss(logits, targets)
    return focal_weight * f + dice_weight * d, f, d
