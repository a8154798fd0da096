"""Multi-task training objective for the segmentation networks.

The total loss is ``mask + lambda * (cls + lnd)`` where the mask term is soft
Dice plus pixelwise binary cross-entropy, ``cls`` is the per-slice presence
cross-entropy, and ``lnd`` is a smooth-L1 penalty on the four boundary
landmark coordinates of slices that actually contain the organ. Absent slices
contribute nothing to the landmark term. All functions work on torch tensors
in the caller's dtype; gradients flow through every term.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .landmarks import ENTRIES_PER_SLICE

PROB_EPS = 1e-7  # clipping bound for probabilities entering logs


@dataclass(frozen=True)
class LossConfig:
    lambda_: float = 1.0
    dice_epsilon: float = 1e-6

    def __post_init__(self):
        if self.lambda_ < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lambda_}")
        if self.dice_epsilon <= 0:
            raise ValueError(f"dice_epsilon must be > 0, got {self.dice_epsilon}")


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar loss components as 0-dim tensors; ``total`` carries the graph."""

    total: torch.Tensor
    mask: torch.Tensor
    dice: torch.Tensor
    ce: torch.Tensor
    cls: torch.Tensor
    lnd: torch.Tensor

    def __post_init__(self):
        for name in ("total", "mask", "dice", "ce", "cls", "lnd"):
            value = getattr(self, name)
            if not torch.isfinite(value):
                raise ValueError(f"loss component {name} is not finite: {value}")
            if float(value) < 0:
                raise ValueError(f"loss component {name} is negative: {float(value)}")

    def as_floats(self) -> dict[str, float]:
        return {
            name: float(getattr(self, name))
            for name in ("total", "mask", "dice", "ce", "cls", "lnd")
        }


def smooth_l1(delta):
    """0.5*d^2 for |d| < 1, |d| - 0.5 otherwise; elementwise."""
    if not torch.is_tensor(delta):
        delta = torch.as_tensor(delta, dtype=torch.float64)
    a = delta.abs()
    return torch.where(a < 1, 0.5 * delta * delta, a - 0.5)


def landmark_loss(t_true: torch.Tensor, t_pred: torch.Tensor, z_true: torch.Tensor) -> torch.Tensor:
    """Smooth-L1 over the 8 coordinates of slices with presence 1.

    ``t_true``/``t_pred`` have shape (N, S, 8) and ``z_true`` (N, S); the sum
    over present slices is divided by the batch size N. Predictions on absent
    slices are ignored entirely.
    """
    if t_true.shape != t_pred.shape:
        raise ValueError(f"landmark shapes differ: {tuple(t_true.shape)} vs {tuple(t_pred.shape)}")
    if t_true.shape[:-1] != z_true.shape:
        raise ValueError(
            f"presence shape {tuple(z_true.shape)} does not match landmarks {tuple(t_true.shape)}"
        )
    if t_true.shape[-1] != 8:
        raise ValueError(f"expected 8 coordinates per slice, got {t_true.shape[-1]}")
    per_slice = smooth_l1(t_true - t_pred).sum(dim=-1)
    gated = per_slice * (z_true > 0.5).to(per_slice.dtype)
    batch = t_true.shape[0] if t_true.dim() >= 3 else 1
    return gated.sum() / batch


def cls_loss(p_pred: torch.Tensor, z_true: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy of the slice-presence predictions."""
    if p_pred.shape != z_true.shape:
        raise ValueError(f"presence shapes differ: {tuple(p_pred.shape)} vs {tuple(z_true.shape)}")
    p = p_pred.clamp(PROB_EPS, 1 - PROB_EPS)
    z = z_true.to(p.dtype)
    return -(z * torch.log(p) + (1 - z) * torch.log(1 - p)).mean()


def bce_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Pixelwise binary cross-entropy, mean over all elements, clipped logs."""
    if pred.shape != target.shape:
        raise ValueError(f"shapes differ: {tuple(pred.shape)} vs {tuple(target.shape)}")
    p = pred.clamp(PROB_EPS, 1 - PROB_EPS)
    t = target.to(p.dtype)
    return -(t * torch.log(p) + (1 - t) * torch.log(1 - p)).mean()


def dice_loss(pred: torch.Tensor, target: torch.Tensor, epsilon: float = 1e-6) -> torch.Tensor:
    """Soft Dice loss, computed per sample and averaged over the batch."""
    if pred.shape != target.shape:
        raise ValueError(f"shapes differ: {tuple(pred.shape)} vs {tuple(target.shape)}")
    n = pred.shape[0]
    p = pred.reshape(n, -1)
    t = target.to(pred.dtype).reshape(n, -1)
    inter = (p * t).sum(dim=1)
    denom = p.sum(dim=1) + t.sum(dim=1)
    per_sample = 1 - (2 * inter + epsilon) / (denom + epsilon)
    # float rounding can push a perfect overlap a hair below zero
    return per_sample.clamp_min(0).mean()


def split_encoded(vec: torch.Tensor):
    """Split a batch of flat landmark vectors (N, S*9) into presence (N, S)
    and coordinates (N, S, 8)."""
    if vec.shape[-1] % ENTRIES_PER_SLICE != 0:
        raise ValueError(f"vector length {vec.shape[-1]} is not a multiple of {ENTRIES_PER_SLICE}")
    n, s = vec.shape[0], vec.shape[-1] // ENTRIES_PER_SLICE
    blocks = vec.view(n, s, ENTRIES_PER_SLICE)
    return blocks[..., 0], blocks[..., 1:]


def total_loss(
    pred_mask: torch.Tensor,
    target_mask: torch.Tensor,
    landmark_pred: torch.Tensor | None = None,
    landmark_true: torch.Tensor | None = None,
    config: LossConfig = LossConfig(),
) -> LossBreakdown:
    """Combined objective. Landmark inputs are flat encoded vectors (N, S*9)
    with the true presence gating the regression term; pass None for variants
    without a landmark head (cls and lnd are then 0)."""
    dice = dice_loss(pred_mask, target_mask, epsilon=config.dice_epsilon)
    ce = bce_loss(pred_mask, target_mask)
    mask = dice + ce
    if (landmark_pred is None) != (landmark_true is None):
        raise ValueError("landmark_pred and landmark_true must be given together")
    if landmark_pred is None:
        zero = torch.zeros((), dtype=pred_mask.dtype, device=pred_mask.device)
        cls = zero
        lnd = zero.clone()
    else:
        if landmark_pred.shape != landmark_true.shape:
            raise ValueError(
                f"landmark shapes differ: {tuple(landmark_pred.shape)} vs {tuple(landmark_true.shape)}"
            )
        p_pred, t_pred = split_encoded(landmark_pred)
        z_true, t_true = split_encoded(landmark_true)
        cls = cls_loss(p_pred, z_true)
        lnd = landmark_loss(t_true, t_pred, z_true)
    total = mask + config.lambda_ * (cls + lnd)
    return LossBreakdown(total=total, mask=mask, dice=dice, ce=ce, cls=cls, lnd=lnd)
