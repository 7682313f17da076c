"""Loss terms and joint objectives for all training schemes.

Every function takes torch tensors in NCHW (or CHW) layout and returns a
0-dim tensor, so the same code serves training (autograd) and evaluation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import torch

from .embedding import LabelRangeError, ShapeError

EPS = 1e-7

Scalar = Union[float, torch.Tensor]


class NumericDomainError(ValueError):
    """Probabilities fell outside [0, 1]."""


@dataclass
class LossWeights:
    lambda_l1: float = 100.0
    lambda_seg: float = 1.0
    lambda_rec: float = 0.0
    lambda_int: float = 0.0

    def __post_init__(self) -> None:
        for name in ("lambda_l1", "lambda_seg", "lambda_rec", "lambda_int"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative, got {getattr(self, name)}")


@dataclass
class LossValues:
    adv: Scalar = 0.0
    l1: Scalar = 0.0
    seg: Scalar = 0.0
    rec: Scalar = 0.0
    int_sum: Scalar = 0.0
    model: Scalar = 0.0


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def l1_loss(estimate: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over every element."""
    _same_shape(estimate, target, "l1_loss")
    return (estimate - target).abs().mean()


def bce(probs: torch.Tensor, target: float) -> torch.Tensor:
    """Mean binary cross-entropy against a constant 0/1 target, clamped at ``EPS``."""
    with torch.no_grad():
        lo, hi = float(probs.min()), float(probs.max())
    if lo < 0 or hi > 1 or probs.isnan().any():
        raise NumericDomainError(f"discriminator outputs must lie in [0, 1]; got range [{lo}, {hi}]")
    p = probs.clamp(EPS, 1 - EPS)
    if target == 1:
        return -torch.log(p).mean()
    if target == 0:
        return -torch.log1p(-p).mean()
    raise ValueError(f"bce target must be 0 or 1, got {target}")


def adversarial_losses(d_real: torch.Tensor, d_fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Returns ``(d_loss, g_adv)``.

    ``d_loss = (BCE(real, 1) + BCE(fake, 0)) / 2``; the generator uses the
    non-saturating ``BCE(fake, 1)``.
    """
    d_loss = 0.5 * (bce(d_real, 1) + bce(d_fake, 0))
    return d_loss, bce(d_fake, 1)


def cgan_generator_objective(g_adv: Scalar, l1: Scalar, lambda_l1: float) -> Scalar:
    if lambda_l1 == 0:
        return g_adv
    return g_adv + lambda_l1 * l1


def seg_loss(probs: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Average cross-entropy of softmax ``probs`` (N,K,H,W) against labels (N,H,W)."""
    if probs.dim() == 3:
        probs = probs.unsqueeze(0)
    if gt.dim() == 2:
        gt = gt.unsqueeze(0)
    if probs.dim() != 4 or gt.dim() != 3 or probs.shape[0] != gt.shape[0] or probs.shape[2:] != gt.shape[1:]:
        raise ShapeError(f"seg_loss: probs {tuple(probs.shape)} vs labels {tuple(gt.shape)}")
    k = probs.shape[1]
    if gt.numel() and (int(gt.min()) < 0 or int(gt.max()) >= k):
        raise LabelRangeError(f"seg_loss: labels must lie in [0, {k})")
    picked = probs.gather(1, gt.long().unsqueeze(1)).squeeze(1)
    return -torch.log(picked.clamp(min=EPS)).mean()


def rec_loss(reconstruction: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
    """Mean squared error between reconstruction and input."""
    _same_shape(reconstruction, image, "rec_loss")
    return ((reconstruction - image) ** 2).mean()


def int_loss(encoder_maps: Sequence[torch.Tensor], decoder_maps: Sequence[torch.Tensor]) -> torch.Tensor:
    """Sum over levels of the per-level mean squared error."""
    if len(encoder_maps) != len(decoder_maps):
        raise ShapeError(f"int_loss: {len(encoder_maps)} encoder maps vs {len(decoder_maps)} decoder maps")
    if not encoder_maps:
        raise ShapeError("int_loss: no levels given")
    total = 0.0
    for lvl, (e, d) in enumerate(zip(encoder_maps, decoder_maps)):
        _same_shape(e, d, f"int_loss level {lvl}")
        total = total + ((e - d) ** 2).mean()
    return total


def joint_loss(values: LossValues, weights: LossWeights, include_int: bool = False) -> Scalar:
    """Weighted sum of segmentation and reconstruction terms.

    With ``include_int`` the intermediate-layer term is added as well.
    """
    total = weights.lambda_seg * values.seg + weights.lambda_rec * values.rec
    if include_int:
        total = total + weights.lambda_int * values.int_sum
    return total
