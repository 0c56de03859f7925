"""Objective terms: soft dice, cross-entropy, multi-scale supervised and consistency losses, ramp-up."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch

from hcmt.errors import ConfigError, NumericError, ShapeError

DICE_SMOOTH = 1e-5
CE_FLOOR = 1e-12
DEFAULT_SCALE_WEIGHTS = (0.5, 0.4, 0.05, 0.05)


@dataclass(frozen=True)
class ScaleWeights:
    alphas: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        if not self.alphas:
            raise ConfigError("scale weights must be non-empty")
        if any(a < 0 or not math.isfinite(a) for a in self.alphas):
            raise ConfigError(f"scale weights must be finite and non-negative: {self.alphas}")
        if not any(a > 0 for a in self.alphas):
            raise ConfigError("at least one scale weight must be positive")

    def __len__(self):
        return len(self.alphas)

    def __iter__(self):
        return iter(self.alphas)

    @classmethod
    def final_only(cls, num_scales: int) -> "ScaleWeights":
        return cls((1.0,) + (0.0,) * (num_scales - 1))


@dataclass
class RampSchedule:
    t_max: int
    t: float = 0
    lambda_max: float = 0.1


def _as_weights(weights) -> ScaleWeights:
    return weights if isinstance(weights, ScaleWeights) else ScaleWeights(tuple(weights))


def _check_finite(*tensors: torch.Tensor) -> None:
    for x in tensors:
        if torch.isnan(x).any():
            raise NumericError("NaN in loss input")


def dice_loss(prediction: torch.Tensor, target: torch.Tensor, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """Squared-denominator soft dice loss over all elements of ``prediction``.

    ``prediction`` holds foreground probabilities and ``target`` a binary mask
    of the same shape.
    """
    if prediction.shape != target.shape:
        raise ShapeError(f"prediction {tuple(prediction.shape)} vs target {tuple(target.shape)}")
    _check_finite(prediction)
    target = target.to(prediction.dtype)
    intersect = torch.sum(prediction * target)
    denom = torch.sum(prediction * prediction) + torch.sum(target * target)
    return 1 - (2 * intersect + smooth) / (denom + smooth)


def cross_entropy_loss(prediction: torch.Tensor, target: torch.Tensor, floor: float = CE_FLOOR) -> torch.Tensor:
    """Mean over voxels of ``-log p[target]``.

    ``prediction`` is a ``C x ...`` probability grid, ``target`` the matching
    ``...`` grid of class indices.
    """
    if prediction.shape[1:] != target.shape:
        raise ShapeError(f"prediction {tuple(prediction.shape)} does not match target {tuple(target.shape)}")
    _check_finite(prediction)
    target = target.long()
    n_classes = prediction.shape[0]
    if target.numel() and (target.min() < 0 or target.max() >= n_classes):
        raise IndexError(f"target class out of range [0, {n_classes})")
    picked = torch.gather(prediction, 0, target.unsqueeze(0)).squeeze(0)
    return -torch.log(torch.clamp(picked, min=floor)).mean()


def segmentation_loss(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """(dice + ce) / 2 for one item: ``probs`` is ``C x H x W x D``, ``target`` ``H x W x D``.

    Dice is averaged over the foreground classes 1..C-1.
    """
    target = target.long()
    dice = sum(dice_loss(probs[c], target == c) for c in range(1, probs.shape[0])) / (probs.shape[0] - 1)
    return (dice + cross_entropy_loss(probs, target)) / 2


def hierarchical_supervised_loss(pyramid: Sequence[torch.Tensor], target: torch.Tensor, weights) -> torch.Tensor:
    """Scale-weighted (dice + ce)/2, averaged over the batch items.

    ``pyramid`` holds ``B x C x H x W x D`` maps for the labeled items only;
    ``target`` is ``B x H x W x D``.
    """
    weights = _as_weights(weights)
    if len(pyramid) != len(weights):
        raise ConfigError(f"{len(pyramid)} scales but {len(weights)} weights")
    if target.dim() == pyramid[0].dim() - 2:
        target = target.unsqueeze(0)
        pyramid = [p.unsqueeze(0) for p in pyramid]
    n_items = target.shape[0]
    total = pyramid[0].new_zeros(())
    for alpha, probs in zip(weights, pyramid):
        if alpha == 0:
            continue
        if probs.shape[0] != n_items or probs.shape[2:] != target.shape[1:]:
            raise ShapeError(f"scale map {tuple(probs.shape)} does not match target {tuple(target.shape)}")
        per_item = sum(segmentation_loss(probs[i], target[i]) for i in range(n_items)) / n_items
        total = total + alpha * per_item
    return total


def hierarchical_consistency_loss(student: Sequence[torch.Tensor], teacher: Sequence[torch.Tensor], weights) -> torch.Tensor:
    """Scale-weighted mean squared difference; the teacher side is detached."""
    weights = _as_weights(weights)
    if not len(student) == len(teacher) == len(weights):
        raise ConfigError(f"scale counts differ: student {len(student)}, teacher {len(teacher)}, weights {len(weights)}")
    total = student[0].new_zeros(())
    for alpha, s, t in zip(weights, student, teacher):
        if s.shape != t.shape:
            raise ShapeError(f"student map {tuple(s.shape)} vs teacher map {tuple(t.shape)}")
        if alpha == 0:
            continue
        total = total + alpha * torch.mean((t.detach() - s) ** 2)
    return total


def rampup_weight(schedule: RampSchedule) -> float:
    """Gaussian ramp-up ``lambda_max * exp(-5 (1 - t/t_max)^2)``; clamps at ``lambda_max`` past ``t_max``."""
    if schedule.t_max <= 0:
        return schedule.lambda_max
    if schedule.t < 0:
        raise ConfigError(f"t must be >= 0, got {schedule.t}")
    frac = min(schedule.t / schedule.t_max, 1.0)
    return schedule.lambda_max * math.exp(-5.0 * (1.0 - frac) ** 2)


def total_objective(sup, unsup, schedule: RampSchedule):
    value = sup + rampup_weight(schedule) * unsup
    finite = torch.isfinite(value).all() if torch.is_tensor(value) else math.isfinite(value)
    if not finite:
        raise NumericError(f"non-finite objective (sup={float(sup)}, unsup={float(unsup)})")
    return value
