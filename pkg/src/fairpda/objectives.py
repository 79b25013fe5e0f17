"""Loss functions and adversarial-weight schedules.

The adversarial terms are optimised through gradient reversal: every head
minimises its own loss, the GRLs in the model flip and scale the gradients
that reach the backbone. ``training_loss`` is therefore a plain sum, while
``total_objective`` reports the saddle-point value the training realises.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F

from .errors import NumericalAbort, ValidationError

PROB_CLAMP = 1e-7
ALIGN_MODES = ("none", "dann", "cdan", "partial_cdan", "coral")
LOSS_MODES = ("ce", "ce_pn")


def segment_counts(patient_ids) -> dict:
    """Segments per patient over the whole training split."""
    counts: dict = {}
    for pid in patient_ids:
        counts[pid] = counts.get(pid, 0) + 1
    return counts


def patient_normalized_ce(losses: torch.Tensor, patient_ids, table: dict) -> torch.Tensor:
    """Weighted mean of per-segment losses with weight ``1 / n_patient``."""
    if losses.numel() == 0:
        raise ValidationError("empty batch")
    try:
        n = [table[pid] for pid in patient_ids]
    except KeyError as exc:
        raise ValidationError(f"patient {exc.args[0]!r} missing from segment-count table") from None
    w = 1.0 / torch.tensor(n, dtype=losses.dtype, device=losses.device)
    return (w * losses).sum() / w.sum()


def task_loss(logits: torch.Tensor, labels: torch.Tensor, mode: str = "ce_pn", patient_ids=None, table=None):
    per_segment = F.cross_entropy(logits, labels, reduction="none")
    if mode == "ce":
        return per_segment.mean()
    if mode == "ce_pn":
        return patient_normalized_ce(per_segment, patient_ids, table)
    raise ValidationError(f"unknown loss mode {mode!r}")


def class_importance_weights(target_probs: torch.Tensor) -> torch.Tensor:
    """Column means of the target batch's class probabilities."""
    if target_probs.dim() != 2 or target_probs.shape[0] == 0:
        raise ValidationError("class importance weights need a non-empty (B, K) target batch")
    return target_probs.mean(dim=0)


class GammaEMA:
    """Optional exponential smoothing of the per-batch class weights."""

    def __init__(self, momentum: float = 0.9):
        self.momentum = momentum
        self.value: Optional[torch.Tensor] = None

    def update(self, gamma: torch.Tensor) -> torch.Tensor:
        gamma = gamma.detach()
        if self.value is None:
            self.value = gamma.clone()
        else:
            self.value = self.momentum * self.value + (1 - self.momentum) * gamma
        return self.value


def domain_adversarial_loss(
    source_probs: torch.Tensor,
    source_labels: torch.Tensor,
    target_probs: torch.Tensor,
    gamma: Optional[torch.Tensor] = None,
    target_labels: Optional[torch.Tensor] = None,
    target_gamma: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Class-weighted BCE with source labelled 1 and target labelled 0.

    ``source_probs``/``target_probs`` are discriminator outputs D(.) in (0, 1);
    ``gamma`` is a K-vector indexed by the source class labels (None = all ones).
    The target side is unweighted unless ``target_gamma`` and ``target_labels``
    are given, which only happens when two labelled sources face each other.
    """
    if source_probs.numel() == 0 or target_probs.numel() == 0:
        raise ValidationError("domain loss needs both source and target samples")
    ds = source_probs.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    dt = target_probs.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    ws = torch.ones_like(ds) if gamma is None else gamma.to(ds.dtype)[source_labels]
    wt = torch.ones_like(dt) if target_gamma is None else target_gamma.to(dt.dtype)[target_labels]
    return -(ws * torch.log(ds)).mean() - (wt * torch.log(1 - dt)).mean()


def fairness_loss(gender_logits: torch.Tensor, genders: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of the gender adversary (labels 0 = M, 1 = F)."""
    if genders.numel() == 0:
        raise ValidationError("empty batch")
    if (genders < 0).any() or (genders > 1).any():
        raise ValidationError("gender labels missing or outside {0, 1}")
    return F.cross_entropy(gender_logits, genders)


def _covariance(x: torch.Tensor) -> torch.Tensor:
    centred = x - x.mean(dim=0, keepdim=True)
    return centred.T @ centred / (x.shape[0] - 1)


def coral_loss(source_features: torch.Tensor, target_features: torch.Tensor) -> torch.Tensor:
    """Squared Frobenius distance of feature covariances, scaled by 1/(4 d^2)."""
    if source_features.shape[0] < 2 or target_features.shape[0] < 2:
        raise ValidationError("CORAL needs at least two samples per side")
    d = source_features.shape[1]
    diff = _covariance(source_features) - _covariance(target_features)
    return (diff * diff).sum() / (4.0 * d * d)


@dataclass
class ScheduleConfig:
    lambda_d_max: float = 1.0
    lambda_fair_max: float = 0.5
    warmup_fraction: float = 0.2
    total_steps: int = 1000
    warmup: bool = True

    def __post_init__(self):
        if self.lambda_d_max < 0 or self.lambda_fair_max < 0:
            raise ValidationError("lambda maxima must be non-negative")
        if not 0 <= self.warmup_fraction <= 1:
            raise ValidationError("warmup_fraction must be in [0, 1]")
        if self.warmup and self.warmup_fraction * self.total_steps < 1:
            raise ValidationError("warm-up shorter than one step; disable warm-up instead")


def lambda_schedule(step: int, cfg: ScheduleConfig):
    """Linear warm-up of both adversarial weights. Returns ``(lambda_d, lambda_fair)``."""
    if not cfg.warmup:
        return cfg.lambda_d_max, cfg.lambda_fair_max
    ramp = min(1.0, max(step, 0) / (cfg.warmup_fraction * cfg.total_steps))
    return cfg.lambda_d_max * ramp, cfg.lambda_fair_max * ramp


def _check_finite(**terms) -> None:
    for name, value in terms.items():
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise NumericalAbort(f"non-finite {name} loss ({v})")


def total_objective(loss_y, loss_d, loss_fair, lambda_d: float, lambda_fair: float) -> float:
    """Saddle-point value ``L_y - lambda_d * L_d - lambda_fair * L_fair`` (for logging)."""
    _check_finite(task=loss_y, domain=loss_d, fairness=loss_fair)
    y, d, f = (float(t.detach()) if isinstance(t, torch.Tensor) else float(t) for t in (loss_y, loss_d, loss_fair))
    return y - lambda_d * d - lambda_fair * f


def training_loss(loss_y: torch.Tensor, loss_d: torch.Tensor, loss_fair: torch.Tensor) -> torch.Tensor:
    """Quantity to backpropagate: GRLs already carry the ``-lambda`` factors."""
    _check_finite(task=loss_y, domain=loss_d, fairness=loss_fair)
    return loss_y + loss_d + loss_fair
