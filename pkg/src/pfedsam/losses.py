"""Segmentation, distillation and combined personalized objectives."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ShapeError, ValidationError
from .numerics import Tensor


@dataclass(frozen=True)
class LossWeights:
    lambda_lmoe: float = 1.5
    lambda_kd: float = 0.1
    tau: float = 0.5

    def __post_init__(self):
        if not self.tau > 0:
            raise ValidationError(f"tau must be positive, got {self.tau}")
        if self.lambda_lmoe < 0 or self.lambda_kd < 0:
            raise ValidationError("loss weights must be non-negative")


def _check_labels(labels: np.ndarray):
    if not np.isin(labels, (0.0, 1.0)).all():
        raise ValidationError("labels must be binary (0 or 1)")


def ce_loss(logits, labels) -> Tensor:
    """Mean binary cross-entropy of mask logits against {0,1} labels."""
    logits = nm.as_tensor(logits)
    y = np.asarray(getattr(labels, "data", labels), dtype=np.float64)
    if logits.shape != y.shape:
        raise ShapeError(f"logits {logits.shape} vs labels {y.shape}")
    _check_labels(y)
    # -[y log s(z) + (1-y) log s(-z)]
    per_pixel = nm.log_sigmoid(logits) * y + nm.log_sigmoid(-logits) * (1.0 - y)
    return -nm.mean(per_pixel)


def kd_loss(student_logits, teacher_logits, tau: float = 0.5) -> Tensor:
    """Temperature-scaled binary distillation loss.

    The teacher target is ``sigmoid(z_t / tau)`` and never carries gradient;
    the student prediction is ``sigmoid(z_s / tau)``. The sum over pixels is
    scaled by ``tau**2 / N`` with N the pixel count of the batch.
    """
    if not tau > 0:
        raise ValidationError(f"tau must be positive, got {tau}")
    zs = nm.as_tensor(student_logits)
    zt = np.asarray(getattr(teacher_logits, "data", teacher_logits), dtype=np.float64)
    if zs.shape != zt.shape:
        raise ShapeError(f"student {zs.shape} vs teacher {zt.shape}")
    p_t = nm._sigmoid(zt / tau)
    scaled = zs * (1.0 / tau)
    per_pixel = nm.log_sigmoid(scaled) * p_t + nm.log_sigmoid(-scaled) * (1.0 - p_t)
    return nm.tsum(per_pixel) * (-(tau**2) / zs.size)


def personalized_loss(student_logits, labels, teacher_logits, lmoe_aux, weights: LossWeights = LossWeights()):
    """CE + lambda_lmoe * aux + lambda_kd * KD.

    Returns ``(total, components)`` with the three component values as floats.
    ``lmoe_aux`` may be ``None`` for students without experts, and
    ``teacher_logits`` may be ``None`` to skip distillation.
    """
    ce = ce_loss(student_logits, labels)
    total = ce
    parts = {"ce": ce.item(), "lmoe": 0.0, "kd": 0.0}
    if lmoe_aux is not None:
        parts["lmoe"] = lmoe_aux.item()
        if weights.lambda_lmoe:
            total = total + lmoe_aux * weights.lambda_lmoe
    if teacher_logits is not None:
        kd = kd_loss(student_logits, teacher_logits, weights.tau)
        parts["kd"] = kd.item()
        if weights.lambda_kd:
            total = total + kd * weights.lambda_kd
    return total, parts
