"""Dice / IoU from pixel counts, micro-averaged over a test set."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .numerics import _sigmoid

MODEL_KINDS = ("personalized", "global")


@dataclass(frozen=True)
class EvalResult:
    client_id: str
    model_kind: str
    dice: float
    iou: float
    n_samples: int


def confusion_counts(pred_logits, mask, threshold: float = 0.5) -> tuple[int, int, int]:
    logits = np.asarray(getattr(pred_logits, "data", pred_logits), dtype=np.float64)
    mask = np.asarray(mask).astype(bool)
    if logits.shape != mask.shape:
        raise ShapeError(f"prediction {logits.shape} vs mask {mask.shape}")
    pred = _sigmoid(logits) > threshold
    tp = int(np.count_nonzero(pred & mask))
    fp = int(np.count_nonzero(pred & ~mask))
    fn = int(np.count_nonzero(~pred & mask))
    return tp, fp, fn


def dice_iou_from_counts(tp: int, fp: int, fn: int) -> tuple[float, float]:
    if tp + fp + fn == 0:
        return 1.0, 1.0
    return 2 * tp / (2 * tp + fp + fn), tp / (tp + fp + fn)


def dice_iou(pred_logits, mask, threshold: float = 0.5) -> tuple[float, float]:
    return dice_iou_from_counts(*confusion_counts(pred_logits, mask, threshold))


def evaluate_logits(logits, masks, client_id="", model_kind="personalized", threshold=0.5) -> EvalResult:
    tp = fp = fn = 0
    for z, m in zip(logits, masks):
        a, b, c = confusion_counts(z, m, threshold)
        tp, fp, fn = tp + a, fp + b, fn + c
    dice, iou = dice_iou_from_counts(tp, fp, fn)
    return EvalResult(client_id, model_kind, dice, iou, len(logits))


def evaluate(model, test_set, client_id: str = "", model_kind: str = "personalized", threshold: float = 0.5) -> EvalResult:
    """Micro-averaged Dice/IoU of ``model`` on a non-empty list of samples."""
    if len(test_set) == 0:
        raise ValueError("evaluate needs a non-empty test set")
    images = np.stack([s.image for s in test_set]).astype(np.float64)
    masks = [s.downsampled_mask for s in test_set]
    return evaluate_logits(model.predict_logits(images), masks, client_id, model_kind, threshold)
