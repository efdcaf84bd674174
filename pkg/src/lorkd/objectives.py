"""Training losses with analytic gradients.

Segmentation: BCE + soft dice on sigmoid mask probabilities plus a per-pixel
binary KL towards the teacher's mask probabilities. Classification: per-task
cross entropy on temperature-scaled head logits plus KL between
temperature-softmaxed teacher and (projected) student features.
All losses are in nats.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeError, ValidationError
from .tensor import softmax_with_temperature

DICE_EPS = 1e-6
PROB_CLIP = 1e-7

SEG_BETA = 0.1
CLS_BETA = 1.0
DEFAULT_TAU = 1.0


@dataclass(frozen=True)
class ClsTarget:
    task_id: int
    label: int

    def validate(self, class_counts: Sequence[int]) -> None:
        if not 0 <= self.task_id < len(class_counts):
            raise ValidationError(f"task id {self.task_id} out of range [0, {len(class_counts)})")
        if not 0 <= self.label < class_counts[self.task_id]:
            raise ValidationError(
                f"label {self.label} out of range for task {self.task_id} "
                f"({class_counts[self.task_id]} classes)"
            )


def _check_binary(target: np.ndarray) -> None:
    if not np.all((target == 0) | (target == 1)):
        raise ValidationError("segmentation targets must be binary")


def _same_shape(pred: np.ndarray, target: np.ndarray) -> None:
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")


def dice_loss(pred: np.ndarray, target: np.ndarray, with_grad: bool = False):
    """Soft dice over all masks and pixels of one sample.

    ``1 - (2*sum(p*s) + eps) / (sum(p^2) + sum(s^2) + eps)``; the smoothing on
    both sides makes an empty prediction of an empty target score 0.
    """
    _same_shape(pred, target)
    inter = np.sum(pred * target)
    denom = np.sum(pred * pred) + np.sum(target * target) + DICE_EPS
    numer = 2.0 * inter + DICE_EPS
    loss = 1.0 - numer / denom
    if not with_grad:
        return float(loss)
    grad = -(2.0 * target * denom - numer * 2.0 * pred) / (denom * denom)
    return float(loss), grad


def bce_loss(pred: np.ndarray, target: np.ndarray, with_grad: bool = False):
    """Mean binary cross entropy over masks and pixels, probabilities clipped."""
    _same_shape(pred, target)
    p = np.clip(pred, PROB_CLIP, 1.0 - PROB_CLIP)
    n = pred.size
    loss = -np.sum(target * np.log(p) + (1.0 - target) * np.log1p(-p)) / n
    if not with_grad:
        return float(loss)
    inside = (pred >= PROB_CLIP) & (pred <= 1.0 - PROB_CLIP)
    grad = np.where(inside, (-(target / p) + (1.0 - target) / (1.0 - p)) / n, 0.0)
    return float(loss), grad.astype(pred.dtype, copy=False)


def _xlogx_ratio(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    safe_q = np.where(q > 0, q, 1.0)
    return np.where(q > 0, q * np.log(safe_q / p), 0.0)


def kl_divergence(p_teacher: np.ndarray, p_student: np.ndarray) -> float:
    """Mean over rows of ``sum_y q log(q/p)`` for row-stochastic arrays."""
    _same_shape(p_teacher, p_student)
    for name, arr in (("teacher", p_teacher), ("student", p_student)):
        sums = np.sum(arr, axis=-1)
        if not np.allclose(sums, 1.0, rtol=0.0, atol=1e-5):
            raise ValidationError(f"{name} rows are not normalized (row sums {sums.ravel()[:4]}...)")
    p = np.maximum(p_student, PROB_CLIP)
    per_row = np.sum(_xlogx_ratio(p_teacher, p), axis=-1)
    return float(np.mean(per_row))


def mask_kl(teacher_pred: np.ndarray, pred: np.ndarray, with_grad: bool = False):
    """Per-pixel binary KL(teacher || student) averaged over masks and pixels.

    Each probability is read as the two-outcome distribution (p, 1 - p).
    """
    _same_shape(teacher_pred, pred)
    p = np.clip(pred, PROB_CLIP, 1.0 - PROB_CLIP)
    q = teacher_pred
    n = pred.size
    kl = _xlogx_ratio(q, p) + _xlogx_ratio(1.0 - q, 1.0 - p)
    loss = float(np.sum(kl) / n)
    if not with_grad:
        return loss
    inside = (pred >= PROB_CLIP) & (pred <= 1.0 - PROB_CLIP)
    grad = np.where(inside, (-q / p + (1.0 - q) / (1.0 - p)) / n, 0.0)
    return loss, grad.astype(pred.dtype, copy=False)


def total_seg_loss(
    pred: np.ndarray, target: np.ndarray, teacher_pred: np.ndarray | None = None,
    beta: float = SEG_BETA,
) -> tuple[float, np.ndarray, dict]:
    """BCE + dice + ``beta`` * mask KL for one sample of shape (K, H, W).

    Returns the loss, its gradient w.r.t. ``pred`` and the individual terms.
    """
    _check_binary(target)
    if beta < 0:
        raise ValidationError(f"beta must be non-negative, got {beta}")
    l_bce, g_bce = bce_loss(pred, target, with_grad=True)
    l_dice, g_dice = dice_loss(pred, target, with_grad=True)
    loss = l_bce + l_dice
    grad = g_bce + g_dice
    l_kl = 0.0
    if beta > 0:
        if teacher_pred is None:
            raise ValidationError("beta > 0 requires teacher predictions")
        l_kl, g_kl = mask_kl(teacher_pred, pred, with_grad=True)
        loss += beta * l_kl
        grad = grad + beta * g_kl
    return loss, grad.astype(pred.dtype, copy=False), {"bce": l_bce, "dice": l_dice, "kl": l_kl}


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def total_cls_loss(
    student_feature: np.ndarray | None,
    teacher_feature: np.ndarray | None,
    head_logits: np.ndarray,
    labels: np.ndarray,
    beta: float = CLS_BETA,
    tau: float = DEFAULT_TAU,
    valid: np.ndarray | None = None,
) -> tuple[float, np.ndarray | None, np.ndarray, dict]:
    """Batch mean of ``CE(label, softmax(logits/tau)) + beta * KL(f_teacher || f_student)``.

    ``head_logits`` is (B, Y_max): each row holds the logits of the sample's own
    task head, and ``valid`` masks off padding columns when task heads have
    different class counts. Features are softmax-normalized with ``tau``
    before the KL; ``student_feature`` must already be projected to the
    teacher's width. Returns the loss, dL/d(student_feature), dL/d(logits) and
    the per-term means.
    """
    if not tau > 0:
        raise ValidationError(f"temperature must be positive, got {tau}")
    if beta < 0:
        raise ValidationError(f"beta must be non-negative, got {beta}")
    logits = np.asarray(head_logits)
    b = logits.shape[0]
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} != ({b},)")
    if valid is None:
        valid = np.ones(logits.shape, dtype=bool)
    if np.any(labels < 0) or np.any(~valid[np.arange(b), labels]):
        raise ValidationError("class label outside its task head")

    z = np.where(valid, logits / tau, -np.inf)
    logp = _log_softmax(z)
    ce = -logp[np.arange(b), labels]
    p = np.exp(logp)
    onehot = np.zeros_like(p)
    onehot[np.arange(b), labels] = 1.0
    grad_logits = ((p - onehot) / tau / b).astype(logits.dtype, copy=False)
    loss = float(np.mean(ce))
    terms = {"ce": loss, "kl": 0.0, "ce_per_sample": ce}

    grad_feat = None
    if beta > 0:
        if student_feature is None or teacher_feature is None:
            raise ValidationError("beta > 0 requires student and teacher features")
        if student_feature.shape != teacher_feature.shape:
            raise ShapeError(
                f"student feature {student_feature.shape} != teacher feature {teacher_feature.shape}"
            )
        log_q = _log_softmax(teacher_feature / tau)
        log_p = _log_softmax(student_feature / tau)
        q = np.exp(log_q)
        kl = np.sum(q * (log_q - log_p), axis=-1)
        terms["kl"] = float(np.mean(kl))
        loss += beta * terms["kl"]
        grad_feat = (beta * (np.exp(log_p) - q) / tau / b).astype(student_feature.dtype, copy=False)
    return loss, grad_feat, grad_logits, terms


def cls_probabilities(logits: np.ndarray, tau: float = DEFAULT_TAU) -> np.ndarray:
    return softmax_with_temperature(logits, tau)
