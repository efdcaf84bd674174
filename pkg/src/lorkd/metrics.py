"""Evaluation metrics and linear CKA."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .errors import ShapeError, ValidationError


def evaluate_dsc(pred: np.ndarray, target: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Per-mask Dice similarity ``2|P & S| / (|P| + |S|)`` for (K, H, W) inputs.

    ``pred`` may hold probabilities; it is binarized at ``threshold``. Two empty
    masks score 1.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    p = (pred >= threshold).reshape(pred.shape[0], -1)
    s = target.astype(bool).reshape(target.shape[0], -1)
    inter = np.sum(p & s, axis=1)
    total = p.sum(axis=1) + s.sum(axis=1)
    out = np.ones(p.shape[0])
    nz = total > 0
    out[nz] = 2.0 * inter[nz] / total[nz]
    return out


def evaluate_accuracy(logits: np.ndarray, labels: np.ndarray, tasks: np.ndarray,
                      task_count: int, valid: np.ndarray | None = None) -> dict[int, float]:
    """Per-task argmax accuracy; tasks with no samples are left out."""
    logits = np.asarray(logits, dtype=np.float64)
    if valid is not None:
        logits = np.where(valid, logits, -np.inf)
    hit = logits.argmax(axis=1) == np.asarray(labels)
    tasks = np.asarray(tasks)
    return {t: float(hit[tasks == t].mean()) for t in range(task_count) if np.any(tasks == t)}


def macro_average(per_task: Mapping) -> float:
    vals = list(per_task.values())
    if not vals:
        raise ValidationError("no per-task metrics to average")
    return float(np.mean(vals))


def cka_similarity(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """Linear CKA of two (n, d) feature sets over the same n inputs."""
    x = np.asarray(features_a, dtype=np.float64)
    y = np.asarray(features_b, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ShapeError(f"CKA needs (n, d) arrays with equal n, got {x.shape} and {y.shape}")
    if x.shape[0] < 2:
        raise ValidationError("CKA needs at least two samples")
    x = x - x.mean(axis=0)
    y = y - y.mean(axis=0)
    xx = np.linalg.norm(x.T @ x)
    yy = np.linalg.norm(y.T @ y)
    if xx == 0 or yy == 0:
        raise ValidationError("CKA is undefined for zero-variance features")
    return float(np.linalg.norm(x.T @ y) ** 2 / (xx * yy))


def cka_matrix(features: list[np.ndarray]) -> np.ndarray:
    n = len(features)
    out = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            out[i, j] = out[j, i] = cka_similarity(features[i], features[j])
    return out


def mean_off_diagonal(mat: np.ndarray) -> float:
    n = mat.shape[0]
    if n < 2:
        raise ValidationError("off-diagonal mean needs at least two tasks")
    return float((mat.sum() - np.trace(mat)) / (n * (n - 1)))
