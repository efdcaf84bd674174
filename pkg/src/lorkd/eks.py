"""Efficient Knowledge Separation (EKS) convolution.

A mixed-task batch is convolved in one grouped-convolution launch: every
sample gets its own aggregated weight ``w0 + delta[task(sample)]``, the batch
is folded into the channel axis, and ``groups = B`` keeps samples apart.
``naive_forward`` is the reference that runs one plain convolution per task.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, ValidationError
from .lowrank import LowRankPair, expert_delta, expert_factor_grads, fuse_weights
from .tensor import ConvGeometry, check_float, conv2d, conv2d_backward


@dataclass
class TaskIndexMatrix:
    """One-hot (B, T) assignment of batch samples to tasks."""

    assignments: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.assignments)
        if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
            raise ValidationError(f"task matrix must be (B>=1, T>=1), got shape {m.shape}")
        if not np.all((m == 0) | (m == 1)):
            raise ValidationError("task matrix entries must be 0 or 1")
        bad = np.flatnonzero(m.sum(axis=1) != 1)
        if bad.size:
            raise ValidationError(f"task matrix row {int(bad[0])} is not one-hot")
        self.assignments = m
        self.labels = m.argmax(axis=1)

    @classmethod
    def from_labels(cls, labels, task_count: int) -> "TaskIndexMatrix":
        labels = np.asarray(labels, dtype=np.int64)
        if labels.ndim != 1:
            raise ValidationError("task labels must be a 1-D sequence")
        if labels.size and (labels.min() < 0 or labels.max() >= task_count):
            raise ValidationError(f"task label out of range [0, {task_count})")
        m = np.zeros((labels.size, task_count), dtype=np.int8)
        m[np.arange(labels.size), labels] = 1
        return cls(m)

    @property
    def batch_size(self) -> int:
        return self.assignments.shape[0]

    @property
    def task_count(self) -> int:
        return self.assignments.shape[1]

    def members(self, task: int) -> np.ndarray:
        return np.flatnonzero(self.labels == task)

    def take(self, idx) -> "TaskIndexMatrix":
        return TaskIndexMatrix(self.assignments[idx])


@dataclass
class EksConvLayer:
    w0: np.ndarray
    experts: list[LowRankPair]
    geometry: ConvGeometry
    bias: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.geometry.groups != 1:
            raise ShapeError("EKS layers wrap ungrouped convolutions")
        if self.w0.shape != self.geometry.weight_shape:
            raise ShapeError(f"w0 shape {self.w0.shape} != {self.geometry.weight_shape}")
        for i, e in enumerate(self.experts):
            if e.geometry != self.geometry:
                raise ShapeError(f"expert {i} geometry differs from the backbone conv")
        if self.bias is not None and self.bias.shape != (self.geometry.out_channels,):
            raise ShapeError(f"bias shape {self.bias.shape} != ({self.geometry.out_channels},)")

    @property
    def task_count(self) -> int:
        return len(self.experts)


def _check_tasks(layer: EksConvLayer, m: TaskIndexMatrix, batch: int) -> None:
    if m.task_count != layer.task_count:
        raise ValidationError(
            f"task matrix has {m.task_count} tasks, layer has {layer.task_count} experts"
        )
    if m.batch_size != batch:
        raise ShapeError(f"task matrix covers {m.batch_size} samples, batch has {batch}")


def aggregate_weights(layer: EksConvLayer, m: TaskIndexMatrix) -> np.ndarray:
    """Per-sample weights (B, C_out, C_in, k, k); only present tasks are expanded."""
    if m.task_count != layer.task_count:
        raise ValidationError(
            f"task matrix has {m.task_count} tasks, layer has {layer.task_count} experts"
        )
    out = np.empty((m.batch_size,) + layer.w0.shape, dtype=layer.w0.dtype)
    for t in np.unique(m.labels):
        out[m.labels == t] = layer.w0 + expert_delta(layer.experts[t])
    return out


def _grouped_geometry(geom: ConvGeometry, batch: int) -> ConvGeometry:
    return ConvGeometry(
        in_channels=batch * geom.in_channels,
        out_channels=batch * geom.out_channels,
        kernel_size=geom.kernel_size,
        stride=geom.stride,
        padding=geom.padding,
        groups=batch,
    )


def eks_forward(
    layer: EksConvLayer, h: np.ndarray, m: TaskIndexMatrix,
    weights: np.ndarray | None = None,
) -> np.ndarray:
    """Single-launch forward; ``weights`` may carry a precomputed aggregation."""
    check_float(h, layer.w0)
    if h.ndim != 4:
        raise ShapeError(f"input must be 4-D (B, C, H, W), got shape {h.shape}")
    b, c, hh, ww = h.shape
    _check_tasks(layer, m, b)
    if c != layer.geometry.in_channels:
        raise ShapeError(f"input channel dimension: expected {layer.geometry.in_channels}, got {c}")
    if weights is None:
        weights = aggregate_weights(layer, m)
    geom = layer.geometry
    out = conv2d(
        h.reshape(1, b * c, hh, ww),
        weights.reshape(b * geom.out_channels, c, geom.kernel_size, geom.kernel_size),
        _grouped_geometry(geom, b),
    )
    out = out.reshape(b, geom.out_channels, out.shape[2], out.shape[3])
    if layer.bias is not None:
        out = out + layer.bias[None, :, None, None]
    return out


def naive_forward(layer: EksConvLayer, h: np.ndarray, m: TaskIndexMatrix) -> np.ndarray:
    """One plain convolution per task present in the batch, scattered back in place."""
    check_float(h, layer.w0)
    if h.ndim != 4:
        raise ShapeError(f"input must be 4-D (B, C, H, W), got shape {h.shape}")
    _check_tasks(layer, m, h.shape[0])
    oh, ow = layer.geometry.output_size(h.shape[2], h.shape[3])
    out = np.zeros((h.shape[0], layer.geometry.out_channels, oh, ow), dtype=h.dtype)
    for t in range(layer.task_count):
        idx = m.members(t)
        if idx.size == 0:
            continue
        w = fuse_weights(layer.w0, layer.experts[t])
        out[idx] = conv2d(h[idx], w, layer.geometry)
    if layer.bias is not None:
        out += layer.bias[None, :, None, None]
    return out


@dataclass
class EksGrads:
    grad_h: np.ndarray | None
    grad_w0: np.ndarray
    grad_experts: list[tuple[np.ndarray, np.ndarray]]
    grad_bias: np.ndarray | None
    present: list[bool] = field(default_factory=list)


def eks_backward(
    layer: EksConvLayer, h: np.ndarray, m: TaskIndexMatrix, grad_out: np.ndarray,
    weights: np.ndarray | None = None, need_input_grad: bool = True,
    need_expert_grads: bool = True,
) -> EksGrads:
    """Routed gradients of ``sum(grad_out * eks_forward(layer, h, m))``.

    The backbone weight collects the per-sample weight gradients of the whole
    batch; expert ``t`` only sees the samples assigned to ``t``. Experts with
    no samples get zero arrays without any computation.
    """
    check_float(h, layer.w0, grad_out)
    b, c, hh, ww = h.shape
    _check_tasks(layer, m, b)
    geom = layer.geometry
    oh, ow = geom.output_size(hh, ww)
    if grad_out.shape != (b, geom.out_channels, oh, ow):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(b, geom.out_channels, oh, ow)}")
    if weights is None:
        weights = aggregate_weights(layer, m)
    k = geom.kernel_size
    grad_x, grad_wg = conv2d_backward(
        grad_out.reshape(1, b * geom.out_channels, oh, ow),
        h.reshape(1, b * c, hh, ww),
        weights.reshape(b * geom.out_channels, c, k, k),
        _grouped_geometry(geom, b),
        need_input_grad=need_input_grad,
    )
    per_sample = grad_wg.reshape((b,) + layer.w0.shape)
    grad_w0 = per_sample.sum(axis=0)

    grad_experts = []
    present = []
    for t, pair in enumerate(layer.experts):
        idx = m.members(t)
        present.append(bool(idx.size))
        if idx.size == 0 or not need_expert_grads:
            grad_experts.append((np.zeros_like(pair.b), np.zeros_like(pair.a)))
            continue
        grad_experts.append(expert_factor_grads(pair, per_sample[idx].sum(axis=0)))

    grad_bias = grad_out.sum(axis=(0, 2, 3)) if layer.bias is not None else None
    grad_h = grad_x.reshape(h.shape) if grad_x is not None else None
    return EksGrads(grad_h, grad_w0, grad_experts, grad_bias, present)


def naive_backward(
    layer: EksConvLayer, h: np.ndarray, m: TaskIndexMatrix, grad_out: np.ndarray
) -> EksGrads:
    """Per-task reference for :func:`eks_backward` built on plain convolutions."""
    grad_h = np.zeros_like(h)
    grad_w0 = np.zeros_like(layer.w0)
    grad_experts, present = [], []
    for t, pair in enumerate(layer.experts):
        idx = m.members(t)
        present.append(bool(idx.size))
        if idx.size == 0:
            grad_experts.append((np.zeros_like(pair.b), np.zeros_like(pair.a)))
            continue
        w = fuse_weights(layer.w0, pair)
        gx, gw = conv2d_backward(grad_out[idx], h[idx], w, layer.geometry)
        grad_h[idx] = gx
        grad_w0 += gw
        grad_experts.append(expert_factor_grads(pair, gw))
    grad_bias = grad_out.sum(axis=(0, 2, 3)) if layer.bias is not None else None
    return EksGrads(grad_h, grad_w0, grad_experts, grad_bias, present)


def cost_estimate(T: int, b: int, l: int, d: int, r: int, c2: int = 2) -> dict:
    """Analytic FLOPs of EKS (early fusion) against per-sample batched adapters.

    EKS builds ``T`` rank-``r`` deltas then runs one dense product over the
    ``b*l`` tokens; per-sample adapters pay the rank factor on every token.
    """
    for name, v in (("b", b), ("l", l), ("d", d), ("r", r)):
        if v <= 0:
            raise ValidationError(f"{name} must be positive, got {v}")
    if T < 0:
        raise ValidationError(f"T must be non-negative, got {T}")
    eks = T * c2 * r * d * d + c2 * b * l * d * d
    adapter = c2 * r * b * l * d * d
    # Tr/(bl) + 1 <= r, kept in integers
    cheaper = T * r + b * l <= r * b * l
    return {"eks_flops": eks, "adapter_flops": adapter, "eks_cheaper": bool(cheaper)}
