"""Dense tensor kernels with hand-written backward passes.

Tensors are plain numpy arrays in row-major, channels-first (B, C, H, W)
layout. Only float32 (training) and float64 (gradient checks) are accepted,
and binary kernels refuse to mix the two.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeError

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class KernelStats:
    """Counts convolution kernel launches and multiply-add FLOPs."""

    def __init__(self) -> None:
        self.launches = 0
        self.flops = 0

    def reset(self) -> None:
        self.launches = 0
        self.flops = 0

    def snapshot(self) -> dict:
        return {"kernel_launches": self.launches, "flops": self.flops}


KERNEL_STATS = KernelStats()


@dataclass(frozen=True)
class ConvGeometry:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self) -> None:
        for name in ("in_channels", "out_channels", "kernel_size", "stride", "groups"):
            if getattr(self, name) < 1:
                raise ShapeError(f"{name} must be positive, got {getattr(self, name)}")
        if self.padding < 0:
            raise ShapeError(f"padding must be non-negative, got {self.padding}")
        if self.in_channels % self.groups:
            raise ShapeError(
                f"in_channels={self.in_channels} not divisible by groups={self.groups}"
            )
        if self.out_channels % self.groups:
            raise ShapeError(
                f"out_channels={self.out_channels} not divisible by groups={self.groups}"
            )

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        k = self.kernel_size
        return (self.out_channels, self.in_channels // self.groups, k, k)

    def output_size(self, height: int, width: int) -> tuple[int, int]:
        k, s, p = self.kernel_size, self.stride, self.padding
        oh = (height + 2 * p - k) // s + 1
        ow = (width + 2 * p - k) // s + 1
        if oh < 1 or ow < 1:
            raise ShapeError(
                f"non-positive output size {oh}x{ow} for input {height}x{width}, "
                f"kernel {k}, stride {s}, padding {p}"
            )
        return oh, ow

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel_size": self.kernel_size,
            "stride": self.stride,
            "padding": self.padding,
            "groups": self.groups,
        }


def check_float(*arrays: np.ndarray) -> np.dtype:
    """Return the common float dtype of ``arrays`` or raise."""
    dtype = arrays[0].dtype
    if dtype not in FLOAT_DTYPES:
        raise TypeError(f"unsupported dtype {dtype}; expected float32 or float64")
    for a in arrays[1:]:
        if a.dtype != dtype:
            raise TypeError(f"dtype mismatch: {dtype} vs {a.dtype}")
    return dtype


def _check_conv_shapes(x: np.ndarray, weight: np.ndarray, geom: ConvGeometry) -> None:
    if x.ndim != 4:
        raise ShapeError(f"input must be 4-D (B, C, H, W), got shape {x.shape}")
    if weight.shape != geom.weight_shape:
        names = ("out_channels", "in_channels/groups", "kernel rows", "kernel cols")
        for name, got, want in zip(names, weight.shape, geom.weight_shape):
            if got != want:
                raise ShapeError(f"weight dimension {name}: expected {want}, got {got}")
        raise ShapeError(f"weight shape {weight.shape} != {geom.weight_shape}")
    if x.shape[1] != geom.in_channels:
        raise ShapeError(
            f"input channel dimension: expected {geom.in_channels}, got {x.shape[1]}"
        )


def im2col(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """Unfold ``x`` (N, C, H, W) into patches of shape (N, C*k*k, Ho*Wo)."""
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    # (N, C, Ho, Wo, k, k) -> (N, C, k, k, Ho, Wo)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, oh * ow)
    return np.ascontiguousarray(cols)


def col2im(
    cols: np.ndarray, shape: tuple[int, int, int, int], k: int, stride: int, padding: int,
    out_hw: tuple[int, int],
) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patches back onto the image grid."""
    n, c, h, w = shape
    oh, ow = out_hw
    cols = cols.reshape(n, c, k, k, oh, ow)
    padded = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            padded[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[
                :, :, i, j
            ]
    if padding:
        return padded[:, :, padding : padding + h, padding : padding + w]
    return padded


def conv2d(x: np.ndarray, weight: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    """Grouped 2-D cross-correlation, zero padded, no bias.

    Output unit ``(b, o, i, j)`` is the sliding-window dot product of the
    weight of output channel ``o`` with the window of its group's input
    channels anchored at ``(i*stride - padding, j*stride - padding)``.
    """
    check_float(x, weight)
    _check_conv_shapes(x, weight, geom)
    n, _, h, w = x.shape
    oh, ow = geom.output_size(h, w)
    g, k = geom.groups, geom.kernel_size
    cin_g, cout_g = geom.in_channels // g, geom.out_channels // g

    cols = im2col(x, k, geom.stride, geom.padding).reshape(n, g, cin_g * k * k, oh * ow)
    wmat = weight.reshape(g, cout_g, cin_g * k * k)
    out = np.matmul(wmat[None], cols)

    KERNEL_STATS.launches += 1
    KERNEL_STATS.flops += 2 * n * geom.out_channels * cin_g * k * k * oh * ow
    return out.reshape(n, geom.out_channels, oh, ow)


def conv2d_backward(
    grad_out: np.ndarray, x: np.ndarray, weight: np.ndarray, geom: ConvGeometry,
    need_input_grad: bool = True,
) -> tuple[np.ndarray | None, np.ndarray]:
    """Gradients of ``sum(grad_out * conv2d(x, weight))`` w.r.t. ``x`` and ``weight``."""
    check_float(grad_out, x, weight)
    _check_conv_shapes(x, weight, geom)
    n, _, h, w = x.shape
    oh, ow = geom.output_size(h, w)
    if grad_out.shape != (n, geom.out_channels, oh, ow):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} != conv output {(n, geom.out_channels, oh, ow)}"
        )
    g, k = geom.groups, geom.kernel_size
    cin_g, cout_g = geom.in_channels // g, geom.out_channels // g
    L = oh * ow

    cols = im2col(x, k, geom.stride, geom.padding).reshape(n, g, cin_g * k * k, L)
    go = grad_out.reshape(n, g, cout_g, L)
    if n == 1:
        grad_w = np.matmul(go[0], cols[0].transpose(0, 2, 1))
    else:
        go_g = go.transpose(1, 2, 0, 3).reshape(g, cout_g, n * L)
        cols_g = cols.transpose(1, 0, 3, 2).reshape(g, n * L, cin_g * k * k)
        grad_w = np.matmul(go_g, cols_g)
    grad_w = grad_w.reshape(weight.shape)

    grad_x = None
    if need_input_grad:
        wmat = weight.reshape(g, cout_g, cin_g * k * k)
        gcols = np.matmul(wmat.transpose(0, 2, 1)[None], go)
        grad_x = col2im(
            gcols.reshape(n, geom.in_channels * k * k, L), x.shape, k, geom.stride,
            geom.padding, (oh, ow),
        )
    return grad_x, grad_w


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    check_float(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def softmax_with_temperature(logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Softmax over the last axis of ``logits / tau``, max-subtracted."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = logits / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    x = np.array(x, copy=True)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at element {i}")
        gflat[i] = (fp - fm) / (2 * step)
    return grad


_REDUCERS = {"sum": np.sum, "mean": np.mean, "max": np.max}


def reduce(t: np.ndarray, op: str, axes: int | Sequence[int] | None = None) -> np.ndarray:
    if op not in _REDUCERS:
        raise ValueError(f"unknown reduction {op!r}; expected one of {sorted(_REDUCERS)}")
    if axes is None:
        axes = tuple(range(t.ndim))
    elif isinstance(axes, int):
        axes = (axes,)
    axes = tuple(axes)
    for ax in axes:
        if not -t.ndim <= ax < t.ndim:
            raise ShapeError(f"invalid axis {ax} for tensor of rank {t.ndim}")
        if t.shape[ax] == 0:
            raise ShapeError(f"cannot {op}-reduce over zero-size axis {ax}")
    return _REDUCERS[op](t, axis=axes)
