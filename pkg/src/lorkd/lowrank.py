"""Per-task low-rank expert factors for convolution weights, and rank planning.

For a conv weight of shape (C_out, C_in, k, k) an expert is a factor pair
``B`` of shape (C_out*k, r*k) and ``A`` of shape (r*k, C_in*k). Their product
is a (C_out*k, C_in*k) matrix whose rows split as (C_out, kernel row) and
columns as (C_in, kernel col); permuting gives the additive weight delta.
"""

from __future__ import annotations

import math
import warnings
from collections import defaultdict
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .errors import ShapeError, ValidationError
from .tensor import ConvGeometry, check_float, matmul

MIN_RANK = 2
INIT_STD = 0.02


@dataclass
class LowRankPair:
    b: np.ndarray
    a: np.ndarray
    rank: int
    geometry: ConvGeometry

    def __post_init__(self) -> None:
        g, k = self.geometry, self.geometry.kernel_size
        if g.groups != 1:
            raise ShapeError("low-rank experts require an ungrouped convolution")
        want_b = (g.out_channels * k, self.rank * k)
        want_a = (self.rank * k, g.in_channels * k)
        if self.b.shape != want_b:
            raise ShapeError(f"B factor shape {self.b.shape} != {want_b}")
        if self.a.shape != want_a:
            raise ShapeError(f"A factor shape {self.a.shape} != {want_a}")
        check_float(self.b, self.a)

    @property
    def param_count(self) -> int:
        return self.b.size + self.a.size


def init_lowrank(
    geometry: ConvGeometry, rank: int, seed: int | np.random.Generator,
    dtype=np.float32,
) -> LowRankPair:
    """Fresh expert: ``A ~ N(0, 0.02^2)``, ``B = 0`` so the delta starts at zero."""
    if rank < MIN_RANK:
        raise ValidationError(f"rank must be >= {MIN_RANK}, got {rank}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    k = geometry.kernel_size
    a = (rng.standard_normal((rank * k, geometry.in_channels * k)) * INIT_STD).astype(dtype)
    b = np.zeros((geometry.out_channels * k, rank * k), dtype=dtype)
    return LowRankPair(b=b, a=a, rank=rank, geometry=geometry)


def matrix_to_kernel(mat: np.ndarray, geometry: ConvGeometry) -> np.ndarray:
    co, ci, k = geometry.out_channels, geometry.in_channels, geometry.kernel_size
    return mat.reshape(co, k, ci, k).transpose(0, 2, 1, 3)


def kernel_to_matrix(kernel: np.ndarray, geometry: ConvGeometry) -> np.ndarray:
    co, ci, k = geometry.out_channels, geometry.in_channels, geometry.kernel_size
    return kernel.transpose(0, 2, 1, 3).reshape(co * k, ci * k)


def expert_delta(pair: LowRankPair) -> np.ndarray:
    """The (C_out, C_in, k, k) weight delta ``reshape(B @ A)``."""
    return np.ascontiguousarray(matrix_to_kernel(matmul(pair.b, pair.a), pair.geometry))


def expert_factor_grads(
    pair: LowRankPair, grad_delta: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Chain ``dL/d(delta)`` through the product into ``(dL/dB, dL/dA)``."""
    gm = kernel_to_matrix(grad_delta, pair.geometry)
    return gm @ pair.a.T, pair.b.T @ gm


def fuse_weights(w0: np.ndarray, pair: LowRankPair) -> np.ndarray:
    if w0.shape != pair.geometry.weight_shape:
        raise ShapeError(
            f"backbone weight {w0.shape} does not match expert geometry "
            f"{pair.geometry.weight_shape}"
        )
    return w0 + expert_delta(pair)


def expert_param_count(geometry: ConvGeometry, rank: int) -> int:
    k = geometry.kernel_size
    return rank * k * (geometry.out_channels * k + geometry.in_channels * k)


def dense_param_count(geometry: ConvGeometry) -> int:
    return math.prod(geometry.weight_shape)


def check_lowrank_budget(geometries: Sequence[ConvGeometry], ranks: Sequence[int]) -> None:
    """Refuse configurations whose per-task experts are as large as the dense convs.

    The comparison is made per task, summed over all decomposed layers.
    """
    dense = sum(dense_param_count(g) for g in geometries)
    for task, r in enumerate(ranks):
        expert = sum(expert_param_count(g, r) for g in geometries)
        if expert >= dense:
            raise ValidationError(
                f"task {task}: rank {r} experts hold {expert} parameters, not fewer "
                f"than the {dense} dense conv weights they decompose"
            )


def nearest_even(x: float | Fraction) -> int:
    """Round to the nearest even integer; odd integers (exact midpoints) go up."""
    return 2 * math.floor(Fraction(x) / 2 + Fraction(1, 2))


@dataclass
class RankPlan:
    base_rank: int
    loss_reductions: list[float]
    ranks: list[int]
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {
            "base_rank": self.base_rank,
            "loss_reductions": [float(x) for x in self.loss_reductions],
            "ranks": [int(r) for r in self.ranks],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RankPlan":
        plan = cls(
            base_rank=int(d["base_rank"]),
            loss_reductions=[float(x) for x in d["loss_reductions"]],
            ranks=[int(r) for r in d["ranks"]],
        )
        if len(plan.ranks) != len(plan.loss_reductions):
            raise ValidationError("rank plan: ranks and loss_reductions differ in length")
        for r in plan.ranks:
            if r < MIN_RANK or r % 2:
                raise ValidationError(f"rank plan: rank {r} is not an even number >= 2")
        return plan


def plan_ranks(loss_reductions: Sequence[float], base_rank: int) -> RankPlan:
    """Scale ``base_rank`` by the squared relative warmup loss reduction of each task.

    ``rank_i = nearest_even(base_rank * (dL_i / mean(dL))**2)``, clamped below
    at 2. Negative reductions count as zero. Exact rational arithmetic keeps the
    result invariant to task order and to rescaling all reductions.
    """
    if len(loss_reductions) < 1:
        raise ValidationError("plan_ranks needs at least one task")
    if base_rank < MIN_RANK:
        raise ValidationError(f"base rank must be >= {MIN_RANK}, got {base_rank}")
    for i, x in enumerate(loss_reductions):
        if not math.isfinite(x):
            raise ValidationError(f"loss reduction of task {i} is not finite: {x}")

    clamped = [Fraction(max(float(x), 0.0)) for x in loss_reductions]
    total = sum(clamped, Fraction(0))
    if total == 0:
        warnings.warn("all warmup loss reductions are zero; using the base rank everywhere")
        return RankPlan(base_rank, [float(x) for x in loss_reductions],
                        [base_rank] * len(clamped), degenerate=True)
    avg = total / len(clamped)
    ranks = [max(MIN_RANK, nearest_even(base_rank * (d / avg) ** 2)) for d in clamped]
    return RankPlan(base_rank, [float(x) for x in loss_reductions], ranks)


def default_window(steps_per_task: int) -> int:
    return max(1, min(50, steps_per_task // 10))


def measure_loss_reduction(
    records: Iterable[tuple[int, float]], window: int | None = None,
    task_count: int | None = None,
) -> list[float]:
    """Per task: mean of the first ``window`` losses minus mean of the last ``window``.

    ``records`` are ``(task_id, loss)`` pairs in step order. When ``window`` is
    omitted it defaults to ``min(50, steps // 10)`` of the least-logged task.
    """
    by_task: dict[int, list[float]] = defaultdict(list)
    for task, loss in records:
        by_task[int(task)].append(float(loss))
    if task_count is None:
        task_count = max(by_task) + 1 if by_task else 0
    if task_count < 1:
        raise ValidationError("warmup log is empty")
    counts = [len(by_task.get(t, [])) for t in range(task_count)]
    if window is None:
        window = default_window(min(counts))
    if window < 1:
        raise ValidationError(f"window must be >= 1, got {window}")
    out = []
    for t in range(task_count):
        losses = by_task.get(t, [])
        if len(losses) < 2 * window:
            raise ValidationError(
                f"task {t} has {len(losses)} warmup records; need at least {2 * window}"
            )
        out.append(float(np.mean(losses[:window]) - np.mean(losses[-window:])))
    return out
