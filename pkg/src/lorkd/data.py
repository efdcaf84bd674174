"""Deterministic synthetic multi-task datasets.

Classification images are noisy gratings decorated with bright squares; each
task reads one latent attribute of the image (orientation, spatial
frequency, square count or brightness). With ``conflict_coupling = 1`` the
image of index ``i`` is identical for every task, so tasks label the very
same texture differently. With coupling 0 every non-target attribute sits at
a fixed canonical value.

Segmentation images hold shapes of one family per task (circles, squares,
bars, crosses); mask ``k`` covers shapes drawn at intensity level ``k``.
Coupling adds shapes of other families as unlabeled distractors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

CLS_FAMILIES = ("orientation", "frequency", "blobs", "brightness")
SEG_FAMILIES = ("circles", "squares", "bars", "crosses")

_SHARED_STREAM = 7919
BRIGHTNESS_SPAN = 0.6
_TASK_STREAM = 104729


@dataclass(frozen=True)
class SyntheticTaskSpec:
    task_id: int
    kind: str  # "pattern_cls" or "shape_seg"
    num_outputs: int  # classes (cls) or masks (seg)
    family: str | None = None
    image_size: int = 32
    conflict_coupling: float = 0.0
    noise: float = 0.3

    def __post_init__(self) -> None:
        if self.kind not in ("pattern_cls", "shape_seg"):
            raise ValidationError(f"unknown generator kind {self.kind!r}")
        if not 0.0 <= self.conflict_coupling <= 1.0:
            raise ValidationError(f"conflict_coupling must be in [0, 1], got {self.conflict_coupling}")
        if self.image_size < 8 or self.image_size % 4:
            raise ValidationError(f"image_size must be a multiple of 4 and >= 8, got {self.image_size}")
        families = CLS_FAMILIES if self.kind == "pattern_cls" else SEG_FAMILIES
        if self.family is not None and self.family not in families:
            raise ValidationError(f"unknown {self.kind} family {self.family!r}; expected one of {families}")
        lo = 2 if self.kind == "pattern_cls" else 1
        if self.num_outputs < lo:
            raise ValidationError(f"num_outputs must be >= {lo}, got {self.num_outputs}")
        if self.noise < 0:
            raise ValidationError(f"noise must be non-negative, got {self.noise}")

    @property
    def resolved_family(self) -> str:
        if self.family is not None:
            return self.family
        families = CLS_FAMILIES if self.kind == "pattern_cls" else SEG_FAMILIES
        return families[self.task_id % len(families)]


@dataclass
class TaskDataset:
    task_id: int
    images: np.ndarray  # (N, 1, S, S) float32
    targets: np.ndarray  # (N,) int64 labels or (N, K, S, S) uint8 masks

    def __len__(self) -> int:
        return self.images.shape[0]


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in keys])


# --------------------------------------------------------------------------- classification


def _cls_image(rng: np.random.Generator, attrs: dict, levels: int, size: int,
               noise: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    angle = np.pi * attrs["orientation"] / levels + rng.uniform(-0.08, 0.08)
    period = 3.0 * 4.0 ** (attrs["frequency"] / max(levels - 1, 1))
    phase = rng.uniform(0, 2 * np.pi)
    proj = xx * np.cos(angle) + yy * np.sin(angle)
    img = 0.6 * np.sin(2 * np.pi * proj / period + phase)
    # squares sit in distinct cells of a 4x4 grid so they never overlap
    cell = size // 4
    side = max(1, 5 * cell // 8)
    for c in rng.choice(16, size=min(attrs["blobs"] + 1, 16), replace=False):
        r0 = (c // 4) * cell + int(rng.integers(0, cell - side + 1))
        c0 = (c % 4) * cell + int(rng.integers(0, cell - side + 1))
        img[r0 : r0 + side, c0 : c0 + side] += 1.5
    img += BRIGHTNESS_SPAN * (attrs["brightness"] / max(levels - 1, 1) - 0.5)
    img += noise * rng.standard_normal((size, size))
    return img.astype(np.float32)


_CANONICAL = {"orientation": 0, "frequency": 1, "blobs": 0, "brightness": 1}


def gen_synthetic_cls(spec: SyntheticTaskSpec, seed: int, count: int) -> TaskDataset:
    if spec.kind != "pattern_cls":
        raise ValidationError(f"task {spec.task_id} is not a classification task")
    levels, size = spec.num_outputs, spec.image_size
    family = spec.resolved_family
    images = np.empty((count, 1, size, size), dtype=np.float32)
    labels = np.empty(count, dtype=np.int64)
    for i in range(count):
        pick = _rng(seed, _TASK_STREAM, spec.task_id, i)
        if pick.random() < spec.conflict_coupling:
            # shared pool: depends on (seed, i) only, so every task sees this image
            rng = _rng(seed, _SHARED_STREAM, i)
            attrs = {f: int(rng.integers(0, levels)) for f in CLS_FAMILIES}
        else:
            rng = pick
            attrs = {f: min(_CANONICAL[f], levels - 1) for f in CLS_FAMILIES}
            attrs[family] = int(rng.integers(0, levels))
        images[i, 0] = _cls_image(rng, attrs, levels, size, spec.noise)
        labels[i] = attrs[family]
    return TaskDataset(spec.task_id, images, labels)


# --------------------------------------------------------------------------- segmentation


def _shape_mask(family: str, rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    cy, cx = rng.integers(5, size - 5, size=2)
    if family == "circles":
        r = rng.uniform(2.5, 5.5)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if family == "squares":
        h = int(rng.integers(2, 5))
        return (np.abs(yy - cy) <= h) & (np.abs(xx - cx) <= h)
    if family == "bars":
        long_, short = int(rng.integers(4, 8)), 1
        if rng.random() < 0.5:
            return (np.abs(yy - cy) <= short) & (np.abs(xx - cx) <= long_)
        return (np.abs(yy - cy) <= long_) & (np.abs(xx - cx) <= short)
    if family == "crosses":
        arm = int(rng.integers(3, 6))
        horiz = (np.abs(yy - cy) <= 1) & (np.abs(xx - cx) <= arm)
        vert = (np.abs(xx - cx) <= 1) & (np.abs(yy - cy) <= arm)
        return horiz | vert
    raise ValidationError(f"unknown shape family {family!r}")


def gen_synthetic_seg(spec: SyntheticTaskSpec, seed: int, count: int) -> TaskDataset:
    if spec.kind != "shape_seg":
        raise ValidationError(f"task {spec.task_id} is not a segmentation task")
    k_masks, size = spec.num_outputs, spec.image_size
    family = spec.resolved_family
    others = [f for f in SEG_FAMILIES if f != family]
    images = np.empty((count, 1, size, size), dtype=np.float32)
    masks = np.zeros((count, k_masks, size, size), dtype=np.uint8)
    for i in range(count):
        rng = _rng(seed, _TASK_STREAM, spec.task_id, i)
        img = np.zeros((size, size))
        if rng.random() < spec.conflict_coupling:
            for _ in range(int(rng.integers(1, 3))):
                shape = _shape_mask(others[int(rng.integers(0, len(others)))], rng, size)
                img[shape] = 0.4 + 0.6 * rng.uniform(0.2, 1.0)
        for _ in range(int(rng.integers(1, 4))):
            level = int(rng.integers(0, k_masks))
            shape = _shape_mask(family, rng, size)
            img[shape] = 0.4 + 0.6 * (level + 1) / k_masks
            masks[i][:, shape] = 0
            masks[i][level][shape] = 1
        img += spec.noise * rng.standard_normal((size, size))
        images[i, 0] = img
    return TaskDataset(spec.task_id, images, masks)


def generate(spec: SyntheticTaskSpec, seed: int, count: int) -> TaskDataset:
    if spec.kind == "pattern_cls":
        return gen_synthetic_cls(spec, seed, count)
    return gen_synthetic_seg(spec, seed, count)


# --------------------------------------------------------------------------- batching


@dataclass
class Batch:
    images: np.ndarray
    tasks: np.ndarray
    targets: list  # per-sample label (int) or mask array

    @property
    def labels(self) -> np.ndarray:
        return np.asarray(self.targets, dtype=np.int64)


class StratifiedSampler:
    """Task-stratified batches: slot ``j`` of step ``s`` belongs to task ``(s*B + j) % T``.

    Within a task, samples are drawn without replacement from per-epoch
    permutations of a seeded generator.
    """

    def __init__(self, datasets: list[TaskDataset], batch_size: int, seed: int):
        if batch_size < 1:
            raise ValidationError(f"batch size must be positive, got {batch_size}")
        self.datasets = datasets
        self.batch_size = batch_size
        self.rng = np.random.default_rng([int(seed), 31337])
        self._orders = [self.rng.permutation(len(d)) for d in datasets]
        self._pos = [0] * len(datasets)
        self._slot = 0

    def _next_index(self, t: int) -> int:
        if self._pos[t] >= len(self._orders[t]):
            self._orders[t] = self.rng.permutation(len(self.datasets[t]))
            self._pos[t] = 0
        i = int(self._orders[t][self._pos[t]])
        self._pos[t] += 1
        return i

    def next(self) -> Batch:
        T = len(self.datasets)
        tasks = np.empty(self.batch_size, dtype=np.int64)
        images, targets = [], []
        for j in range(self.batch_size):
            t = self._slot % T
            self._slot += 1
            i = self._next_index(t)
            tasks[j] = t
            images.append(self.datasets[t].images[i])
            targets.append(self.datasets[t].targets[i])
        return Batch(np.stack(images), tasks, targets)
