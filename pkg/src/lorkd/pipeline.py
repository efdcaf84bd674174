"""Teacher training, frozen-expert warmup, rank planning, joint decomposition
training and evaluation on synthetic multi-task data."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .data import StratifiedSampler, TaskDataset, generate
from .errors import NumericError, ValidationError
from .lowrank import (
    RankPlan,
    check_lowrank_budget,
    default_window,
    init_lowrank,
    measure_loss_reduction,
    plan_ranks,
)
from .metrics import cka_matrix, evaluate_accuracy, evaluate_dsc, macro_average
from .network import (
    ClsNet,
    Net,
    SegNet,
    build_student_cls,
    build_student_seg,
    build_teacher,
    expected_param_counts,
)
from .objectives import total_cls_loss, total_seg_loss
from .optim import Optimizer
from .tensor import KERNEL_STATS

log = logging.getLogger(__name__)

EVAL_CHUNK = 64
EVAL_SEED_OFFSET = 100_003


@dataclass
class MultiTaskData:
    train: list[TaskDataset]
    eval: list[TaskDataset]

    @property
    def task_count(self) -> int:
        return len(self.train)


def build_data(cfg: RunConfig) -> MultiTaskData:
    seed = cfg.train.seed
    train = [generate(s, seed, cfg.data.train_size) for s in cfg.specs]
    evals = [generate(s, seed + EVAL_SEED_OFFSET, cfg.data.eval_size) for s in cfg.specs]
    return MultiTaskData(train, evals)


@dataclass
class WarmupLog:
    records: list[tuple[int, int, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"task_losses": [[int(s), int(t), float(l)] for s, t, l in self.records]}

    @classmethod
    def from_dict(cls, d: dict) -> "WarmupLog":
        try:
            return cls([(int(s), int(t), float(l)) for s, t, l in d["task_losses"]])
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed warmup log: {exc}") from None

    def task_records(self) -> list[tuple[int, float]]:
        return [(t, l) for _, t, l in self.records]


@dataclass
class MetricsReport:
    metric: str
    per_task: dict[int, float]
    params_train: int
    params_fused: int
    kernel_launches: int = 0
    wall_clock_s: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def macro_avg(self) -> float:
        return macro_average(self.per_task)

    def to_dict(self) -> dict:
        d = {
            "metric": self.metric,
            "per_task": {str(t): v for t, v in sorted(self.per_task.items())},
            "macro_avg": self.macro_avg,
            "params_train": self.params_train,
            "params_fused": self.params_fused,
            "kernel_launches": self.kernel_launches,
            "timing": {"wall_clock_s": self.wall_clock_s},
        }
        d.update(self.extra)
        return d


# --------------------------------------------------------------------------- model builders


def build_student(cfg: RunConfig, ranks=None, seed: int | None = None) -> Net:
    t = cfg.train
    seed = t.seed if seed is None else seed
    ranks = t.base_rank if ranks is None else ranks
    arch = cfg.architecture
    if t.mode == "cls":
        return build_student_cls(t.task_count, cfg.task_sizes, arch.width, seed, ranks=ranks,
                                 teacher_feature_dim=arch.teacher_widths[-1],
                                 in_channels=arch.in_channels)
    return build_student_seg(t.task_count, cfg.task_sizes, arch.width, seed, ranks=ranks,
                             in_channels=arch.in_channels)


def build_teacher_for(cfg: RunConfig, seed: int | None = None) -> Net:
    seed = cfg.train.seed + 1 if seed is None else seed
    arch = cfg.architecture
    widths = arch.teacher_widths if cfg.train.mode == "cls" else arch.teacher_widths[0]
    return build_teacher(cfg.train.mode, cfg.task_sizes, widths, seed, arch.in_channels)


# --------------------------------------------------------------------------- losses per batch


def _class_offsets(class_counts) -> np.ndarray:
    return np.concatenate([[0], np.cumsum(class_counts)[:-1]]).astype(np.int64)


def batch_loss(net: Net, batch, beta: float, tau: float, teacher: Net | None = None,
               train_experts: bool = False) -> tuple[float, dict, dict[int, float]]:
    """Loss, parameter gradients and per-task task-loss means for one batch."""
    x, tasks = batch.images, batch.tasks
    if beta > 0 and teacher is None:
        raise ValidationError("beta > 0 requires a teacher")
    per_task: dict[int, float] = {}

    if isinstance(net, ClsNet):
        labels = batch.labels
        if net.role == "teacher":
            labels = labels + _class_offsets(net.class_counts)[tasks]
        out = net.forward(x, tasks if net.role == "student" else None, train_experts)
        tfeat = teacher.forward(x)["features"] if beta > 0 else None
        loss, gfeat, glog, terms = total_cls_loss(
            out["projected"], tfeat, out["logits"], labels, beta, tau, out["valid"])
        grads = net.backward(out, glog, gfeat)
        ce = terms["ce_per_sample"]
        for t in np.unique(tasks):
            per_task[int(t)] = float(ce[tasks == t].mean())
        return loss, grads, per_task

    assert isinstance(net, SegNet)
    out = net.forward(x, tasks if net.role == "student" else None, train_experts)
    probs = out["probs"]
    tprobs = teacher.forward(x)["probs"] if beta > 0 else None
    grad = np.zeros_like(probs)
    b = x.shape[0]
    loss = 0.0
    sums: dict[int, list[float]] = {}
    for i in range(b):
        t = int(tasks[i])
        sl = net.channel_slice(t)
        tp = tprobs[i, teacher.channel_slice(t)] if tprobs is not None else None
        target = np.asarray(batch.targets[i], dtype=probs.dtype)
        li, gi, terms = total_seg_loss(probs[i, sl], target, tp, beta)
        loss += li / b
        grad[i, sl] = gi / b
        sums.setdefault(t, []).append(terms["bce"] + terms["dice"])
    grads = net.backward(out, grad)
    per_task = {t: float(np.mean(v)) for t, v in sums.items()}
    return loss, grads, per_task


def _train(net: Net, sampler: StratifiedSampler, steps: int, opt: Optimizer, beta: float,
           tau: float, teacher: Net | None, train_experts: bool,
           on_step=None, step_offset: int = 0) -> None:
    params = net.params()
    frozen = set() if train_experts else set(net.expert_names())
    for step in range(steps):
        batch = sampler.next()
        loss, grads, per_task = batch_loss(net, batch, beta, tau, teacher, train_experts)
        if not np.isfinite(loss):
            raise NumericError(f"loss became non-finite at step {step_offset + step}")
        opt.step(params, {k: v for k, v in grads.items() if k not in frozen})
        if on_step is not None:
            on_step(step_offset + step, per_task)


def _optimizer(cfg: RunConfig, total: int) -> Optimizer:
    t = cfg.train
    return Optimizer(t.optimizer, t.learning_rate, t.weight_decay, t.scheduler, total)


# --------------------------------------------------------------------------- stages


def train_teacher(cfg: RunConfig, teacher: Net, data: MultiTaskData,
                  steps: int | None = None) -> Net:
    steps = cfg.train.teacher_steps if steps is None else steps
    sampler = StratifiedSampler(data.train, cfg.train.batch_size, cfg.train.seed + 17)
    _train(teacher, sampler, steps, _optimizer(cfg, steps), 0.0, cfg.train.tau, None, False)
    return teacher


def run_warmup(cfg: RunConfig, net: Net, data: MultiTaskData,
               teacher: Net | None = None) -> WarmupLog:
    """Train backbone and heads with experts frozen, logging per-task losses.

    The transfer term is only used when a teacher is supplied.
    """
    steps = cfg.train.warmup_steps
    wlog = WarmupLog()
    if steps == 0:
        return wlog
    beta = cfg.train.beta if teacher is not None else 0.0
    sampler = StratifiedSampler(data.train, cfg.train.batch_size, cfg.train.seed)

    def record(step, per_task):
        for t in sorted(per_task):
            wlog.records.append((step, t, per_task[t]))

    _train(net, sampler, steps, _optimizer(cfg, steps), beta, cfg.train.tau, teacher,
           train_experts=False, on_step=record)
    return wlog


def plan_from_log(cfg: RunConfig, wlog: WarmupLog) -> RankPlan:
    """Imbalanced mode plans from the warmup losses; balanced mode (or an empty
    log) assigns the base rank to every task."""
    T, r = cfg.train.task_count, cfg.train.base_rank
    if not wlog.records:
        return RankPlan(r, [0.0] * T, [r] * T, degenerate=True)
    steps = min(sum(1 for _, t, _ in wlog.records if t == k) for k in range(T))
    reductions = measure_loss_reduction(wlog.task_records(), default_window(steps), T)
    if cfg.train.rank_mode == "balanced":
        return RankPlan(r, reductions, [r] * T)
    return plan_ranks(reductions, r)


def apply_ranks(net: Net, ranks, seed: int) -> None:
    """Re-create inert experts at the planned ranks; trained experts are refused."""
    if net.role != "student":
        raise ValidationError("ranks apply to decomposed students only")
    ranks = [int(r) for r in ranks]
    if len(ranks) != net.task_count:
        raise ValidationError(f"rank plan has {len(ranks)} tasks, model has {net.task_count}")
    if ranks == net.ranks:
        return
    for conv in net.convs:
        if any(np.any(e.b) for e in conv.experts):
            raise ValidationError("cannot re-rank experts that have already been trained")
    check_lowrank_budget(net.eks_geometries(), ranks)
    rng = np.random.default_rng([seed, 4242])
    for conv in net.convs:
        conv.eks.experts[:] = [init_lowrank(conv.geometry, r, rng, dtype=net.dtype) for r in ranks]


def run_decomposition(cfg: RunConfig, net: Net, teacher: Net | None, data: MultiTaskData,
                      train_experts: bool = True) -> tuple[Net, MetricsReport]:
    """Joint training of backbone, experts and heads for ``train_steps``.

    With ``train_experts=False`` the experts stay frozen and inert, which is
    the shared-backbone multi-task baseline.
    """
    t = cfg.train
    if len(net.ranks) != t.task_count:
        raise ValidationError(f"model has {len(net.ranks)} experts per layer, config {t.task_count} tasks")
    if t.beta > 0 and teacher is None:
        raise ValidationError("beta > 0 requires a trained teacher")
    sampler = StratifiedSampler(data.train, t.batch_size, t.seed + 1)
    KERNEL_STATS.reset()
    start = time.perf_counter()
    _train(net, sampler, t.train_steps, _optimizer(cfg, t.train_steps), t.beta, t.tau,
           teacher if t.beta > 0 else None, train_experts)
    elapsed = time.perf_counter() - start
    launches = KERNEL_STATS.launches
    report = evaluate(net, data)
    report.kernel_launches = launches
    report.wall_clock_s = elapsed
    return net, report


# --------------------------------------------------------------------------- evaluation


def _chunks(n: int):
    for i in range(0, n, EVAL_CHUNK):
        yield slice(i, min(n, i + EVAL_CHUNK))


def evaluate_task(net: Net, ds: TaskDataset) -> float:
    t = ds.task_id
    n = len(ds)
    if isinstance(net, ClsNet):
        hits = []
        for sl in _chunks(n):
            x = ds.images[sl]
            if net.role == "student":
                out = net.forward(x, np.full(x.shape[0], t))
                acc = evaluate_accuracy(out["logits"], ds.targets[sl], np.full(x.shape[0], t),
                                        net.task_count, out["valid"])[t]
            elif net.role == "teacher":
                off = _class_offsets(net.class_counts)[t]
                logits = net.forward(x)["logits"][:, off : off + net.class_counts[t]]
                acc = evaluate_accuracy(logits, ds.targets[sl], np.zeros(x.shape[0], int), 1)[0]
            else:
                logits = net.forward(x)["logits"]
                acc = evaluate_accuracy(logits, ds.targets[sl], np.zeros(x.shape[0], int), 1)[0]
            hits.append(acc * x.shape[0])
        return float(np.sum(hits) / n)

    scores = []
    for sl in _chunks(n):
        x = ds.images[sl]
        tasks = np.full(x.shape[0], t) if net.role == "student" else None
        probs = net.forward(x, tasks)["probs"]
        ch = net.channel_slice(t if net.role != "fused" else 0)
        for i in range(x.shape[0]):
            scores.append(evaluate_dsc(probs[i, ch], ds.targets[sl][i]).mean())
    return float(np.mean(scores))


def evaluate(net: Net, data: MultiTaskData) -> MetricsReport:
    if net.role == "fused":
        tasks = [net.task_id]
    else:
        tasks = list(range(data.task_count))
    per_task = {t: evaluate_task(net, data.eval[t]) for t in tasks}
    counts = expected_param_counts(net)
    fused = max(counts["fused"]) if net.role == "student" else net.param_count()
    return MetricsReport(
        metric="accuracy" if isinstance(net, ClsNet) else "dsc",
        per_task=per_task,
        params_train=net.param_count(),
        params_fused=fused,
    )


def probe_images(data: MultiTaskData, size: int) -> np.ndarray:
    """Round-robin pool of evaluation images from every task."""
    T = data.task_count
    picks = [data.eval[i % T].images[i // T] for i in range(min(size, T * len(data.eval[0])))]
    return np.stack(picks)


def penultimate_features(net: Net, images: np.ndarray, task: int) -> np.ndarray:
    feats = []
    for sl in _chunks(images.shape[0]):
        x = images[sl]
        tasks = np.full(x.shape[0], task) if net.role == "student" else None
        feats.append(net.forward(x, tasks)["features"])
    return np.concatenate(feats)


def cross_task_cka(net: Net, images: np.ndarray) -> np.ndarray:
    """T x T linear CKA between the features each task's route produces on shared inputs."""
    feats = [penultimate_features(net, images, t) for t in range(net.task_count)]
    return cka_matrix(feats)
