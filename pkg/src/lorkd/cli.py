"""Command line entry point: ``lorkd <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 validation error (bad config, file or
checkpoint), 3 numeric failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .checkpoint import checkpoint_extra, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .eks import EksConvLayer, TaskIndexMatrix, cost_estimate, eks_forward, naive_forward
from .errors import LorkdError, NumericError, ValidationError
from .lowrank import RankPlan, init_lowrank, measure_loss_reduction, plan_ranks
from .metrics import mean_off_diagonal
from .network import expected_param_counts, extract_expert
from .pipeline import (
    WarmupLog,
    apply_ranks,
    build_data,
    build_student,
    build_teacher_for,
    cross_task_cka,
    evaluate,
    plan_from_log,
    probe_images,
    run_decomposition,
    run_warmup,
    train_teacher,
)
from .tensor import KERNEL_STATS, ConvGeometry

log = logging.getLogger("lorkd")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------- report helpers


def _versions() -> dict:
    return {"lorkd": __version__, "numpy": np.__version__, "python": platform.python_version()}


def provenance(cfg: RunConfig | None = None, args: dict | None = None) -> dict:
    if cfg is not None:
        digest, seed = cfg.digest(), cfg.train.seed
    else:
        text = json.dumps(args or {}, sort_keys=True, separators=(",", ":"))
        digest, seed = hashlib.sha256(text.encode()).hexdigest(), None
    return {"config_hash": digest, "seed": seed, "versions": _versions()}


def write_json(path: str | Path, obj: dict) -> None:
    """Atomic write, one key per line."""
    path = Path(path)
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_json(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from None


def strip_timing(report: dict) -> dict:
    """Report without wall-clock entries, the part that must repeat exactly."""
    return {k: (strip_timing(v) if isinstance(v, dict) else v)
            for k, v in report.items() if k != "timing"}


def _report(cfg: RunConfig, body: dict) -> dict:
    return {**body, "provenance": provenance(cfg), "config": cfg.resolved()}


# --------------------------------------------------------------------------- subcommands


def cmd_train_teacher(args) -> int:
    cfg = load_config(args.config)
    data = build_data(cfg)
    teacher = build_teacher_for(cfg)
    start = time.perf_counter()
    train_teacher(cfg, teacher, data)
    report = evaluate(teacher, data)
    report.wall_clock_s = time.perf_counter() - start
    save_checkpoint(teacher, args.out, {"config": cfg.resolved()})
    if args.report:
        write_json(args.report, _report(cfg, report.to_dict()))
    print(json.dumps({"teacher_macro_avg": report.macro_avg}))
    return EXIT_OK


def cmd_warmup(args) -> int:
    cfg = load_config(args.config)
    data = build_data(cfg)
    net = build_student(cfg)
    teacher = load_checkpoint(args.teacher) if args.teacher else None
    wlog = run_warmup(cfg, net, data, teacher)
    body = wlog.to_dict()
    save_checkpoint(net, args.out, {"config": cfg.resolved(), "warmup_log": body})
    write_json(args.log, _report(cfg, body))
    print(json.dumps({"warmup_records": len(wlog.records)}))
    return EXIT_OK


def cmd_plan_ranks(args) -> int:
    wlog = WarmupLog.from_dict(read_json(args.log))
    if not wlog.records:
        raise ValidationError("warmup log is empty; nothing to plan from")
    reductions = measure_loss_reduction(wlog.task_records(), args.window)
    plan = plan_ranks(reductions, args.base_rank)
    body = {**plan.to_dict(), "degenerate": plan.degenerate,
            "provenance": provenance(args={"log": wlog.to_dict(), "base_rank": args.base_rank,
                                           "window": args.window})}
    if args.out:
        write_json(args.out, body)
    print(json.dumps(plan.to_dict()))
    return EXIT_OK


def _check_same_tasks(cfg: RunConfig, net, what: str) -> None:
    if net.mode != cfg.train.mode or net.task_count != cfg.train.task_count:
        raise ValidationError(
            f"{what} is a {net.mode} model over {net.task_count} tasks; config wants "
            f"{cfg.train.mode} over {cfg.train.task_count}"
        )


def cmd_decompose(args) -> int:
    cfg = load_config(args.config)
    data = build_data(cfg)
    teacher = None
    if args.teacher:
        teacher = load_checkpoint(args.teacher)
        _check_same_tasks(cfg, teacher, "teacher")
    elif cfg.train.beta > 0:
        raise ValidationError(f"beta={cfg.train.beta} needs --teacher")

    if args.arm == "mtl":
        if args.warmup or args.ranks:
            raise ValidationError("the mtl arm takes neither --warmup nor --ranks")
        net = build_student(cfg)
        mtl_cfg = cfg.model_copy(deep=True)
        mtl_cfg.train.train_steps = cfg.train.train_steps + cfg.train.warmup_steps
        net, report = run_decomposition(mtl_cfg, net, teacher, data, train_experts=False)
        plan = RankPlan(cfg.train.base_rank, [], net.ranks)
    else:
        if args.warmup:
            net = load_checkpoint(args.warmup)
            if net.role != "student":
                raise ValidationError("--warmup must be a student checkpoint")
            _check_same_tasks(cfg, net, "warmup checkpoint")
            wlog = WarmupLog.from_dict(checkpoint_extra(args.warmup).get("warmup_log", {"task_losses": []}))
        else:
            net = build_student(cfg)
            wlog = run_warmup(cfg, net, data)
        if args.ranks:
            plan = RankPlan.from_dict(read_json(args.ranks))
        else:
            plan = plan_from_log(cfg, wlog)
        apply_ranks(net, plan.ranks, cfg.train.seed)
        net, report = run_decomposition(cfg, net, teacher, data)

    save_checkpoint(net, args.out, {"config": cfg.resolved(), "rank_plan": plan.to_dict(), "arm": args.arm})
    body = report.to_dict()
    body.update({"arm": args.arm, "ranks": plan.ranks, "rank_plan": plan.to_dict()})
    if args.report:
        write_json(args.report, _report(cfg, body))
    print(json.dumps({"macro_avg": report.macro_avg, "ranks": plan.ranks}))
    return EXIT_OK


def cmd_fuse(args) -> int:
    net = load_checkpoint(args.model)
    fused = extract_expert(net, args.task)
    save_checkpoint(fused, args.out, {"source": str(args.model), "task": args.task})
    counts = expected_param_counts(net)
    print(json.dumps({"task": args.task, "params_fused": fused.param_count(),
                      "backbone_closed_form": counts["fused"][args.task]}))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    net = load_checkpoint(args.model)
    if net.role != "fused":
        _check_same_tasks(cfg, net, "model")
    data = build_data(cfg)
    KERNEL_STATS.reset()
    start = time.perf_counter()
    report = evaluate(net, data)
    report.wall_clock_s = time.perf_counter() - start
    report.kernel_launches = KERNEL_STATS.launches
    body = {**report.to_dict(), "role": net.role}
    if args.report:
        write_json(args.report, _report(cfg, body))
    print(json.dumps({"per_task": body["per_task"], "macro_avg": body["macro_avg"]}))
    return EXIT_OK


def _time_call(fn, repeats: int) -> float:
    fn()
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_wall_clock(T: int, B: int, channels: int, spatial: int, rank: int,
                     repeats: int = 3, seed: int = 0) -> dict:
    """Time one grouped EKS forward against the per-sample reference loop."""
    rng = np.random.default_rng(seed)
    geom = ConvGeometry(channels, channels, 3, padding=1)
    w0 = rng.standard_normal(geom.weight_shape).astype(np.float32)
    experts = [init_lowrank(geom, rank, rng) for _ in range(T)]
    for e in experts:
        e.b[...] = rng.standard_normal(e.b.shape) * 0.02
    layer = EksConvLayer(w0, experts, geom)
    h = rng.standard_normal((B, channels, spatial, spatial)).astype(np.float32)
    m = TaskIndexMatrix.from_labels(np.arange(B) % T, T)

    KERNEL_STATS.reset()
    eks_forward(layer, h, m)
    eks_launches = KERNEL_STATS.launches
    KERNEL_STATS.reset()
    naive_forward(layer, h, m)
    naive_launches = KERNEL_STATS.launches

    eks_s = _time_call(lambda: eks_forward(layer, h, m), repeats)
    naive_s = _time_call(lambda: naive_forward(layer, h, m), repeats)
    return {
        "kernel_launches": {"eks": eks_launches, "naive": naive_launches},
        "timing": {"eks_forward_s": eks_s, "naive_forward_s": naive_s,
                   "speedup": naive_s / eks_s if eks_s > 0 else float("inf")},
    }


def cmd_bench(args) -> int:
    length = args.length if args.length is not None else args.spatial * args.spatial
    analytic = cost_estimate(args.tasks, args.batch, length, args.dim, args.rank)
    body = {
        "args": {"tasks": args.tasks, "batch": args.batch, "rank": args.rank, "dim": args.dim,
                 "length": length, "channels": args.channels, "spatial": args.spatial},
        "analytic": analytic,
        "convention": "conv mapped onto the d x d token model with l = H'*W' and d^2 ~ C_out*C_in*k^2",
    }
    if not args.no_wall_clock:
        wall = bench_wall_clock(args.tasks, args.batch, args.channels, args.spatial, args.rank,
                                args.repeats)
        body["kernel_launches"] = wall["kernel_launches"]
        body["timing"] = wall["timing"]
    body["provenance"] = provenance(args=body["args"])
    if args.report:
        write_json(args.report, body)
    print(json.dumps({"eks_cheaper": analytic["eks_cheaper"], **body.get("timing", {})}))
    return EXIT_OK


def cmd_cka(args) -> int:
    cfg = load_config(args.config)
    net = load_checkpoint(args.model)
    if net.role != "student":
        raise ValidationError("cross-task CKA needs a decomposed student checkpoint")
    _check_same_tasks(cfg, net, "model")
    data = build_data(cfg)
    mat = cross_task_cka(net, probe_images(data, cfg.data.probe_size))
    body = {"cka": mat.tolist(), "mean_off_diagonal": mean_off_diagonal(mat) if mat.shape[0] > 1 else None}
    write_json(args.out, _report(cfg, body))
    print(json.dumps({"mean_off_diagonal": body["mean_off_diagonal"]}))
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lorkd", description="Low-rank knowledge decomposition on synthetic multi-task data.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train-teacher", help="train the unified teacher model")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--report")
    s.set_defaults(func=cmd_train_teacher)

    s = sub.add_parser("warmup", help="train the backbone with experts frozen and log per-task losses")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--log", required=True)
    s.add_argument("--teacher", help="optional teacher for the transfer term")
    s.set_defaults(func=cmd_warmup)

    s = sub.add_parser("plan-ranks", help="allocate per-task ranks from a warmup log")
    s.add_argument("--log", required=True)
    s.add_argument("--base-rank", type=int, default=8)
    s.add_argument("--window", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_plan_ranks)

    s = sub.add_parser("decompose", help="joint training of backbone, experts and heads")
    s.add_argument("--config", required=True)
    s.add_argument("--teacher")
    s.add_argument("--warmup")
    s.add_argument("--ranks")
    s.add_argument("--arm", choices=("lorkd", "mtl"), default="lorkd")
    s.add_argument("--out", required=True)
    s.add_argument("--report")
    s.set_defaults(func=cmd_decompose)

    s = sub.add_parser("fuse", help="merge one task's expert into a standalone model")
    s.add_argument("--model", required=True)
    s.add_argument("--task", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("eval", help="evaluate a checkpoint on the config's evaluation split")
    s.add_argument("--model", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--report")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="analytic cost model and EKS vs per-sample wall clock")
    s.add_argument("--tasks", type=int, default=8)
    s.add_argument("--batch", type=int, default=16)
    s.add_argument("--rank", type=int, default=8)
    s.add_argument("--dim", type=int, default=64)
    s.add_argument("--length", type=int, help="tokens per sample l (default spatial^2)")
    s.add_argument("--channels", type=int, default=32)
    s.add_argument("--spatial", type=int, default=16)
    s.add_argument("--repeats", type=int, default=3)
    s.add_argument("--no-wall-clock", action="store_true")
    s.add_argument("--report")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("cka", help="cross-task CKA of penultimate features")
    s.add_argument("--model", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_cka)
    return p


def _threads() -> int:
    raw = os.environ.get("LORKD_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"LORKD_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValidationError(f"LORKD_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=_threads()):
            return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, LorkdError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
