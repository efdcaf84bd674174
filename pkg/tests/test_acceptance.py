"""Acceptance gate: one test and one printed PASS/FAIL line per criterion."""

import json
import time
from pathlib import Path

import numpy as np
import pytest

import test_eks
import test_lowrank
import test_network
import test_objectives
import test_tensor
from conftest import random_layer
from lorkd.checkpoint import checkpoint_extra, load_checkpoint, save_checkpoint
from lorkd.cli import main
from lorkd.config import load_config, parse_config
from lorkd.eks import TaskIndexMatrix, eks_backward, eks_forward, naive_forward
from lorkd.lowrank import fuse_weights, plan_ranks
from lorkd.metrics import mean_off_diagonal
from lorkd.network import build_student_cls, build_student_seg, extract_expert
from lorkd.tensor import conv2d_backward
from lorkd import pipeline as P

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def equivalence_case(seed, dtype):
    """T in [1,8], B in [1,16], k in {1,3}, channels <= 8, spatial <= 8."""
    rng = np.random.default_rng(10_000 + seed)
    T, B = int(rng.integers(1, 9)), int(rng.integers(1, 17))
    k = int(rng.choice([1, 3]))
    cin, cout = int(rng.integers(1, 9)), int(rng.integers(1, 9))
    hw = int(rng.integers(k, 9))
    layer = random_layer(rng, T, cin, cout, k, dtype=dtype)
    h = rng.standard_normal((B, cin, hw, hw)).astype(dtype)
    m = TaskIndexMatrix.from_labels(rng.integers(0, T, B), T)
    return rng, layer, h, m


def run_checks(fns):
    """Call each check, returning the failures as (name, message)."""
    failures = []
    for name, fn in fns:
        try:
            fn()
        except AssertionError as exc:
            failures.append((name, str(exc).splitlines()[0] if str(exc) else "assertion failed"))
    return failures


# --------------------------------------------------------------------------- 1


def test_c1_eks_equivalence(verdict):
    start = time.perf_counter()
    worst = {np.float32: 0.0, np.float64: 0.0}
    for dtype in worst:
        for seed in range(100):
            _, layer, h, m = equivalence_case(seed, dtype)
            diff = float(np.abs(eks_forward(layer, h, m) - naive_forward(layer, h, m)).max())
            worst[dtype] = max(worst[dtype], diff)
    elapsed = time.perf_counter() - start
    ok = worst[np.float32] <= 1e-5 and worst[np.float64] <= 1e-10 and elapsed < 60
    verdict("criterion 1 EKS equivalence", ok,
            f"100 configs, max |diff| f32={worst[np.float32]:.2e} f64={worst[np.float64]:.2e}, {elapsed:.1f}s")
    assert ok


# --------------------------------------------------------------------------- 2


def test_c2_gradient_routing(verdict):
    nonzero, worst_rel, worst_abs = 0, 0.0, 0.0
    for seed in range(100):
        rng, layer, h, m = equivalence_case(seed, np.float32)
        g = rng.standard_normal(eks_forward(layer, h, m).shape).astype(np.float32)
        res = eks_backward(layer, h, m, g)
        total = np.zeros_like(layer.w0)
        for t, (gb, ga) in enumerate(res.grad_experts):
            idx = m.members(t)
            if idx.size == 0:
                nonzero += int(np.count_nonzero(gb) + np.count_nonzero(ga))
                continue
            _, gw = conv2d_backward(g[idx], h[idx], fuse_weights(layer.w0, layer.experts[t]), layer.geometry)
            total += gw
        diff = float(np.abs(res.grad_w0 - total).max())
        worst_abs = max(worst_abs, diff)
        # f32 tolerance relative to the gradient's own magnitude
        worst_rel = max(worst_rel, diff / max(1.0, float(np.abs(total).max())))
    ok = nonzero == 0 and worst_rel <= 1e-5
    verdict("criterion 2 gradient routing", ok,
            f"absent-expert nonzeros={nonzero}, grad_w0 vs sub-batch sum: "
            f"scaled err {worst_rel:.2e} (abs {worst_abs:.2e})")
    assert ok


# --------------------------------------------------------------------------- 3


def test_c3_finite_differences(verdict):
    start = time.perf_counter()
    suites = {
        "conv2d": test_tensor.test_backward_matches_finite_differences,
        "eks_backward": test_eks.test_backward_matches_finite_differences,
        "seg losses": test_objectives.test_seg_gradients_match_finite_differences,
        "cls loss": test_objectives.test_cls_gradients_match_finite_differences,
        "8x8 seg net": test_network.test_seg_end_to_end_gradients,
    }
    failures = run_checks(
        (f"{name}[{seed}]", lambda fn=fn, seed=seed: fn(seed))
        for name, fn in suites.items() for seed in range(20)
    )
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 300
    detail = f"{len(suites)} suites x 20 seeds, {elapsed:.1f}s"
    if failures:
        detail += f", failed: {failures[:3]}"
    verdict("criterion 3 finite differences", ok, detail)
    assert ok


# --------------------------------------------------------------------------- 4


def test_c4_fusion(verdict):
    failures = run_checks([
        ("fusion", test_network.test_fusion_equivalence_per_layer_and_counts),
        ("counts", test_network.test_fused_count_is_backbone_plus_own_head),
    ])
    # closed form from geometry alone: conv weights and biases plus the task head
    mismatches = 0
    for seed in range(10):
        net = build_student_cls(3, [3, 5, 2], 8, seed, ranks=[2, 4, 6])
        chans = [1, 8, 16, 32, 32]
        backbone = sum(9 * a * b + b for a, b in zip(chans, chans[1:]))
        for t, k in enumerate(net.class_counts):
            mismatches += extract_expert(net, t).param_count() != backbone + 32 * k + k
        seg = build_student_seg(2, [2, 3], 4, seed, ranks=[2, 2])
        mismatches += any(extract_expert(seg, t).param_count() != seg.backbone_param_count() for t in range(2))
    ok = not failures and mismatches == 0
    verdict("criterion 4 fusion", ok,
            f"10 cls + 10 seg nets, all tasks, tol 1e-5; closed-form mismatches={mismatches}"
            + (f", failed: {failures}" if failures else ""))
    assert ok


# --------------------------------------------------------------------------- 5


def test_c5_rank_planner(verdict):
    cases = {(1, 1, 1): [8, 8, 8], (2, 1): [14, 4], (0, 2): [2, 32]}
    got = {dl: plan_ranks(list(dl), 8).ranks for dl in cases}
    failures = run_checks([
        ("permutation", test_lowrank.test_plan_matches_oracle_and_is_permutation_equivariant),
        ("scale", test_lowrank.test_plan_scale_invariant),
    ])
    ok = got == cases and not failures
    verdict("criterion 5 rank planner", ok,
            f"{ {str(list(k)): v for k, v in got.items()} }; properties "
            + ("hold" if not failures else f"failed {failures}"))
    assert ok


# --------------------------------------------------------------------------- 6


def flop_oracle(T, b, l, d, r):
    """Count multiply-adds of each matmul the two schemes issue, 2 flops each."""
    mm = lambda m, k, n: 2 * m * k * n
    # early fusion: T deltas B_t @ A_t of shape (d, r) @ (r, d), then one dense pass
    eks = sum(mm(d, r, d) for _ in range(T)) + mm(b * l, d, d)
    # per-sample adapters: the dense pass is repeated once per rank component
    adapter = sum(mm(b * l, d, d) for _ in range(r))
    return eks, adapter


def test_c6_cost_model(verdict, tmp_path, capsys):
    rng = np.random.default_rng(6)
    grid = [(8, 4, 16, 8), (1, 1, 1, 1), (8, 1, 1, 8), (2, 1, 2, 2)]
    while len(grid) < 50:
        grid.append(tuple(int(v) for v in (rng.integers(1, 17), rng.integers(1, 33),
                                            rng.integers(1, 65), rng.integers(1, 17))))
    d = 64
    mismatches, outcomes = [], set()
    for T, b, l, r in grid:
        capsys.readouterr()
        code = main(["bench", "--tasks", str(T), "--batch", str(b), "--length", str(l), "--rank", str(r),
                     "--dim", str(d), "--no-wall-clock", "--report", str(tmp_path / "b.json")])
        printed = json.loads(capsys.readouterr().out)
        body = json.loads((tmp_path / "b.json").read_text())
        eks, adapter = flop_oracle(T, b, l, d, r)
        want = eks <= adapter
        outcomes.add(want)
        if (code != 0 or printed["eks_cheaper"] != want or body["analytic"]["eks_flops"] != eks
                or body["analytic"]["adapter_flops"] != adapter):
            mismatches.append((T, b, l, r))
    hard = not mismatches and outcomes == {True, False}
    verdict("criterion 6 cost model (analytic, hard)", hard,
            f"50 grid points vs flop-count oracle, mismatches={mismatches}")

    code = main(["bench", "--tasks", "8", "--batch", "16", "--rank", "8", "--channels", "32",
                 "--spatial", "16", "--repeats", "5", "--report", str(tmp_path / "wall.json")])
    timing = json.loads((tmp_path / "wall.json").read_text())["timing"]
    soft = code == 0 and timing["speedup"] >= 1.5
    verdict("criterion 6 wall clock (soft, reported only)", soft,
            f"eks {timing['eks_forward_s'] * 1e3:.2f} ms vs naive {timing['naive_forward_s'] * 1e3:.2f} ms, "
            f"speedup {timing['speedup']:.2f}x (target 1.5x)")
    assert hard and code == 0


# --------------------------------------------------------------------------- 7 and 8


@pytest.fixture(scope="module")
def toy_runs():
    """Teacher, LoRKD and expert-free MTL arms on the conflict-heavy toy, seeds 0-2."""
    base = load_config(CONFIGS / "toy_cls.json").resolved()
    start = time.perf_counter()
    runs = []
    for seed in range(3):
        raw = json.loads(json.dumps(base))
        raw["train"]["seed"] = seed
        cfg = parse_config(raw)
        data = P.build_data(cfg)
        teacher = P.train_teacher(cfg, P.build_teacher_for(cfg), data)
        probes = P.probe_images(data, cfg.data.probe_size)

        student = P.build_student(cfg)
        wlog = P.run_warmup(cfg, student, data)
        P.apply_ranks(student, P.plan_from_log(cfg, wlog).ranks, cfg.train.seed)
        student, lorkd = P.run_decomposition(cfg, student, teacher, data)

        mtl_cfg = cfg.model_copy(deep=True)
        mtl_cfg.train.train_steps = cfg.train.train_steps + cfg.train.warmup_steps
        mtl_net, mtl = P.run_decomposition(mtl_cfg, P.build_student(cfg), teacher, data, train_experts=False)

        runs.append({
            "lorkd": lorkd.per_task, "mtl": mtl.per_task,
            "cka_lorkd": mean_off_diagonal(P.cross_task_cka(student, probes)),
            "cka_mtl": mean_off_diagonal(P.cross_task_cka(mtl_net, probes)),
        })
    return runs, time.perf_counter() - start


def test_c7_toy_decomposition(verdict, toy_runs):
    runs, elapsed = toy_runs
    T = len(runs[0]["lorkd"])
    lorkd = np.array([[r["lorkd"][t] for t in range(T)] for r in runs]).mean(axis=0)
    mtl = np.array([[r["mtl"][t] for t in range(T)] for r in runs]).mean(axis=0)
    wins = int(np.sum(lorkd > mtl))
    margin = 100 * (lorkd.mean() - mtl.mean())
    ok = wins >= 3 and margin >= 2.0 and elapsed < 900
    per_seed = [int(sum(r["lorkd"][t] > r["mtl"][t] for t in range(T))) for r in runs]
    verdict("criterion 7 toy decomposition", ok,
            f"seed-mean acc LoRKD {np.round(lorkd, 3).tolist()} vs MTL {np.round(mtl, 3).tolist()}, "
            f"wins {wins}/{T} (per seed {per_seed}), macro +{margin:.1f} pts, {elapsed:.0f}s for 3 seeds")
    assert ok


def test_c8_cka_directionality(verdict, toy_runs):
    runs, _ = toy_runs
    pairs = [(r["cka_lorkd"], r["cka_mtl"]) for r in runs]
    ok = all(a < b for a, b in pairs)
    verdict("criterion 8 CKA directionality", ok,
            "per seed LoRKD vs MTL " + ", ".join(f"{a:.3f} < {b:.3f}" for a, b in pairs))
    assert ok


# --------------------------------------------------------------------------- 9


def test_c9_freeze_and_determinism(verdict, tmp_path):
    cfg = load_config(CONFIGS / "smoke_cls.json")
    data = P.build_data(cfg)
    net = P.build_student(cfg)
    names = net.expert_names()
    before = b"".join(net.params()[n].tobytes() for n in names)
    P.run_warmup(cfg, net, data)
    frozen = before == b"".join(net.params()[n].tobytes() for n in names)

    smoke = str(CONFIGS / "smoke_cls.json")
    digests = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        codes = [
            main(["train-teacher", "--config", smoke, "--out", str(d / "T.ckpt")]),
            main(["warmup", "--config", smoke, "--out", str(d / "W.ckpt"), "--log", str(d / "w.json")]),
            main(["decompose", "--config", smoke, "--teacher", str(d / "T.ckpt"), "--warmup", str(d / "W.ckpt"),
                  "--out", str(d / "M.ckpt")]),
        ]
        assert codes == [0, 0, 0]
        digests.append([(d / f).read_bytes() for f in ("T.ckpt", "W.ckpt", "M.ckpt")])
    identical = digests[0] == digests[1]

    model = load_checkpoint(tmp_path / "a" / "M.ckpt")
    save_checkpoint(model, tmp_path / "again.ckpt", checkpoint_extra(tmp_path / "a" / "M.ckpt"))
    round_trip = (tmp_path / "again.ckpt").read_bytes() == digests[0][2]
    x = data.eval[0].images[:8]
    tasks = np.arange(8) % cfg.train.task_count
    reloaded = load_checkpoint(tmp_path / "again.ckpt")
    exact = model.forward(x, tasks)["logits"].tobytes() == reloaded.forward(x, tasks)["logits"].tobytes()

    ok = frozen and identical and round_trip and exact
    verdict("criterion 9 freeze and determinism", ok,
            f"experts frozen={frozen}, repeat runs bit-identical={identical}, "
            f"round trip bytes={round_trip}, forward exact={exact}")
    assert ok


# --------------------------------------------------------------------------- 10


def minimal_config(mode, **train):
    kind, k = ("pattern_cls", 3) if mode == "cls" else ("shape_seg", 2)
    tr = {"mode": mode, "task_count": 2, "train_steps": 4, "teacher_steps": 2, "batch_size": 4}
    tr.update(train)
    return {
        "train": tr,
        "architecture": {"width": 12, "teacher_widths": [8, 8, 16, 16] if mode == "cls" else [8]},
        "tasks": [{"task_id": t, "kind": kind, "num_outputs": k, "image_size": 16 if mode == "seg" else 32}
                  for t in range(2)],
        "data": {"train_size": 8, "eval_size": 4, "probe_size": 4},
    }


def decompose(tmp_path, name, raw):
    cfg_path = tmp_path / f"{name}.json"
    cfg_path.write_text(json.dumps(raw))
    assert main(["train-teacher", "--config", str(cfg_path), "--out", str(tmp_path / f"{name}.T")]) == 0
    assert main(["decompose", "--config", str(cfg_path), "--teacher", str(tmp_path / f"{name}.T"),
                 "--out", str(tmp_path / f"{name}.M"), "--report", str(tmp_path / f"{name}.r.json")]) == 0
    return (tmp_path / f"{name}.M").read_bytes(), json.loads((tmp_path / f"{name}.r.json").read_text())


def test_c10_loss_defaults(verdict, tmp_path):
    checks = {}
    for mode, beta, other in (("seg", 0.1, 0.2), ("cls", 1.0, 0.5)):
        default_ckpt, report = decompose(tmp_path, f"{mode}_default", minimal_config(mode))
        explicit_ckpt, _ = decompose(tmp_path, f"{mode}_explicit", minimal_config(mode, beta=beta))
        other_ckpt, _ = decompose(tmp_path, f"{mode}_other", minimal_config(mode, beta=other))
        echoed = report["config"]["train"]
        checks[mode] = {
            "echo_beta": echoed["beta"] == beta,
            "echo_rank": echoed["base_rank"] == 8 and report["ranks"] == [8, 8],
            "beta_used": default_ckpt == explicit_ckpt and default_ckpt != other_ckpt,
            "provenance": set(report["provenance"]) == {"config_hash", "seed", "versions"},
        }
    ok = all(all(v.values()) for v in checks.values())
    verdict("criterion 10 loss defaults", ok,
            "seg beta=0.1, cls beta=1, base rank 8 applied and echoed: "
            + ", ".join(f"{m} {'ok' if all(v.values()) else v}" for m, v in checks.items()))
    assert ok
