"""Decomposed student networks, plain teachers, and per-task expert extraction.

Every convolution slot of a student is an EKS layer carrying one low-rank
expert per task. There is no normalization layer: batch statistics would
couple samples of different tasks and break exact routing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .eks import EksConvLayer, TaskIndexMatrix, aggregate_weights, eks_backward, eks_forward
from .errors import ShapeError, ValidationError
from .lowrank import (
    LowRankPair,
    check_lowrank_budget,
    expert_param_count,
    fuse_weights,
    init_lowrank,
)
from .tensor import ConvGeometry, conv2d, conv2d_backward

DEFAULT_RANK = 8
HEAD_INIT_STD = 0.01


class ConvLayer:
    """A convolution with bias; with experts attached it runs as an EKS layer."""

    def __init__(self, name: str, geometry: ConvGeometry, w0: np.ndarray,
                 bias: np.ndarray, experts: list[LowRankPair] | None = None):
        self.name = name
        self.eks = EksConvLayer(w0=w0, experts=list(experts or []), geometry=geometry, bias=bias)

    @property
    def geometry(self) -> ConvGeometry:
        return self.eks.geometry

    @property
    def experts(self) -> list[LowRankPair]:
        return self.eks.experts

    def named_params(self) -> Iterator[tuple[str, np.ndarray]]:
        yield f"{self.name}.w0", self.eks.w0
        yield f"{self.name}.bias", self.eks.bias
        for t, e in enumerate(self.eks.experts):
            yield f"{self.name}.expert{t}.B", e.b
            yield f"{self.name}.expert{t}.A", e.a

    def set_param(self, key: str, value: np.ndarray) -> None:
        if key == "w0":
            self.eks.w0 = value
        elif key == "bias":
            self.eks.bias = value
        else:
            expert, factor = key.split(".")
            pair = self.eks.experts[int(expert[len("expert"):])]
            if factor == "B":
                pair.b = value
            else:
                pair.a = value

    def _routed(self, m: TaskIndexMatrix | None, train_experts: bool) -> bool:
        if not self.eks.experts or m is None:
            return False
        if train_experts:
            return True
        return any(np.any(self.eks.experts[t].b) for t in np.unique(m.labels))

    def forward(self, x: np.ndarray, m: TaskIndexMatrix | None, train_experts: bool):
        if self._routed(m, train_experts):
            weights = aggregate_weights(self.eks, m)
            out = eks_forward(self.eks, x, m, weights=weights)
            return out, (x, m, weights)
        out = conv2d(x, self.eks.w0, self.geometry) + self.eks.bias[None, :, None, None]
        return out, (x, None, None)

    def backward(self, grad: np.ndarray, cache, grads: dict, train_experts: bool,
                 need_input_grad: bool = True) -> np.ndarray | None:
        x, m, weights = cache
        if m is None:
            gx, gw = conv2d_backward(grad, x, self.eks.w0, self.geometry, need_input_grad)
            grads[f"{self.name}.w0"] = gw
            grads[f"{self.name}.bias"] = grad.sum(axis=(0, 2, 3))
            return gx
        res = eks_backward(self.eks, x, m, grad, weights=weights,
                           need_input_grad=need_input_grad, need_expert_grads=train_experts)
        grads[f"{self.name}.w0"] = res.grad_w0
        grads[f"{self.name}.bias"] = res.grad_bias
        if train_experts:
            for t, (gb, ga) in enumerate(res.grad_experts):
                grads[f"{self.name}.expert{t}.B"] = gb
                grads[f"{self.name}.expert{t}.A"] = ga
        return res.grad_h

    def fused(self, task: int) -> "ConvLayer":
        w = fuse_weights(self.eks.w0, self.eks.experts[task]) if self.eks.experts else self.eks.w0.copy()
        return ConvLayer(self.name, self.geometry, w, self.eks.bias.copy())


@dataclass
class Linear:
    name: str
    weight: np.ndarray
    bias: np.ndarray

    def named_params(self) -> Iterator[tuple[str, np.ndarray]]:
        yield f"{self.name}.weight", self.weight
        yield f"{self.name}.bias", self.bias

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weight.T + self.bias

    def backward(self, grad: np.ndarray, x: np.ndarray, grads: dict) -> np.ndarray:
        grads[f"{self.name}.weight"] = grad.T @ x
        grads[f"{self.name}.bias"] = grad.sum(axis=0)
        return grad @ self.weight


def _relu_backward(grad: np.ndarray, out: np.ndarray) -> np.ndarray:
    return grad * (out > 0)


def _upsample2(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=2).repeat(2, axis=3)


def _upsample2_backward(g: np.ndarray) -> np.ndarray:
    b, c, h, w = g.shape
    return g.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class Net:
    """Shared plumbing: parameter registry, counting, routing matrices."""

    mode: str
    role: str  # "student", "teacher" or "fused"
    task_count: int
    convs: list[ConvLayer]

    def linears(self) -> list[Linear]:
        return []

    def named_params(self) -> Iterator[tuple[str, np.ndarray]]:
        for c in self.convs:
            yield from c.named_params()
        for lin in self.linears():
            yield from lin.named_params()

    def params(self) -> dict[str, np.ndarray]:
        return dict(self.named_params())

    def set_params(self, values: dict[str, np.ndarray]) -> None:
        convs = {c.name: c for c in self.convs}
        lins = {lin.name: lin for lin in self.linears()}
        for name, value in values.items():
            owner, _, key = name.partition(".")
            if owner in convs:
                convs[owner].set_param(key, value)
            elif owner in lins:
                setattr(lins[owner], key, value)
            else:
                raise KeyError(name)

    def param_count(self) -> int:
        return sum(v.size for _, v in self.named_params())

    def backbone_param_count(self) -> int:
        return sum(c.eks.w0.size + c.eks.bias.size for c in self.convs)

    def expert_names(self) -> list[str]:
        return [n for n, _ in self.named_params() if ".expert" in n]

    @property
    def ranks(self) -> list[int]:
        if not self.convs or not self.convs[0].experts:
            return []
        return [e.rank for e in self.convs[0].experts]

    @property
    def dtype(self):
        return self.convs[0].eks.w0.dtype

    def task_matrix(self, task_labels) -> TaskIndexMatrix | None:
        if self.role != "student" or task_labels is None:
            return None
        return TaskIndexMatrix.from_labels(task_labels, self.task_count)

    def eks_geometries(self) -> list[ConvGeometry]:
        return [c.geometry for c in self.convs]


def _init_conv(rng: np.random.Generator, name: str, geom: ConvGeometry, dtype,
               ranks: Sequence[int] | None) -> ConvLayer:
    fan_in = geom.in_channels * geom.kernel_size ** 2
    w0 = (rng.standard_normal(geom.weight_shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    bias = np.zeros(geom.out_channels, dtype=dtype)
    experts = [init_lowrank(geom, r, rng, dtype=dtype) for r in (ranks or [])]
    return ConvLayer(name, geom, w0, bias, experts)


def _init_linear(rng: np.random.Generator, name: str, out_dim: int, in_dim: int, dtype,
                 std: float = HEAD_INIT_STD) -> Linear:
    w = (rng.standard_normal((out_dim, in_dim)) * std).astype(dtype)
    return Linear(name, w, np.zeros(out_dim, dtype=dtype))


def _resolve_ranks(task_count: int, ranks) -> list[int]:
    if ranks is None:
        ranks = DEFAULT_RANK
    if isinstance(ranks, int):
        ranks = [ranks] * task_count
    ranks = [int(r) for r in ranks]
    if len(ranks) != task_count:
        raise ValidationError(f"{len(ranks)} ranks given for {task_count} tasks")
    return ranks


# --------------------------------------------------------------------------- classification


class ClsNet(Net):
    """Conv stack + ReLU + global average pool + classification head(s).

    Students carry one head per task and an optional projection of the pooled
    feature to the teacher's feature width; teachers have one unified head
    over every class of every task; fused models keep a single task head.
    """

    mode = "cls"

    def __init__(self, role: str, convs: list[ConvLayer], heads: list[Linear],
                 proj: Linear | None, class_counts: Sequence[int], task_id: int | None = None):
        self.role = role
        self.convs = convs
        self.heads = heads
        self.proj = proj
        self.class_counts = list(class_counts)
        self.task_count = len(self.class_counts)
        self.task_id = task_id

    def linears(self) -> list[Linear]:
        return self.heads + ([self.proj] if self.proj is not None else [])

    @property
    def feature_dim(self) -> int:
        return self.convs[-1].geometry.out_channels

    def head_param_count(self) -> int:
        return sum(v.size for lin in self.heads for _, v in lin.named_params())

    def forward(self, x: np.ndarray, task_labels=None, train_experts: bool = False) -> dict:
        m = self.task_matrix(task_labels)
        if self.role == "student" and m is None:
            raise ValidationError("student forward needs task labels")
        h = x
        caches, acts = [], []
        for conv in self.convs:
            z, c = conv.forward(h, m, train_experts)
            h = np.maximum(z, 0)
            caches.append(c)
            acts.append(h)
        feat = h.mean(axis=(2, 3))

        if self.role == "student":
            labels = m.labels
            ymax = max(self.class_counts)
            logits = np.zeros((x.shape[0], ymax), dtype=feat.dtype)
            valid = np.zeros((x.shape[0], ymax), dtype=bool)
            for t, head in enumerate(self.heads):
                idx = m.members(t)
                if idx.size:
                    logits[idx, : self.class_counts[t]] = head(feat[idx])
                    valid[idx, : self.class_counts[t]] = True
        else:
            labels = None
            logits = self.heads[0](feat)
            valid = np.ones(logits.shape, dtype=bool)
        proj = self.proj(feat) if self.proj is not None else None
        return {
            "logits": logits, "valid": valid, "features": feat, "projected": proj,
            "activations": acts,
            "_cache": (caches, acts, feat, labels, train_experts),
        }

    def backward(self, out: dict, grad_logits: np.ndarray,
                 grad_projected: np.ndarray | None = None) -> dict:
        caches, acts, feat, labels, train_experts = out["_cache"]
        grads: dict = {}
        if self.role == "student":
            gfeat = np.zeros_like(feat)
            for t, head in enumerate(self.heads):
                idx = np.flatnonzero(labels == t)
                g = grad_logits[idx, : self.class_counts[t]]
                gfeat[idx] = head.backward(g, feat[idx], grads)
        else:
            gfeat = self.heads[0].backward(grad_logits, feat, grads)
        if grad_projected is not None and self.proj is not None:
            gfeat = gfeat + self.proj.backward(grad_projected, feat, grads)
        elif self.proj is not None:
            grads[f"{self.proj.name}.weight"] = np.zeros_like(self.proj.weight)
            grads[f"{self.proj.name}.bias"] = np.zeros_like(self.proj.bias)

        hh, ww = acts[-1].shape[2:]
        g = np.broadcast_to(gfeat[:, :, None, None] / (hh * ww), acts[-1].shape)
        for i in reversed(range(len(self.convs))):
            g = _relu_backward(g, acts[i])
            g = self.convs[i].backward(g, caches[i], grads, train_experts, need_input_grad=i > 0)
        return grads


def cls_geometries(in_channels: int, widths: Sequence[int]) -> list[ConvGeometry]:
    """3x3 blocks; the first and third blocks downsample by two."""
    geoms = []
    cin = in_channels
    for i, w in enumerate(widths):
        stride = 2 if i % 2 == 0 else 1
        geoms.append(ConvGeometry(cin, w, 3, stride=stride, padding=1))
        cin = w
    return geoms


def build_student_cls(task_count: int, class_counts: Sequence[int], width: int, seed: int,
                      ranks=None, teacher_feature_dim: int | None = None,
                      in_channels: int = 1, dtype=np.float32) -> ClsNet:
    if task_count < 1:
        raise ValidationError(f"task count must be >= 1, got {task_count}")
    if len(class_counts) != task_count:
        raise ValidationError(f"{len(class_counts)} class counts for {task_count} tasks")
    if any(c < 2 for c in class_counts):
        raise ValidationError("every task needs at least 2 classes")
    if width < 4:
        raise ValidationError(f"width must be >= 4, got {width}")
    ranks = _resolve_ranks(task_count, ranks)
    geoms = cls_geometries(in_channels, [width, 2 * width, 4 * width, 4 * width])
    check_lowrank_budget(geoms, ranks)
    rng = np.random.default_rng(seed)
    convs = [_init_conv(rng, f"conv{i}", g, dtype, ranks) for i, g in enumerate(geoms)]
    feat = geoms[-1].out_channels
    heads = [_init_linear(rng, f"head{t}", c, feat, dtype) for t, c in enumerate(class_counts)]
    proj = None
    if teacher_feature_dim is not None:
        proj = _init_linear(rng, "proj", teacher_feature_dim, feat, dtype,
                            std=np.sqrt(1.0 / feat))
    return ClsNet("student", convs, heads, proj, class_counts)


def build_teacher_cls(class_counts: Sequence[int], widths: Sequence[int], seed: int,
                      in_channels: int = 1, dtype=np.float32) -> ClsNet:
    if not widths or any(w < 1 for w in widths):
        raise ValidationError(f"invalid teacher widths {list(widths)}")
    rng = np.random.default_rng(seed)
    geoms = cls_geometries(in_channels, widths)
    convs = [_init_conv(rng, f"conv{i}", g, dtype, None) for i, g in enumerate(geoms)]
    head = _init_linear(rng, "head0", sum(class_counts), geoms[-1].out_channels, dtype)
    return ClsNet("teacher", convs, [head], None, class_counts)


# --------------------------------------------------------------------------- segmentation

SEG_SLOTS = ("enc1", "down1", "enc2", "down2", "mid", "dec2", "dec1", "out")


def seg_geometries(in_channels: int, width: int, out_channels: int) -> list[ConvGeometry]:
    w = width
    return [
        ConvGeometry(in_channels, w, 3, 1, 1),        # enc1
        ConvGeometry(w, 2 * w, 3, 2, 1),              # down1
        ConvGeometry(2 * w, 2 * w, 3, 1, 1),          # enc2
        ConvGeometry(2 * w, 4 * w, 3, 2, 1),          # down2
        ConvGeometry(4 * w, 4 * w, 3, 1, 1),          # mid
        ConvGeometry(4 * w + 2 * w, 2 * w, 3, 1, 1),  # dec2 on [up(mid), enc2]
        ConvGeometry(2 * w + w, w, 3, 1, 1),          # dec1 on [up(dec2), enc1]
        ConvGeometry(w, out_channels, 1, 1, 0),       # out
    ]


class SegNet(Net):
    """Two-level encoder-decoder with skip connections and sigmoid mask outputs.

    The decoder is shared; the final 1x1 layer emits ``max(K_t)`` channels for
    students (task ``t`` reads its first ``K_t``) and ``sum(K_t)`` for teachers
    (task ``t`` reads its own slice).
    """

    mode = "seg"

    def __init__(self, role: str, convs: list[ConvLayer], mask_counts: Sequence[int],
                 task_id: int | None = None):
        self.role = role
        self.convs = convs
        self.mask_counts = list(mask_counts)
        self.task_count = len(self.mask_counts)
        self.task_id = task_id

    def head_param_count(self) -> int:
        return 0

    def channel_slice(self, task: int) -> slice:
        if self.role == "teacher":
            off = sum(self.mask_counts[:task])
            return slice(off, off + self.mask_counts[task])
        return slice(0, self.mask_counts[task])

    def forward(self, x: np.ndarray, task_labels=None, train_experts: bool = False) -> dict:
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ShapeError(f"segmentation input spatial size must be divisible by 4, got {x.shape[2:]}")
        m = self.task_matrix(task_labels)
        if self.role == "student" and m is None:
            raise ValidationError("student forward needs task labels")
        L = dict(zip(SEG_SLOTS, self.convs))
        caches, acts = {}, {}

        def block(name, inp, relu=True):
            z, caches[name] = L[name].forward(inp, m, train_experts)
            acts[name] = np.maximum(z, 0) if relu else z
            return acts[name]

        e1 = block("enc1", x)
        d1 = block("down1", e1)
        e2 = block("enc2", d1)
        d2 = block("down2", e2)
        mid = block("mid", d2)
        c2 = np.concatenate([_upsample2(mid), e2], axis=1)
        u2 = block("dec2", c2)
        c1 = np.concatenate([_upsample2(u2), e1], axis=1)
        u1 = block("dec1", c1)
        z = block("out", u1, relu=False)
        probs = _sigmoid(z)
        return {"probs": probs, "activations": [acts[n] for n in SEG_SLOTS],
                "features": u1.mean(axis=(2, 3)),
                "_cache": (caches, acts, probs, train_experts)}

    def backward(self, out: dict, grad_probs: np.ndarray) -> dict:
        caches, acts, probs, train_experts = out["_cache"]
        L = dict(zip(SEG_SLOTS, self.convs))
        grads: dict = {}
        w = L["enc1"].geometry.out_channels

        def back(name, g, relu=True, need_input=True):
            if relu:
                g = _relu_backward(g, acts[name])
            return L[name].backward(g, caches[name], grads, train_experts, need_input)

        g = back("out", grad_probs * probs * (1.0 - probs), relu=False)
        g = back("dec1", g)
        g_e1 = g[:, 2 * w:]
        g = back("dec2", _upsample2_backward(g[:, : 2 * w]))
        g_e2 = g[:, 4 * w:]
        g = back("mid", _upsample2_backward(g[:, : 4 * w]))
        g = back("down2", g) + g_e2
        g = back("enc2", g)
        g = back("down1", g) + g_e1
        back("enc1", g, need_input=False)
        return grads


def build_student_seg(task_count: int, mask_counts: Sequence[int], width: int, seed: int,
                      ranks=None, in_channels: int = 1, dtype=np.float32) -> SegNet:
    if task_count < 1:
        raise ValidationError(f"task count must be >= 1, got {task_count}")
    if len(mask_counts) != task_count or any(k < 1 for k in mask_counts):
        raise ValidationError(f"invalid mask counts {list(mask_counts)} for {task_count} tasks")
    if width < 4:
        raise ValidationError(f"width must be >= 4, got {width}")
    ranks = _resolve_ranks(task_count, ranks)
    geoms = seg_geometries(in_channels, width, max(mask_counts))
    check_lowrank_budget(geoms, ranks)
    rng = np.random.default_rng(seed)
    convs = [_init_conv(rng, n, g, dtype, ranks) for n, g in zip(SEG_SLOTS, geoms)]
    return SegNet("student", convs, mask_counts)


def build_teacher_seg(mask_counts: Sequence[int], width: int, seed: int,
                      in_channels: int = 1, dtype=np.float32) -> SegNet:
    if width < 1:
        raise ValidationError(f"invalid teacher width {width}")
    rng = np.random.default_rng(seed)
    geoms = seg_geometries(in_channels, width, sum(mask_counts))
    convs = [_init_conv(rng, n, g, dtype, None) for n, g in zip(SEG_SLOTS, geoms)]
    return SegNet("teacher", convs, mask_counts)


def build_teacher(kind: str, task_sizes: Sequence[int], widths, seed: int,
                  in_channels: int = 1, dtype=np.float32) -> Net:
    """``widths`` is a list of four block widths (cls) or the base width (seg)."""
    if kind == "cls":
        return build_teacher_cls(task_sizes, widths, seed, in_channels, dtype)
    if kind == "seg":
        width = widths if isinstance(widths, int) else int(widths[0])
        return build_teacher_seg(task_sizes, width, seed, in_channels, dtype)
    raise ValidationError(f"unknown teacher kind {kind!r}")


# --------------------------------------------------------------------------- routing & fusion


def forward_decomposed(net: Net, x: np.ndarray, task_matrix: TaskIndexMatrix,
                       train_experts: bool = False) -> dict:
    if task_matrix.task_count != net.task_count:
        raise ValidationError(
            f"task matrix has {task_matrix.task_count} tasks, net has {net.task_count}"
        )
    return net.forward(x, task_matrix.labels, train_experts=train_experts)


def extract_expert(net: Net, task_id: int) -> Net:
    """Standalone model for one task: experts merged into the backbone, others dropped."""
    if net.role != "student":
        raise ValidationError("only decomposed students carry experts to extract")
    if not 0 <= task_id < net.task_count:
        raise ValidationError(f"task {task_id} out of range [0, {net.task_count})")
    convs = [c.fused(task_id) for c in net.convs]
    if isinstance(net, ClsNet):
        head = net.heads[task_id]
        head = Linear("head0", head.weight.copy(), head.bias.copy())
        return ClsNet("fused", convs, [head], None, [net.class_counts[task_id]], task_id=task_id)
    return SegNet("fused", convs, [net.mask_counts[task_id]], task_id=task_id)


def expected_param_counts(net: Net) -> dict:
    """Closed-form parameter accounting from layer geometries and head sizes alone."""
    backbone = sum(
        g.out_channels * (g.in_channels // g.groups) * g.kernel_size ** 2 + g.out_channels
        for g in net.eks_geometries()
    )
    experts = sum(expert_param_count(g, r) for g in net.eks_geometries() for r in net.ranks)
    heads, proj, fused = 0, 0, [backbone] * net.task_count
    if isinstance(net, ClsNet):
        d = net.feature_dim
        outs = net.class_counts if net.role != "teacher" else [sum(net.class_counts)]
        heads = sum((d + 1) * c for c in outs)
        if net.proj is not None:
            proj = (d + 1) * net.proj.weight.shape[0]
        fused = [backbone + (d + 1) * c for c in net.class_counts]
    return {"backbone": backbone, "experts": experts, "heads": heads, "proj": proj,
            "train": backbone + experts + heads + proj, "fused": fused}
