"""Single-file checkpoint container.

Layout::

    b"LRKD" | u32 LE version (=1) | u64 LE meta_len | meta (UTF-8 JSON) | payload

``meta["tensors"]`` lists ``{name, dtype, shape, byte_offset}`` with offsets
relative to the payload start; the payload is the row-major little-endian
f32 data of every tensor, back to back. ``meta["net"]`` describes the
architecture so the model can be rebuilt without the original config.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .lowrank import LowRankPair
from .network import SEG_SLOTS, ClsNet, ConvLayer, Linear, Net, SegNet, cls_geometries, seg_geometries

MAGIC = b"LRKD"
VERSION = 1
HEADER = struct.Struct("<4sIQ")
F32 = np.dtype("<f4")


def _net_meta(net: Net) -> dict:
    g0 = net.convs[0].geometry
    meta = {
        "mode": net.mode,
        "role": net.role,
        "task_id": net.task_id,
        "in_channels": g0.in_channels,
        "ranks": net.ranks,
    }
    if isinstance(net, ClsNet):
        meta["class_counts"] = net.class_counts
        meta["widths"] = [c.geometry.out_channels for c in net.convs]
        meta["proj_dim"] = None if net.proj is None else int(net.proj.weight.shape[0])
    else:
        meta["mask_counts"] = net.mask_counts
        meta["width"] = g0.out_channels
    return meta


def save_checkpoint(net: Net, path: str | Path, extra: dict | None = None) -> None:
    """Write ``net`` atomically; ``extra`` is stored verbatim in the metadata."""
    tensors, offset = [], 0
    for name, value in net.named_params():
        if value.dtype != np.float32:
            raise CheckpointError(f"tensor {name} has dtype {value.dtype}; checkpoints hold f32 only")
        tensors.append({"name": name, "dtype": "f32", "shape": list(value.shape), "byte_offset": offset})
        offset += value.size * F32.itemsize
    meta = {"tensors": tensors, "net": _net_meta(net), "extra": extra or {}}
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")

    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(HEADER.pack(MAGIC, VERSION, len(blob)))
            fh.write(blob)
            for _, value in net.named_params():
                fh.write(np.ascontiguousarray(value, dtype=F32).tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse and validate a container; returns ``(meta, tensors)``."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if len(data) < HEADER.size:
        raise CheckpointError(f"file is {len(data)} bytes, shorter than the {HEADER.size}-byte header")
    magic, version, meta_len = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r} at byte 0 (expected {MAGIC!r})")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version} at byte 4 (expected {VERSION})")
    start = HEADER.size + meta_len
    if start > len(data):
        raise CheckpointError(f"metadata runs past end of file: needs bytes {HEADER.size}..{start}, file has {len(data)}")
    try:
        meta = json.loads(data[HEADER.size:start].decode("utf-8"))
        entries = meta["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed metadata at byte {HEADER.size}: {exc}") from None

    out: dict[str, np.ndarray] = {}
    expected = 0
    for e in entries:
        name = e.get("name")
        if name in out:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        if e.get("dtype") != "f32":
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {e.get('dtype')!r}")
        shape = tuple(int(s) for s in e["shape"])
        off = int(e["byte_offset"])
        if off != expected:
            raise CheckpointError(
                f"tensor {name!r} offset {off} (file byte {start + off}) is not contiguous; expected {expected}"
            )
        nbytes = math.prod(shape) * F32.itemsize
        end = start + off + nbytes
        if end > len(data):
            raise CheckpointError(
                f"payload truncated: tensor {name!r} needs file bytes {start + off}..{end}, "
                f"file ends at byte {len(data)}"
            )
        out[name] = np.frombuffer(data, dtype=F32, count=math.prod(shape), offset=start + off).reshape(shape).copy()
        expected = off + nbytes
    if start + expected != len(data):
        raise CheckpointError(
            f"payload has {len(data) - start} bytes, tensors account for {expected} (trailing data at byte {start + expected})"
        )
    return meta, out


def _rebuild(meta: dict, tensors: dict[str, np.ndarray]) -> Net:
    def conv(name, geom):
        experts = []
        t = 0
        while f"{name}.expert{t}.B" in tensors:
            b, a = tensors[f"{name}.expert{t}.B"], tensors[f"{name}.expert{t}.A"]
            rank = b.shape[1] // geom.kernel_size
            experts.append(LowRankPair(b=b, a=a, rank=rank, geometry=geom))
            t += 1
        return ConvLayer(name, geom, tensors[f"{name}.w0"], tensors[f"{name}.bias"], experts)

    def linear(name):
        return Linear(name, tensors[f"{name}.weight"], tensors[f"{name}.bias"])

    try:
        if meta["mode"] == "cls":
            geoms = cls_geometries(meta["in_channels"], meta["widths"])
            convs = [conv(f"conv{i}", g) for i, g in enumerate(geoms)]
            n_heads = len(meta["class_counts"]) if meta["role"] == "student" else 1
            heads = [linear(f"head{t}") for t in range(n_heads)]
            proj = linear("proj") if meta.get("proj_dim") else None
            net = ClsNet(meta["role"], convs, heads, proj, meta["class_counts"], meta.get("task_id"))
        elif meta["mode"] == "seg":
            counts = meta["mask_counts"]
            out_ch = sum(counts) if meta["role"] == "teacher" else max(counts)
            geoms = seg_geometries(meta["in_channels"], meta["width"], out_ch)
            convs = [conv(n, g) for n, g in zip(SEG_SLOTS, geoms)]
            net = SegNet(meta["role"], convs, counts, meta.get("task_id"))
        else:
            raise CheckpointError(f"unknown model mode {meta['mode']!r}")
    except KeyError as exc:
        raise CheckpointError(f"checkpoint lacks tensor or field {exc}") from None
    except ValueError as exc:
        raise CheckpointError(f"checkpoint tensors do not fit the recorded architecture: {exc}") from None
    have = {n for n, _ in net.named_params()}
    if have != set(tensors):
        raise CheckpointError(f"unexpected tensors in checkpoint: {sorted(set(tensors) - have)}")
    return net


def load_checkpoint(path: str | Path) -> Net:
    meta, tensors = read_checkpoint(path)
    if "net" not in meta:
        raise CheckpointError("metadata has no architecture record")
    return _rebuild(meta["net"], tensors)


def checkpoint_extra(path: str | Path) -> dict:
    return read_checkpoint(path)[0].get("extra", {})
