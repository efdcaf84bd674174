import numpy as np
import pytest

from lorkd.eks import EksConvLayer
from lorkd.lowrank import init_lowrank
from lorkd.tensor import ConvGeometry


def rel_err(got, want) -> float:
    got, want = np.asarray(got, dtype=np.float64), np.asarray(want, dtype=np.float64)
    return float(np.linalg.norm(got - want) / max(np.linalg.norm(want), 1e-12))


def random_layer(rng, T, cin, cout, k, dtype=np.float64, bias=True, stride=1, padding=None,
                 ranks=None):
    """EKS layer with every expert active (random non-zero B)."""
    geom = ConvGeometry(cin, cout, k, stride=stride, padding=k // 2 if padding is None else padding)
    w0 = rng.standard_normal(geom.weight_shape).astype(dtype)
    experts = []
    for t in range(T):
        r = ranks[t] if ranks else int(rng.integers(2, 5))
        e = init_lowrank(geom, r, rng, dtype=dtype)
        e.b[...] = rng.standard_normal(e.b.shape) * 0.3
        e.a[...] = rng.standard_normal(e.a.shape) * 0.3
        experts.append(e)
    b = rng.standard_normal(cout).astype(dtype) if bias else None
    return EksConvLayer(w0, experts, geom, b)


def activate_experts(net, rng, scale=0.05):
    for conv in net.convs:
        for e in conv.experts:
            e.b[...] = (rng.standard_normal(e.b.shape) * scale).astype(e.b.dtype)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --------------------------------------------------------------------------- acceptance verdicts

VERDICTS: list[str] = []


@pytest.fixture
def verdict(capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def emit(label: str, ok: bool, detail: str = "") -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] {label}" + (f": {detail}" if detail else "")
        VERDICTS.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
