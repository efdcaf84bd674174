import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lorkd.eks import (
    EksConvLayer,
    TaskIndexMatrix,
    aggregate_weights,
    cost_estimate,
    eks_backward,
    eks_forward,
    naive_backward,
    naive_forward,
)
from lorkd.errors import ValidationError
from lorkd.lowrank import LowRankPair, fuse_weights, init_lowrank
from lorkd.tensor import KERNEL_STATS, ConvGeometry, conv2d, conv2d_backward, finite_diff_grad

from conftest import random_layer, rel_err

G1 = ConvGeometry(1, 1, 1)


def scalar_layer():
    # deltas +0.5 and -0.5 on w0 = 1
    experts = [LowRankPair(np.array([[0.5]]), np.array([[1.0]]), 1, G1),
               LowRankPair(np.array([[-0.5]]), np.array([[1.0]]), 1, G1)]
    return EksConvLayer(np.array([[[[1.0]]]]), experts, G1)


def test_scalar_example():
    layer = scalar_layer()
    m = TaskIndexMatrix(np.array([[1, 0], [0, 1]]))
    np.testing.assert_array_equal(aggregate_weights(layer, m).ravel(), [1.5, 0.5])
    h = np.array([2.0, 4.0]).reshape(2, 1, 1, 1)
    np.testing.assert_array_equal(eks_forward(layer, h, m).ravel(), [3.0, 2.0])
    np.testing.assert_array_equal(naive_forward(layer, h, m).ravel(), [3.0, 2.0])


def test_task_matrix_validation():
    for bad in ([[1, 1]], [[0, 0]], [[2, 0]], [1, 0]):
        with pytest.raises(ValidationError):
            TaskIndexMatrix(np.array(bad))
    with pytest.raises(ValidationError):
        TaskIndexMatrix.from_labels([0, 3], 3)
    m = TaskIndexMatrix.from_labels([2, 0, 2], 3)
    assert list(m.members(2)) == [0, 2] and m.batch_size == 3 and m.task_count == 3


def test_inert_experts_reduce_to_plain_conv():
    rng = np.random.default_rng(0)
    geom = ConvGeometry(3, 4, 3, padding=1)
    w0 = rng.standard_normal(geom.weight_shape)
    layer = EksConvLayer(w0, [init_lowrank(geom, 2, rng, np.float64) for _ in range(3)], geom)
    m = TaskIndexMatrix.from_labels([0, 1, 2, 1], 3)
    assert all((w == w0).all() for w in aggregate_weights(layer, m))
    h = rng.standard_normal((4, 3, 5, 5))
    np.testing.assert_allclose(eks_forward(layer, h, m), conv2d(h, w0, geom), atol=1e-12)


def test_single_task_equals_fused_conv():
    rng = np.random.default_rng(1)
    layer = random_layer(rng, 1, 3, 4, 3, dtype=np.float32, bias=False)
    m = TaskIndexMatrix.from_labels([0] * 5, 1)
    w = fuse_weights(layer.w0, layer.experts[0])
    assert all(np.array_equal(x, w) for x in aggregate_weights(layer, m))
    h = rng.standard_normal((5, 3, 6, 6)).astype(np.float32)
    assert np.abs(eks_forward(layer, h, m) - conv2d(h, w, layer.geometry)).max() <= 1e-5


def random_case(seed, dtype):
    rng = np.random.default_rng(seed)
    T, B = int(rng.integers(1, 9)), int(rng.integers(1, 17))
    k = int(rng.choice([1, 3]))
    cin, cout = int(rng.integers(1, 9)), int(rng.integers(1, 9))
    hw = int(rng.integers(max(k, 1), 9))
    layer = random_layer(rng, T, cin, cout, k, dtype=dtype, stride=int(rng.integers(1, 3)))
    h = rng.standard_normal((B, cin, hw, hw)).astype(dtype)
    m = TaskIndexMatrix.from_labels(rng.integers(0, T, B), T)
    return rng, layer, h, m


@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-5), (np.float64, 1e-10)])
def test_forward_equivalence_suite(dtype, tol):
    for seed in range(100):
        _, layer, h, m = random_case(seed, dtype)
        diff = np.abs(eks_forward(layer, h, m) - naive_forward(layer, h, m)).max()
        assert diff <= tol, (seed, diff)


def test_routing_and_backbone_sum_suite():
    for seed in range(100):
        rng, layer, h, m = random_case(seed, np.float32)
        out = eks_forward(layer, h, m)
        g = rng.standard_normal(out.shape).astype(np.float32)
        res = eks_backward(layer, h, m, g)
        ref = naive_backward(layer, h, m, g)
        for t, (gb, ga) in enumerate(res.grad_experts):
            if m.members(t).size == 0:
                assert not gb.any() and not ga.any()
                assert not res.present[t]
        assert np.abs(res.grad_w0 - ref.grad_w0).max() <= 1e-5 * max(1.0, np.abs(ref.grad_w0).max())


def test_only_task_zero_present():
    rng = np.random.default_rng(3)
    layer = random_layer(rng, 4, 2, 3, 3)
    m = TaskIndexMatrix.from_labels([0, 0, 0], 4)
    h = rng.standard_normal((3, 2, 4, 4))
    res = eks_backward(layer, h, m, rng.standard_normal((3, 3, 4, 4)))
    assert res.grad_experts[0][0].any()
    for gb, ga in res.grad_experts[1:]:
        assert not gb.any() and not ga.any()


def test_grad_w0_is_sum_of_subbatch_grads():
    rng = np.random.default_rng(4)
    layer = random_layer(rng, 3, 2, 3, 3)
    labels = np.array([0, 2, 1, 2, 0, 0])
    m = TaskIndexMatrix.from_labels(labels, 3)
    h = rng.standard_normal((6, 2, 5, 5))
    g = rng.standard_normal((6, 3, 5, 5))
    total = np.zeros_like(layer.w0)
    for t in range(3):
        idx = labels == t
        _, gw = conv2d_backward(g[idx], h[idx], fuse_weights(layer.w0, layer.experts[t]), layer.geometry)
        total += gw
    np.testing.assert_allclose(eks_backward(layer, h, m, g).grad_w0, total, atol=1e-10)


def _params(layer):
    out = [layer.w0, layer.bias]
    for e in layer.experts:
        out += [e.b, e.a]
    return out


@pytest.mark.parametrize("seed", range(20))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    T = int(rng.integers(1, 4))
    layer = random_layer(rng, T, int(rng.integers(1, 4)), int(rng.integers(1, 4)),
                         int(rng.choice([1, 3])), stride=int(rng.integers(1, 3)))
    B = int(rng.integers(1, 6))
    h = rng.standard_normal((B, layer.geometry.in_channels, 5, 5))
    m = TaskIndexMatrix.from_labels(rng.integers(0, T, B), T)

    def loss():
        return 0.5 * np.sum(eks_forward(layer, h, m) ** 2)

    res = eks_backward(layer, h, m, eks_forward(layer, h, m))
    analytic = [res.grad_w0, res.grad_bias]
    for gb, ga in res.grad_experts:
        analytic += [gb, ga]

    def fd_wrt(p):
        def f(v):
            saved = p.copy()
            p[...] = v
            val = loss()
            p[...] = saved
            return val
        return finite_diff_grad(f, p, 1e-5)

    for p, g in zip(_params(layer), analytic):
        fd = fd_wrt(p)
        if np.abs(fd).max() < 1e-12:
            assert np.abs(g).max() < 1e-9
        else:
            assert rel_err(g, fd) < 1e-4
    fh = finite_diff_grad(lambda v: 0.5 * np.sum(eks_forward(layer, v, m) ** 2), h, 1e-5)
    assert rel_err(res.grad_h, fh) < 1e-4


def test_naive_backward_agrees_with_eks_backward():
    rng, layer, h, m = random_case(7, np.float64)
    g = rng.standard_normal(eks_forward(layer, h, m).shape)
    a, b = eks_backward(layer, h, m, g), naive_backward(layer, h, m, g)
    np.testing.assert_allclose(a.grad_h, b.grad_h, atol=1e-10)
    for (x1, y1), (x2, y2) in zip(a.grad_experts, b.grad_experts):
        np.testing.assert_allclose(x1, x2, atol=1e-10)
        np.testing.assert_allclose(y1, y2, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_permutation_equivariance(seed):
    rng, layer, h, m = random_case(seed, np.float64)
    perm = rng.permutation(h.shape[0])
    out = eks_forward(layer, h, m)
    np.testing.assert_allclose(eks_forward(layer, h[perm], m.take(perm)), out[perm], atol=1e-12)


def test_single_launch_regardless_of_task_count():
    rng = np.random.default_rng(5)
    for T in (1, 4, 8):
        layer = random_layer(rng, T, 3, 3, 3, dtype=np.float32)
        h = rng.standard_normal((16, 3, 6, 6)).astype(np.float32)
        m = TaskIndexMatrix.from_labels(np.arange(16) % T, T)
        KERNEL_STATS.reset()
        eks_forward(layer, h, m)
        assert KERNEL_STATS.launches == 1
        KERNEL_STATS.reset()
        naive_forward(layer, h, m)
        assert KERNEL_STATS.launches == T


def test_task_count_mismatch():
    rng = np.random.default_rng(6)
    layer = random_layer(rng, 2, 1, 1, 1)
    with pytest.raises(ValidationError):
        eks_forward(layer, np.zeros((1, 1, 2, 2)), TaskIndexMatrix.from_labels([0], 3))


def test_cost_examples():
    assert cost_estimate(8, 4, 16, 64, 8)["eks_cheaper"] is True
    assert cost_estimate(1, 1, 1, 64, 2)["eks_cheaper"] is False
    c = cost_estimate(0, 3, 5, 7, 4)
    assert c["eks_flops"] == 2 * 3 * 5 * 7 * 7
    assert c["adapter_flops"] == 2 * 4 * 3 * 5 * 49
    with pytest.raises(ValidationError):
        cost_estimate(1, 0, 1, 1, 1)
