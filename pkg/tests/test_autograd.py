import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bonsai import autograd as ag
from bonsai.ops import (EDGE_OPS, ClassifierHead, OpKind, ShapeError, cosine_lr, forward_edge_op,
                        make_edge_op, sgd_step)
from conftest import numeric_grad, rel_error


def _distinct(rng, shape):
    # well separated values keep max-pool argmaxes and relu signs away from
    # the finite-difference step; the irrational offset stops a pooling
    # window of half-integers from summing to exactly zero
    n = int(np.prod(shape))
    vals = rng.permutation(n) - n / 2 + 0.5 + math.sqrt(2) / 10
    return vals.reshape(shape) * (0.02 + 0.01 * rng.random())


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("kind", EDGE_OPS, ids=lambda k: k.value)
def test_edge_op_gradients_match_finite_differences(kind, stride, backend):
    rng = np.random.default_rng(10 * EDGE_OPS.index(kind) + stride)
    c = 2
    x = ag.Tensor(_distinct(rng, (2, c, 6, 6)), requires_grad=True)
    op = make_edge_op(kind, c, c * stride, stride, rng, kind.value)
    probe = None

    def loss():
        nonlocal probe
        out = forward_edge_op(kind, x, op, stride, training=True)
        if probe is None:
            probe = rng.normal(size=out.shape)
        return ag.total(ag.mul(out, ag.Tensor(probe)))

    l = loss()
    l.backward()
    f = lambda: loss().item()
    assert rel_error(x.grad, numeric_grad(f, x.data)) < 1e-4
    for p in op.params():
        assert rel_error(p.grad, numeric_grad(f, p.data)) < 1e-4, p.name


def test_tower_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    x = ag.Tensor(rng.normal(size=(3, 4, 5, 5)), requires_grad=True)
    head = ClassifierHead(4, 3, rng)
    labels = np.array([0, 2, 1])
    loss = lambda: ag.cross_entropy(head(x), labels)
    loss().backward()
    f = lambda: loss().item()
    assert rel_error(x.grad, numeric_grad(f, x.data)) < 1e-4
    for p in head.params():
        assert rel_error(p.grad, numeric_grad(f, p.data)) < 1e-4


def test_sepconv_tower_chain_gradient():
    rng = np.random.default_rng(11)
    x = ag.Tensor(_distinct(rng, (2, 3, 5, 5)), requires_grad=True)
    op = make_edge_op(OpKind.SEP_CONV_3, 3, 3, 1, rng)
    head = ClassifierHead(3, 4, rng)
    loss = lambda: ag.cross_entropy(head(op(x, True)), [1, 3])
    loss().backward()
    f = lambda: loss().item()
    for t in [x] + op.params() + head.params():
        assert rel_error(t.grad, numeric_grad(f, t.data)) < 1e-4


def test_batch_norm_eval_mode_gradient():
    rng = np.random.default_rng(5)
    x = ag.Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
    gamma = ag.Parameter(rng.normal(size=3))
    beta = ag.Parameter(rng.normal(size=3))
    rm, rv = rng.normal(size=3), rng.uniform(0.5, 2, size=3)
    probe = ag.Tensor(rng.normal(size=x.shape))
    loss = lambda: ag.total(ag.mul(ag.batch_norm(x, gamma, beta, rm, rv, False), probe))
    loss().backward()
    f = lambda: loss().item()
    for t in (x, gamma, beta):
        assert rel_error(t.grad, numeric_grad(f, t.data)) < 1e-6


def test_identity_stride_one_returns_input():
    rng = np.random.default_rng(0)
    x = ag.Tensor(rng.normal(size=(2, 3, 4, 4)))
    out = forward_edge_op(OpKind.IDENTITY, x, make_edge_op(OpKind.IDENTITY, 3, 3, 1, rng), 1)
    np.testing.assert_array_equal(out.data, x.data)


def test_max_pool_of_constant_is_constant(backend):
    out = ag.max_pool3(ag.Tensor(np.full((1, 2, 5, 5), 2.0)))
    np.testing.assert_array_equal(out.data, 2.0)


def _brute_avg_pool(img):
    h, w = img.shape
    out = np.zeros_like(img)
    for i in range(h):
        for j in range(w):
            s = 0.0
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    if 0 <= i + di < h and 0 <= j + dj < w:
                        s += img[i + di, j + dj]
            out[i, j] = s / 9.0
    return out


def test_avg_pool_counts_padding(backend):
    out = ag.avg_pool3(ag.Tensor(np.ones((1, 1, 3, 3)))).data[0, 0]
    expected = np.array([[4, 6, 4], [6, 9, 6], [4, 6, 4]]) / 9.0
    np.testing.assert_allclose(out, expected, rtol=1e-15)
    img = np.random.default_rng(2).normal(size=(5, 6))
    np.testing.assert_allclose(ag.avg_pool3(ag.Tensor(img[None, None])).data[0, 0],
                               _brute_avg_pool(img), rtol=1e-12)


@pytest.mark.parametrize("kind", EDGE_OPS, ids=lambda k: k.value)
def test_shape_algebra(kind):
    rng = np.random.default_rng(0)
    x = ag.Tensor(rng.normal(size=(2, 4, 8, 8)))
    assert forward_edge_op(kind, x, make_edge_op(kind, 4, 4, 1, rng), 1, True).shape == (2, 4, 8, 8)
    assert forward_edge_op(kind, x, make_edge_op(kind, 4, 8, 2, rng), 2, True).shape == (2, 8, 4, 4)


def test_shape_mismatch_names_the_edge():
    rng = np.random.default_rng(0)
    op = make_edge_op(OpKind.SEP_CONV_3, 4, 4, 1, rng)
    with pytest.raises(ShapeError, match="cell3.node1"):
        forward_edge_op(OpKind.SEP_CONV_3, ag.Tensor(np.zeros((1, 5, 4, 4))), op, 1, edge="cell3.node1")


def test_backward_linear_and_accumulation():
    x = ag.Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    loss = ag.total(ag.scale(x, 2.0))
    loss.backward()
    np.testing.assert_array_equal(x.grad, [2, 2, 2])
    loss.backward()
    np.testing.assert_array_equal(x.grad, [4, 4, 4])


def test_backward_rejects_non_scalar():
    x = ag.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        ag.scale(x, 2.0).backward()


def test_fan_out_accumulates():
    x = ag.Tensor(np.array([2.0]), requires_grad=True)
    y = ag.mul(x, x)  # two paths into x
    ag.total(ag.add(y, x)).backward()
    np.testing.assert_allclose(x.grad, [5.0])


def test_cross_entropy_values():
    assert ag.cross_entropy(ag.Tensor(np.zeros((4, 10))), [0, 3, 5, 9]).item() == pytest.approx(math.log(10))
    big = np.zeros((1, 3))
    big[0, 1] = 1000.0
    assert ag.cross_entropy(ag.Tensor(big), [1]).item() == pytest.approx(0.0, abs=1e-12)
    assert ag.cross_entropy(ag.Tensor([[1.0, 2.0, 3.0]]), [2]).item() == pytest.approx(0.40761, abs=5e-6)
    ref = -math.log(math.exp(3) / (math.exp(1) + math.exp(2) + math.exp(3)))
    assert ag.cross_entropy(ag.Tensor([[1.0, 2.0, 3.0]]), [2]).item() == pytest.approx(ref, rel=1e-14)
    with pytest.raises(ValueError, match="out of range"):
        ag.cross_entropy(ag.Tensor(np.zeros((1, 3))), [3])


def test_sgd_steps():
    w = ag.Parameter(np.array([1.0]))
    w.grad = np.array([1.0])
    sgd_step([w], 0.1, 0.0, 0.0)
    assert w.data[0] == pytest.approx(0.9)
    assert w.grad is None

    w = ag.Parameter(np.array([0.0]))
    trace = []
    for _ in range(2):
        w.grad = np.array([1.0])
        sgd_step([w], 0.1, 0.9, 0.0)
        trace.append(w.data[0])
    assert trace == pytest.approx([-0.1, -0.29])

    w = ag.Parameter(np.array([0.5, -0.5]))
    w.grad = np.zeros(2)
    sgd_step([w], 0.1, 0.9, 0.0)
    np.testing.assert_array_equal(w.data, [0.5, -0.5])


def test_sgd_rejects_non_finite_gradient_by_name():
    w = ag.Parameter(np.array([1.0]), name="cell0.stem.conv")
    w.grad = np.array([np.nan])
    with pytest.raises(FloatingPointError, match="cell0.stem.conv"):
        sgd_step([w], 0.1, 0.9, 0.0)


def test_sgd_skips_frozen_parameters():
    w = ag.Parameter(np.array([1.0]), learnable=False)
    w.grad = np.array([1.0])
    sgd_step([w], 0.1, 0.0, 0.1)
    assert w.data[0] == 1.0


def test_cosine_lr():
    assert cosine_lr(0, 600, 0.01) == 0.01
    assert cosine_lr(300, 600, 0.01) == pytest.approx(0.005)
    assert cosine_lr(599, 600, 0.01) == pytest.approx(6.85e-8, rel=1e-3)
    with pytest.raises(ValueError):
        cosine_lr(0, 0, 0.01)


def test_drop_path_passthrough_and_errors():
    rng = np.random.default_rng(0)
    x = ag.Tensor(np.ones((4, 2, 3, 3)))
    assert ag.drop_path(x, 0.0, True, rng) is x
    assert ag.drop_path(x, 0.3, False, rng) is x
    with pytest.raises(ValueError):
        ag.drop_path(x, 1.0, True, rng)


def test_drop_path_is_unbiased():
    rng = np.random.default_rng(1234)
    n = 100_000
    out = ag.drop_path(ag.Tensor(np.ones((n, 1))), 0.3, True, rng).data.ravel()
    sem = out.std(ddof=1) / math.sqrt(n)
    assert abs(out.mean() - 1.0) < 3 * sem
    assert set(np.unique(out)) <= {0.0, 1.0 / 0.7}


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6))
def test_l2norm_gradient_is_unit_direction(values):
    v = np.array(values)
    x = ag.Tensor(v, requires_grad=True)
    ag.l2norm(x).backward()
    norm = np.linalg.norm(v)
    if norm == 0:
        assert x.grad is None or not np.any(x.grad)
    else:
        np.testing.assert_allclose(x.grad, v / norm, rtol=1e-12, atol=1e-15)
