import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densemsa import nn
from densemsa.gradcheck import check_gradients, primitive_checks
from densemsa.tensor import (Parameter, ShapeError, Tape, Tensor, affine, backward, matmul,
                             mul, tsum)


def T(a):
    return Tensor(np.asarray(a, dtype=float))


# conv2d

def test_conv_unit_kernel_is_identity():
    x = np.random.default_rng(0).normal(size=(1, 1, 4, 4))
    out = nn.conv2d(T(x), T(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


def test_conv_all_ones_3x3():
    out = nn.conv2d(T(np.ones((1, 1, 3, 3))), T(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


def test_conv_stem_shape():
    out = nn.conv2d(T(np.zeros((1, 1, 32, 32))), T(np.zeros((48, 1, 7, 7))), stride=2, padding=3)
    assert out.shape == (1, 48, 16, 16)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(1)
    x, k = rng.normal(size=(2, 3, 6, 5)), rng.normal(size=(4, 3, 3, 3))
    got = nn.conv2d(T(x), T(k), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ho, wo = (6 + 2 - 3) // 2 + 1, (5 + 2 - 3) // 2 + 1
    want = np.zeros((2, 4, ho, wo))
    for n in range(2):
        for o in range(4):
            for i in range(ho):
                for j in range(wo):
                    want[n, o, i, j] = np.sum(xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * k[o])
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_conv_rejects_channel_mismatch():
    with pytest.raises(ShapeError):
        nn.conv2d(T(np.zeros((1, 2, 4, 4))), T(np.zeros((1, 3, 1, 1))))


@settings(max_examples=40, deadline=None)
@given(h=st.integers(1, 12), w=st.integers(1, 12), k=st.integers(1, 5),
       s=st.integers(1, 3), p=st.integers(0, 2))
def test_conv_shape_formula(h, w, k, s, p):
    if k > h + 2 * p or k > w + 2 * p:
        return
    out = nn.conv2d(T(np.zeros((1, 1, h, w))), T(np.zeros((2, 1, k, k))), stride=s, padding=p)
    assert out.shape == (1, 2, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)


# pooling

def test_pool_examples():
    x = T([[[[1, 2], [3, 4]]]])
    assert nn.max_pool2d(x, 2).data.item() == 4
    assert nn.avg_pool2d(x, 2).data.item() == 2.5
    assert nn.max_pool2d(T(np.zeros((1, 1, 6, 6))), 2, 2).shape == (1, 1, 3, 3)


def test_pool_rejects_oversized_window():
    with pytest.raises(ShapeError):
        nn.max_pool2d(T(np.zeros((1, 1, 1, 4))), 2)


@settings(max_examples=30, deadline=None)
@given(h=st.integers(2, 10), w=st.integers(2, 10), win=st.integers(1, 2), s=st.integers(1, 3))
def test_pool_shape_formula(h, w, win, s):
    out = nn.pool2d(T(np.zeros((1, 1, h, w))), "average", win, s)
    assert out.shape == (1, 1, (h - win) // s + 1, (w - win) // s + 1)


# batch norm

def test_batch_norm_train_symmetric_values():
    x = T(np.array([-1.0, 1.0, -1.0, 1.0]).reshape(1, 1, 2, 2))
    out = nn.batch_norm(x, T([1.0]), T([0.0]), np.zeros(1), np.ones(1), training=True)
    np.testing.assert_allclose(out.data.ravel(), [-1, 1, -1, 1], atol=1e-5)


def test_batch_norm_zero_gamma():
    x = T(np.random.default_rng(0).normal(size=(2, 3, 2, 2)))
    out = nn.batch_norm(x, T(np.zeros(3)), T(np.full(3, 5.0)), np.zeros(3), np.ones(3), training=True)
    np.testing.assert_allclose(out.data, 5.0)


def test_batch_norm_infer_identity_stats():
    x = np.random.default_rng(0).normal(size=(2, 3, 2, 2))
    out = nn.batch_norm(T(x), T(np.ones(3)), T(np.zeros(3)), np.zeros(3), np.ones(3), training=False)
    np.testing.assert_allclose(out.data, x / np.sqrt(1 + nn.BN_EPS))


def test_batch_norm_updates_running_stats_only_in_train():
    x = T(np.random.default_rng(0).normal(3.0, 2.0, size=(4, 2, 3, 3)))
    rm, rv = np.zeros(2), np.ones(2)
    nn.batch_norm(x, T(np.ones(2)), T(np.zeros(2)), rm, rv, training=False)
    assert rm.tolist() == [0, 0] and rv.tolist() == [1, 1]
    nn.batch_norm(x, T(np.ones(2)), T(np.zeros(2)), rm, rv, training=True)
    m = nn.BN_MOMENTUM
    np.testing.assert_allclose(rm, (1 - m) * x.data.mean(axis=(0, 2, 3)))


# activations

def test_activation_examples():
    np.testing.assert_allclose(nn.softmax(T([2.0, 2.0, 2.0])).data, [1 / 3] * 3)
    assert nn.maxout2(T([1, -2, 3, 0])).data.tolist() == [1, 3]
    assert nn.activation(T([-1, 0, 2]), "relu").data.tolist() == [0, 0, 2]


def test_maxout_odd_extent_rejected():
    with pytest.raises(ShapeError):
        nn.maxout2(T([1, 2, 3]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-500, 500), min_size=1, max_size=12))
def test_softmax_sums_to_one(values):
    p = nn.softmax(T(values)).data
    assert abs(p.sum() - 1) <= 1e-5
    assert np.all(p >= 0)


def test_masked_softmax_excludes_masked_cells():
    x = T([[5.0, 1.0, 100.0, 2.0]])
    mask = np.array([[1, 1, 0, 1]])
    p = nn.masked_softmax(x, mask).data[0]
    assert p[2] == 0.0
    e = np.exp([5.0, 1.0, 2.0])
    np.testing.assert_allclose(p[[0, 1, 3]], e / e.sum())


def test_masked_softmax_rejects_empty_row():
    with pytest.raises(ValueError):
        nn.masked_softmax(T([[1.0, 2.0]]), np.array([[0, 0]]))


# affine

def test_affine_examples():
    x = T([1.0, 2.0])
    np.testing.assert_array_equal(affine(x, T(np.eye(2)), T([0.0, 0.0])).data, [1, 2])
    np.testing.assert_array_equal(affine(x, T([[1, 1], [1, 1]])).data, [3, 3])
    np.testing.assert_array_equal(affine(T([7.0, -3.0]), T(np.zeros((2, 2))), T([4.0, 5.0])).data, [4, 5])


def test_affine_inner_mismatch():
    with pytest.raises(ShapeError):
        affine(T([1.0, 2.0, 3.0]), T(np.eye(2)))


# dropout

def test_dropout_contracts():
    x = T(np.arange(1, 13, dtype=float))
    np.testing.assert_array_equal(nn.dropout(x, 0.0, True, np.random.default_rng(0)).data, x.data)
    np.testing.assert_array_equal(nn.dropout(x, 0.7, False, None).data, x.data)
    a = nn.dropout(x, 0.5, True, np.random.default_rng(3)).data
    b = nn.dropout(x, 0.5, True, np.random.default_rng(3)).data
    np.testing.assert_array_equal(a, b)
    kept = a != 0
    np.testing.assert_allclose(a[kept], 2 * x.data[kept])


@pytest.mark.parametrize("rate", [-0.1, 1.0])
def test_dropout_rate_range(rate):
    with pytest.raises(ValueError):
        nn.dropout(T([1.0]), rate, True, np.random.default_rng(0))


# backward

def test_backward_matvec_gradient():
    x = np.array([1.0, -2.0, 0.5])
    W = Parameter(np.random.default_rng(0).normal(size=(2, 3)), "W")
    unused = Parameter(np.ones(4), "unused")
    with Tape() as tape:
        loss = tsum(affine(T(x), W))
    backward(loss, tape, [W, unused])
    np.testing.assert_array_equal(W.grad, np.outer(np.ones(2), x))
    np.testing.assert_array_equal(unused.grad, np.zeros(4))


def test_backward_accumulates_over_reuse():
    a = Parameter(np.array([3.0]), "a")
    with Tape() as tape:
        loss = tsum(mul(a, a))
    backward(loss, tape, [a])
    assert a.grad.tolist() == [6.0]


def test_backward_needs_scalar():
    a = Parameter(np.ones(2), "a")
    with Tape() as tape:
        y = mul(a, 2.0)
    with pytest.raises(ShapeError):
        backward(y, tape)


def test_no_tape_records_nothing():
    a = Parameter(np.ones((2, 2)), "a")
    out = matmul(a, a)
    assert not out.requires_grad


def test_every_primitive_passes_gradcheck():
    results = primitive_checks(seed=5)
    assert len(results) >= 20
    failed = [r.line() for r in results if not r.passed]
    assert not failed, failed


def test_gradcheck_detects_wrong_gradient():
    # sanity of the checker itself: a loss whose tape is missing a factor
    p = Parameter(np.array([0.3, -0.7]), "p")
    calls = {"n": 0}

    def loss_fn():
        calls["n"] += 1
        if calls["n"] == 1:
            return tsum(mul(p, 1.0))      # taped pass: gradient 1
        return tsum(mul(p, 2.0))          # numeric passes: gradient 2

    res = check_gradients("broken", loss_fn, [p], 4, np.random.default_rng(0))
    assert res.failures == 4
