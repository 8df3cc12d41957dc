"""Tape autodiff: every primitive's gradient against finite differences."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import evtraf.tensor as T
from conftest import check_grad
from evtraf.errors import ShapeMismatchError
from evtraf.tensor import Tensor, no_grad


def test_add_mul_broadcast_grads(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4,))
    check_grad(lambda x, y: ((x + y) * (x - y)).sum(), [a, b])


def test_div_grad(rng):
    a = rng.standard_normal((3, 4))
    b = rng.uniform(0.5, 2.0, (3, 4))
    check_grad(lambda x, y: (x / y).sum(), [a, b])


def test_scalar_broadcast_grad(rng):
    a = rng.standard_normal((2, 3))
    check_grad(lambda x: T.square((x * 3.0 + 1.0) / 2.0).sum(), [a])


def test_matmul_grad(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    check_grad(lambda x, y: T.square(x @ y).sum(), [a, b])


def test_unary_grads(rng):
    a = rng.uniform(0.3, 2.0, (3, 3))

    check_grad(lambda x: T.exp(x).sum(), [a])
    check_grad(lambda x: T.log(x).sum(), [a])
    check_grad(lambda x: T.sqrt(x).sum(), [a])
    check_grad(lambda x: T.square(x).sum(), [a])
    check_grad(lambda x: T.tanh(x).sum(), [a])
    check_grad(lambda x: T.sigmoid(x).sum(), [a])
    check_grad(lambda x: T.softplus(x).sum(), [a])


def test_abs_grad_away_from_zero(rng):
    a = rng.uniform(0.2, 1.5, (4,)) * np.where(rng.random(4) < 0.5, -1, 1)
    check_grad(lambda x: T.absolute(x).sum(), [a])


def test_lgamma_grad(rng):
    a = rng.uniform(0.5, 8.0, (5,))
    check_grad(lambda x: T.lgamma(x).sum(), [a], rtol=1e-5, eps=1e-5)


def test_softmax_grad(rng):
    a = rng.standard_normal((4, 5))
    check_grad(lambda x: (T.softmax(x, axis=1) * T.softmax(x, axis=1)).sum(), [a])


def test_softmax_rows_sum_to_one(rng):
    s = T.softmax(Tensor(rng.standard_normal((6, 7))), axis=1)
    assert np.allclose(s.data.sum(axis=1), 1.0, atol=1e-12)


def test_clip_grad_interior_and_edges():
    a = np.array([-2.0, -0.3, 0.4, 2.5])
    t = Tensor(a, requires_grad=True)
    T.clip(t, -1.0, 1.0).sum().backward()
    # clipped entries get zero gradient, interior entries pass through
    assert np.array_equal(t.grad, [0.0, 1.0, 1.0, 0.0])


def test_reshape_transpose_concat_slice_grads(rng):
    a = rng.standard_normal((2, 6))
    b = rng.standard_normal((3, 4))

    def loss(x, y):
        z = T.concat([x.reshape(3, 4), y], axis=0)
        return (T.transpose(z) @ z).sum() + T.square(z[1:4, :2]).sum()

    check_grad(loss, [a, b])


def test_sum_mean_axis_grads(rng):
    a = rng.standard_normal((3, 5))
    check_grad(lambda x: T.square(x.sum(axis=0)).sum(), [a])
    check_grad(lambda x: T.square(x.mean(axis=1)).sum(), [a])
    check_grad(lambda x: T.square(x.mean()), [a])


def test_broadcast_to_grad(rng):
    a = rng.standard_normal((1, 4))
    check_grad(lambda x: T.square(T.broadcast_to(x, (3, 4))).sum(), [a])


def test_gather_pairs_and_segment_ops_grads(rng):
    # 3 destinations, segments [0:2), [2:4), [4:6)
    src = np.array([0, 1, 1, 2, 2, 0], dtype=np.int64)
    dst = np.array([0, 0, 1, 1, 2, 2], dtype=np.int64)
    seg_ptr = np.array([0, 2, 4, 6], dtype=np.int64)
    scores = rng.standard_normal((3, 3))
    feats = rng.standard_normal((3, 4))

    def loss(s, f):
        logits = T.gather_pairs(s, src, dst)
        w = T.segment_softmax(logits, seg_ptr)
        out = T.neighbor_weighted_sum(w, f, src, seg_ptr)
        return T.square(out).sum()

    check_grad(loss, [scores, feats], rtol=2e-5)


def test_segment_softmax_sums_to_one_per_segment(rng):
    seg_ptr = np.array([0, 3, 5, 9], dtype=np.int64)
    w = T.segment_softmax(Tensor(rng.standard_normal(9)), seg_ptr)
    sums = np.add.reduceat(w.data, seg_ptr[:-1])
    assert np.allclose(sums, 1.0, atol=1e-12)


def test_backward_requires_scalar():
    t = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (t * 2.0).backward()


def test_shape_mismatch_names_both_shapes():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((4, 5)))
    with pytest.raises(ShapeMismatchError) as exc:
        _ = a + b
    assert "(2, 3)" in str(exc.value) and "(4, 5)" in str(exc.value)


def test_matmul_requires_2d():
    a = Tensor(np.ones(3))
    b = Tensor(np.ones(3))
    with pytest.raises(ShapeMismatchError):
        _ = a @ b


def test_grad_accumulates_across_reuse():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x + x  # dy/dx = 2x + 1 = 5
    y.sum().backward()
    assert x.grad[0] == pytest.approx(5.0, abs=1e-12)


def test_diamond_graph_backward_visits_once():
    x = Tensor(np.array([1.5]), requires_grad=True)
    a = x * 2.0
    b = a + a  # diamond: both parents are the same node
    (b * b).sum().backward()
    # d/dx (4x)^2 = 32x = 48
    assert x.grad[0] == pytest.approx(48.0, abs=1e-10)


def test_no_grad_blocks_taping():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = x * 3.0
    assert y._parents == () and not y.requires_grad


def test_non_grad_leaves_get_no_gradient():
    x = Tensor(np.ones(2), requires_grad=True)
    c = Tensor(np.full(2, 2.0))
    (x * c).sum().backward()
    assert c.grad is None
    assert np.array_equal(x.grad, [2.0, 2.0])


def test_backward_twice_accumulates():
    x = Tensor(np.array([3.0]), requires_grad=True)
    T.square(x).sum().backward()
    T.square(x).sum().backward()
    assert x.grad[0] == pytest.approx(12.0, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(
    hnp.arrays(
        np.float64,
        hnp.array_shapes(min_dims=1, max_dims=2, max_side=4),
        elements=st.floats(-3.0, 3.0),
    )
)
def test_tanh_sigmoid_identity(arr):
    # tanh(x) = 2*sigmoid(2x) - 1 must hold through the tape
    t = Tensor(arr)
    lhs = T.tanh(t).data
    rhs = 2.0 * T.sigmoid(t * 2.0).data - 1.0
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_determinism_of_forward_backward(rng):
    a = rng.standard_normal((4, 4))

    def run():
        t = Tensor(a.copy(), requires_grad=True)
        T.tanh(t @ t).sum().backward()
        return t.grad.copy()

    assert np.array_equal(run(), run())
