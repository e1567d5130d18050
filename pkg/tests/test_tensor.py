import math
import zlib

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradcheck import OPS, check
from pict import tensor as T
from pict.tensor import Tensor


def test_matmul_identity():
    out = T.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3, 4], [5, 6]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_row_col():
    assert T.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_matmul_gradients_finite_difference():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    w = rng.normal(size=(4, 3))
    err = check(lambda x, y: (T.matmul(x, y) * Tensor(w)).sum(), [a, b])
    assert err < 1e-3


def test_batched_matmul_broadcast_gradients():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(2, 3, 4, 5)), rng.normal(size=(5, 2))
    c = rng.normal(size=(3, 5, 2))
    assert check(lambda x, y: (T.matmul(x, y) * T.matmul(x, y)).sum(), [a, b]) < 1e-3
    assert check(lambda x, y: T.matmul(x, y).sum(), [a, c]) < 1e-3


def test_softmax_symmetric():
    np.testing.assert_allclose(T.softmax_rows(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_large_inputs_no_overflow():
    out = T.softmax_rows(Tensor([1000.0, 1000.0, 1000.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1 / 3] * 3, atol=1e-7)


def test_softmax_high_precision_oracle():
    mpmath.mp.dps = 50
    xs = [1, 2, 3]
    denom = sum(mpmath.e**x for x in xs)
    expected = [float(mpmath.e**x / denom) for x in xs]
    with T.default_dtype(np.float64):
        np.testing.assert_allclose(T.softmax_rows(Tensor(xs)).data, expected, atol=1e-6)
    np.testing.assert_allclose(T.softmax_rows(Tensor(xs)).data, expected, atol=1e-6)


def test_softmax_rejects_non_finite():
    with pytest.raises(T.NumericError):
        T.softmax_rows(Tensor([0.0, np.nan]))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)),
              elements=st.floats(-1e4, 1e4)))
def test_softmax_rows_sum_to_one(x):
    out = T.softmax_rows(Tensor(x)).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=-1, dtype=np.float64), 1.0, atol=1e-6)


def test_cross_entropy_confident():
    assert T.cross_entropy(Tensor([[10.0, -10.0]]), [0]).item() < 1e-4


def test_cross_entropy_uniform():
    assert T.cross_entropy(Tensor([[0.0, 0.0]]), [1]).item() == pytest.approx(math.log(2), abs=1e-6)


def test_cross_entropy_mask_matches_per_row_oracle():
    logits = np.array([[1.0, -0.5, 0.2], [3.0, 0.0, 0.0], [-1.0, 2.0, 0.5]])
    targets = [2, 0, 1]

    def row_loss(row, t):
        return -(row[t] - math.log(sum(math.exp(v) for v in row)))

    expected = (row_loss(logits[0], 2) + row_loss(logits[2], 1)) / 2
    with T.default_dtype(np.float64):
        got = T.cross_entropy(Tensor(logits), targets, mask=[True, False, True]).item()
    assert got == pytest.approx(expected, abs=1e-12)


def test_cross_entropy_all_masked():
    with pytest.raises(T.EmptyBatchError):
        T.cross_entropy(Tensor([[0.0, 1.0]]), [0], mask=[False])


def test_cross_entropy_one_hot_targets():
    logits = Tensor([[0.3, 1.2], [2.0, -1.0]])
    a = T.cross_entropy(logits, [1, 0]).item()
    b = T.cross_entropy(logits, np.eye(2)[[1, 0]]).item()
    assert a == pytest.approx(b, rel=1e-6)


def test_backward_sum():
    w = Tensor(np.ones(3), requires_grad=True)
    w.sum().backward()
    np.testing.assert_array_equal(w.grad, [1, 1, 1])


def test_backward_square():
    w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    (w * w).sum().backward()
    np.testing.assert_allclose(w.grad, [2, 4, 6])


def test_backward_requires_scalar():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(T.ShapeError):
        (w * 2.0).backward()


def test_unused_tensor_gets_no_grad():
    w = Tensor([1.0, 2.0], requires_grad=True)
    unused = Tensor([3.0], requires_grad=True)
    _ = unused * 2.0
    (w * w).sum().backward()
    assert unused.grad is None


def test_composed_network_gradients():
    rng = np.random.default_rng(2)
    x, w1, w2 = rng.normal(size=(6, 4)), rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    targets = rng.integers(0, 3, size=6)

    def net(x, w1, w2):
        h = T.softmax_rows(T.matmul(x, w1))
        return T.cross_entropy(T.matmul(h, w2), targets)

    assert check(net, [x, w1, w2]) < 1e-3


def test_tape_visits_reverse_append_order():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = a * 2.0
    c = b + a
    loss = (c * c).sum()
    tape = T.GradTape(loss)
    seqs = [n.seq for n in tape.nodes]
    assert seqs == sorted(seqs) and len(set(seqs)) == len(seqs) == 4


def test_no_grad_records_nothing():
    a = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        b = a * 3.0
    assert not b.requires_grad and b._node is None


def test_storage_is_float32_by_default():
    assert Tensor([1.0, 2.0]).dtype == np.float32
    big = Tensor(np.full(100000, 0.1, dtype=np.float32))
    assert big.sum().item() == pytest.approx(10000.0, rel=1e-6)


def test_forward_is_deterministic():
    rng = np.random.default_rng(3)
    x, w = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
    outs = [T.softmax_rows(T.matmul(Tensor(x), Tensor(w))).data.tobytes() for _ in range(2)]
    assert outs[0] == outs[1]




@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_randomized(name):
    fn, shapes = OPS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(8):
        arrays_ = [rng.normal(size=s) for s in shapes]
        proj = {}

        def build(*ts):
            out = fn(*ts)
            if out.size == 1:
                return out.reshape(())
            if "w" not in proj:
                proj["w"] = rng.normal(size=out.shape)
            return (out * Tensor(proj["w"])).sum()

        assert check(build, arrays_) < 1e-3
