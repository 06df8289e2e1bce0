"""Autodiff core: every op's gradient against central finite differences,
plus tape bookkeeping semantics."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import xlrank.tensor as T
from xlrank.errors import ContractError, DimensionError, NumericError

STEP = 1e-5
TOL = 1e-4  # max relative error vs. central differences


def numeric_grad(f, x, step=STEP):
    """Central-difference gradient of scalar f at array x."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += step
        xm[i] -= step
        g[i] = (f(xp) - f(xm)) / (2 * step)
    return g


def check_grads(build, arrays, tol=TOL):
    """build(tensors) -> scalar Tensor; compares tape grads to numeric ones."""
    tensors = [T.Tensor(a) for a in arrays]
    with T.Tape() as tape:
        loss = build(*tensors)
        tape.backward(loss)
    for k, a in enumerate(arrays):
        def f(x, k=k):
            args = [T.Tensor(v) for v in arrays]
            args[k] = T.Tensor(x)
            return build(*args).item()
        want = numeric_grad(f, a)
        got = tensors[k].grad
        denom = max(np.abs(want).max(), 1.0)
        assert np.abs(got - want).max() / denom < tol, f"arg {k} gradient mismatch"


class TestElementwiseGrads:
    rng = np.random.default_rng(11)

    def test_add_sub_mul_broadcast(self):
        a = self.rng.normal(size=(3, 4))
        b = self.rng.normal(size=(4,))
        c = self.rng.normal(size=(3, 1))
        check_grads(lambda x, y, z: T.tsum(T.mul(T.add(x, y), T.sub(x, z))), [a, b, c])

    def test_scale(self):
        a = self.rng.normal(size=(5,))
        check_grads(lambda x: T.tsum(T.scale(x, -2.5)), [a])

    def test_relu(self):
        a = self.rng.normal(size=(4, 4)) + 0.05  # keep away from the kink
        check_grads(lambda x: T.tsum(T.mul(T.relu(x), T.relu(x))), [a])

    def test_sigmoid(self):
        a = self.rng.normal(size=(6,)) * 3
        check_grads(lambda x: T.tsum(T.sigmoid(x)), [a])

    def test_sigmoid_extreme_logits_stay_finite(self):
        y = T.sigmoid(T.Tensor([-800.0, 800.0]))
        np.testing.assert_allclose(y.data, [0.0, 1.0], atol=1e-12)


class TestMatmulGrads:
    rng = np.random.default_rng(12)

    def test_2d(self):
        a = self.rng.normal(size=(3, 5))
        b = self.rng.normal(size=(5, 2))
        check_grads(lambda x, y: T.tsum(T.matmul(x, y)), [a, b])

    def test_batched(self):
        a = self.rng.normal(size=(2, 3, 4))
        b = self.rng.normal(size=(2, 4, 3))
        check_grads(lambda x, y: T.tsum(T.matmul(x, y)), [a, b])

    def test_batched_shared_rhs(self):
        a = self.rng.normal(size=(2, 3, 4))
        b = self.rng.normal(size=(4, 5))
        check_grads(lambda x, y: T.tsum(T.matmul(x, y)), [a, b])

    def test_4d_batch(self):
        a = self.rng.normal(size=(2, 2, 3, 4))
        b = self.rng.normal(size=(2, 2, 4, 3))
        check_grads(lambda x, y: T.tsum(T.matmul(x, y)), [a, b])

    def test_inner_dim_mismatch(self):
        with pytest.raises(DimensionError, match=r"\(3, 5\)"):
            T.matmul(T.Tensor(np.ones((3, 5))), T.Tensor(np.ones((4, 2))))

    def test_batch_dim_mismatch(self):
        with pytest.raises(DimensionError):
            T.matmul(T.Tensor(np.ones((2, 3, 4))), T.Tensor(np.ones((3, 4, 2))))


class TestNormalizationGrads:
    rng = np.random.default_rng(13)

    def test_softmax_last_axis(self):
        a = self.rng.normal(size=(3, 6))
        w = self.rng.normal(size=(3, 6))
        check_grads(lambda x, v: T.tsum(T.mul(T.softmax(x), v)), [a, w])

    def test_softmax_other_axis(self):
        a = self.rng.normal(size=(4, 3))
        w = self.rng.normal(size=(4, 3))
        check_grads(lambda x, v: T.tsum(T.mul(T.softmax(x, axis=0), v)), [a, w])

    def test_layer_norm(self):
        x = self.rng.normal(size=(4, 8))
        g = self.rng.normal(size=(8,)) + 1.0
        b = self.rng.normal(size=(8,))
        w = self.rng.normal(size=(4, 8))
        check_grads(
            lambda xx, gg, bb, vv: T.tsum(T.mul(T.layer_norm(xx, gg, bb), vv)),
            [x, g, b, w],
        )

    def test_layer_norm_shape_guard(self):
        with pytest.raises(DimensionError):
            T.layer_norm(T.Tensor(np.ones((2, 8))), T.Tensor(np.ones(4)), T.Tensor(np.ones(8)))


class TestLossGrads:
    rng = np.random.default_rng(14)

    def test_cross_entropy(self):
        logits = self.rng.normal(size=(5, 7))
        tgt = self.rng.integers(0, 7, size=5)
        check_grads(lambda x: T.cross_entropy(x, tgt), [logits])

    def test_cross_entropy_single_row(self):
        logits = self.rng.normal(size=(7,))
        check_grads(lambda x: T.cross_entropy(x, 3), [logits])

    def test_cross_entropy_value(self):
        # uniform logits -> loss is log(vocab)
        loss = T.cross_entropy(T.Tensor(np.zeros((2, 10))), np.array([1, 9]))
        np.testing.assert_allclose(loss.item(), np.log(10), rtol=1e-12)

    def test_cross_entropy_bad_target(self):
        with pytest.raises(ContractError):
            T.cross_entropy(T.Tensor(np.zeros((1, 4))), np.array([4]))

    def test_bce(self):
        logits = self.rng.normal(size=(8,)) * 2
        labels = self.rng.integers(0, 2, size=8).astype(float)
        check_grads(lambda x: T.bce(x, labels), [logits])

    def test_bce_value(self):
        loss = T.bce(T.Tensor([0.0, 0.0]), np.array([1.0, 0.0]))
        np.testing.assert_allclose(loss.item(), np.log(2), rtol=1e-12)

    def test_bce_rejects_soft_labels(self):
        with pytest.raises(ContractError):
            T.bce(T.Tensor([0.0]), np.array([0.5]))

    def test_non_finite_input_rejected(self):
        bad = T.Tensor([np.nan, 1.0])
        for fn in (T.relu, T.sigmoid, T.softmax):
            with pytest.raises(NumericError):
                fn(bad)
        with pytest.raises(NumericError):
            T.cross_entropy(T.Tensor([[np.inf, 0.0]]), np.array([0]))
        with pytest.raises(NumericError):
            T.bce(bad, np.array([1.0, 0.0]))


class TestShapeOps:
    rng = np.random.default_rng(15)

    def test_reshape_swapaxes(self):
        a = self.rng.normal(size=(2, 3, 4))
        w = self.rng.normal(size=(4, 6))
        check_grads(
            lambda x, v: T.tsum(T.mul(T.reshape(T.swapaxes(x, 0, 1), (6, 4)),
                                      T.reshape(v, (6, 4)))),
            [a, w],
        )

    def test_embedding_gather_and_scatter(self):
        table = self.rng.normal(size=(6, 3))
        ids = np.array([[0, 2], [2, 5]])  # duplicate row 2 must accumulate
        check_grads(lambda t: T.tsum(T.mul(T.embedding(t, ids), T.embedding(t, ids))),
                    [table])
        out = T.embedding(T.Tensor(table), ids)
        assert out.shape == (2, 2, 3)
        np.testing.assert_allclose(out.data[1, 0], table[2])

    def test_embedding_index_guard(self):
        with pytest.raises(ContractError):
            T.embedding(T.Tensor(np.ones((3, 2))), np.array([3]))


class TestTapeSemantics:
    def test_no_tape_records_nothing(self):
        y = T.add(T.Tensor([1.0]), T.Tensor([2.0]))
        assert y._tape is None and y.grad is None
        np.testing.assert_allclose(y.data, [3.0])

    def test_unused_leaf_gets_zero_grad(self):
        x, z = T.Tensor([2.0]), T.Tensor([5.0])
        with T.Tape() as tape:
            loss = T.tsum(T.mul(x, x))
            _ = T.add(z, z)  # on tape but not feeding the loss
            tape.backward(loss)
        np.testing.assert_allclose(x.grad, [4.0])
        np.testing.assert_allclose(z.grad, [0.0])

    def test_reuse_accumulates(self):
        x = T.Tensor([3.0])
        with T.Tape() as tape:
            tape.backward(T.tsum(T.add(T.mul(x, x), x)))
        np.testing.assert_allclose(x.grad, [7.0])  # 2x + 1

    def test_entries_are_topologically_ordered(self):
        x = T.Tensor(np.ones(3))
        with T.Tape() as tape:
            tape.backward(T.tsum(T.relu(T.add(x, x))))
        for e in tape.entries:
            assert all(i < e.output_id for i in e.input_ids)
        outs = [e.output_id for e in tape.entries]
        assert outs == sorted(outs)

    def test_scalar_loss_required(self):
        x = T.Tensor(np.ones(3))
        with T.Tape() as tape:
            y = T.add(x, x)
            with pytest.raises(ContractError, match="scalar"):
                tape.backward(y)

    def test_backward_twice_rejected(self):
        x = T.Tensor([1.0])
        with T.Tape() as tape:
            loss = T.tsum(x)
            tape.backward(loss)
            with pytest.raises(ContractError):
                tape.backward(loss)

    def test_nested_tapes_rejected(self):
        with T.Tape():
            with pytest.raises(ContractError):
                with T.Tape():
                    pass

    def test_module_backward_requires_active_tape(self):
        with pytest.raises(ContractError):
            T.backward(T.Tensor(1.0))

    def test_foreign_loss_rejected(self):
        with T.Tape():
            loss = T.tsum(T.Tensor([1.0]))
        with T.Tape() as tape2:
            with pytest.raises(ContractError):
                tape2.backward(loss)


class TestComposite:
    def test_mlp_chain_all_params(self):
        rng = np.random.default_rng(16)
        x = rng.normal(size=(4, 6))
        w1 = rng.normal(size=(6, 5)) * 0.5
        b1 = rng.normal(size=(5,)) * 0.1
        w2 = rng.normal(size=(5, 3)) * 0.5
        tgt = np.array([0, 2, 1, 1])

        def net(xx, ww1, bb1, ww2):
            h = T.relu(T.add(T.matmul(xx, ww1), bb1))
            return T.cross_entropy(T.matmul(h, ww2), tgt)

        check_grads(net, [x, w1, b1, w2])


@settings(max_examples=25, deadline=None)
@given(rows=st.integers(1, 6), cols=st.integers(2, 12), seed=st.integers(0, 10**6))
def test_softmax_rows_always_sum_to_one(rows, cols, seed):
    x = np.random.default_rng(seed).normal(size=(rows, cols)) * 5
    y = T.softmax(T.Tensor(x))
    np.testing.assert_allclose(y.data.sum(axis=-1), 1.0, rtol=1e-10)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_broadcast_add_gradient_shapes(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 1, 4))
    b = rng.normal(size=(5, 1))
    ta, tb = T.Tensor(a), T.Tensor(b)
    with T.Tape() as tape:
        tape.backward(T.tsum(T.add(ta, tb)))
    assert ta.grad.shape == a.shape and tb.grad.shape == b.shape
    np.testing.assert_allclose(ta.grad, 5.0)
    np.testing.assert_allclose(tb.grad, 12.0)
