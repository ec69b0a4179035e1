import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gbt import tensor as T
from gbt.gradcheck import gradcheck, numerical_grad, relative_error
from gbt.optim import Adam, AdamState, adam_step
from gbt.tensor import Tensor


def naive_matmul(a, b):
    n, k = a.shape
    _, m = b.shape
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def naive_conv1d(x, w, stride, padding):
    b, c_in, length = x.shape
    c_out, _, k = w.shape
    l_out = (length + 2 * padding - k) // stride + 1
    out = np.zeros((b, c_out, l_out))
    for n in range(b):
        for o in range(c_out):
            for i in range(l_out):
                acc = 0.0
                for c in range(c_in):
                    for kk in range(k):
                        pos = i * stride + kk - padding
                        if 0 <= pos < length:
                            acc += x[n, c, pos] * w[o, c, kk]
                out[n, o, i] = acc
    return out


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_zero_row(self):
        out = T.matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0], [7.0]]))
        np.testing.assert_array_equal(out.data, [[5], [0]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
            assert np.max(np.abs(T.matmul(Tensor(a), Tensor(b)).data - naive_matmul(a, b))) < 1e-12

    def test_zero_block_structure_is_bit_exact(self):
        rng = np.random.default_rng(0)
        q = np.vstack([rng.normal(size=(3, 5)), np.zeros((4, 5))])
        k = np.vstack([rng.normal(size=(3, 5)), np.zeros((4, 5))])
        s = T.matmul(Tensor(q), Tensor(k.T)).data
        assert np.all(s[3:, :] == 0.0) and np.all(s[:, 3:] == 0.0)
        assert np.all(s[:3, :3] != 0.0)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(T.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_batched_broadcast(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(2, 3, 4, 5)), rng.normal(size=(5, 2))
        np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, a @ b, atol=1e-12)


class TestMaskedSoftmax:
    def test_symmetric_row(self):
        np.testing.assert_array_equal(T.masked_softmax(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])

    @pytest.mark.parametrize("x,y", [(0.0, 0.0), (-3.0, 50.0), (1e3, -1e3)])
    def test_single_survivor(self, x, y):
        mask = np.array([[False, True]])
        np.testing.assert_array_equal(T.masked_softmax(Tensor([[x, y]]), mask=mask).data, [[1.0, 0.0]])

    def test_scalar_oracle(self):
        row = [1.0, 2.0, 3.0]
        denom = sum(math.exp(v) for v in row)
        expected = [math.exp(v) / denom for v in row]
        out = T.masked_softmax(Tensor([row])).data[0]
        assert np.max(np.abs(out - expected)) < 1e-12

    def test_causal_first_row(self):
        out = T.masked_softmax(Tensor(np.random.default_rng(0).normal(size=(4, 4))), causal=True).data
        assert out[0, 0] == 1.0
        assert np.all(out[np.triu_indices(4, 1)] == 0.0)

    def test_fully_masked_row_is_uniform(self):
        out = T.masked_softmax(Tensor([[1.0, 5.0]]), mask=np.array([[True, True]])).data
        np.testing.assert_allclose(out, [[0.5, 0.5]])

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (5, 5), elements=st.floats(-30, 30)), st.booleans())
    def test_rows_sum_to_one(self, scores, causal):
        out = T.masked_softmax(Tensor(scores), causal=causal).data
        assert np.all(np.abs(out.sum(axis=-1) - 1.0) < 1e-9)
        if causal:
            assert np.all(out[np.triu_indices(5, 1)] == 0.0)


class TestConv1d:
    def test_hand_example(self):
        out = T.conv1d(Tensor([[[1.0, 2.0, 3.0]]]), Tensor([[[1.0, 1.0, 1.0]]]), stride=1, padding=1)
        np.testing.assert_array_equal(out.data, [[[3, 6, 5]]])

    def test_identity_kernel_downsampling(self):
        out = T.conv1d(Tensor([[[1.0, 2.0, 3.0, 4.0]]]), Tensor([[[1.0]]]), stride=2, padding=0)
        np.testing.assert_array_equal(out.data, [[[1, 3]]])

    @pytest.mark.parametrize("stride,padding,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 1), (3, 2, 4)])
    def test_against_nested_loops(self, stride, padding, k):
        rng = np.random.default_rng(stride * 10 + padding)
        x, w = rng.normal(size=(2, 3, 8)), rng.normal(size=(4, 3, k))
        out = T.conv1d(Tensor(x), Tensor(w), stride, padding).data
        assert np.max(np.abs(out - naive_conv1d(x, w, stride, padding))) < 1e-12

    def test_output_length_formula(self):
        for length in range(3, 12):
            out = T.conv1d(Tensor(np.ones((1, 1, length))), Tensor(np.ones((1, 1, 3))), 2, 1)
            assert out.shape[-1] == (length + 2 - 3) // 2 + 1 == math.ceil(length / 2)

    def test_too_short_raises(self):
        with pytest.raises(T.DimensionError):
            T.conv1d(Tensor(np.ones((1, 1, 2))), Tensor(np.ones((1, 1, 5))))


class TestPointwise:
    def test_gelu_origin(self):
        assert T.gelu(Tensor([0.0])).data[0] == 0.0

    def test_sigmoid_origin(self):
        assert T.sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_sigmoid_extremes_are_finite(self):
        out = T.sigmoid(Tensor([-1000.0, 1000.0])).data
        np.testing.assert_array_equal(out, [0.0, 1.0])

    def test_dropout_zero_rate_identity(self):
        x = Tensor(np.arange(6.0))
        assert T.dropout(x, 0.0, True) is x

    def test_dropout_eval_identity(self):
        x = Tensor(np.arange(6.0))
        assert T.dropout(x, 0.5, False) is x

    def test_dropout_train_rescales(self):
        rng = np.random.default_rng(4321)
        out = T.dropout(Tensor(np.ones(20000)), 0.1, True, rng).data
        kept = out != 0
        assert abs(1 - kept.mean() - 0.1) < 0.01
        np.testing.assert_allclose(out[kept], 1 / 0.9)

    def test_dropout_rate_validation(self):
        with pytest.raises(ValueError):
            T.dropout(Tensor([1.0]), 1.0, True)


class TestWeightNorm:
    def test_norm_five(self):
        out = T.weight_norm_apply(Tensor([[3.0, 4.0]]), Tensor([1.0]))
        np.testing.assert_allclose(out.data, [[0.6, 0.8]], atol=1e-15)

    def test_gain_equal_to_norm_is_identity(self):
        raw = np.random.default_rng(2).normal(size=(3, 2, 4))
        gain = np.sqrt((raw**2).sum(axis=(1, 2)))
        np.testing.assert_allclose(T.weight_norm_apply(Tensor(raw), Tensor(gain)).data, raw, atol=1e-14)

    def test_gain_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        raw, gain = rng.normal(size=(3, 2, 3)), rng.uniform(0.5, 2, size=3)
        err = gradcheck(T.weight_norm_apply, [raw, gain], wrt=[1])[0]
        assert err < 1e-4

    def test_zero_channel_named(self):
        raw = np.ones((3, 2))
        raw[1] = 0
        with pytest.raises(FloatingPointError, match="channel 1"):
            T.weight_norm_apply(Tensor(raw), Tensor(np.ones(3)))


class TestBackward:
    def test_square(self):
        x = Tensor([3.0], requires_grad=True)
        (x * x).sum().backward()
        assert x.grad[0] == 6.0

    def test_sum_matmul_finite_differences(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
        ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
        T.matmul(ta, tb).sum().backward()
        f = lambda x, y: T.matmul(x, y)  # noqa: E731
        assert relative_error(ta.grad, numerical_grad(f, [a, b], 0)) < 1e-4
        assert relative_error(tb.grad, numerical_grad(f, [a, b], 1)) < 1e-4

    def test_detached_leaf_has_no_grad(self):
        x = Tensor([2.0], requires_grad=True)
        c = Tensor([5.0])
        (x * c).sum().backward()
        assert c.grad is None
        assert x.grad[0] == 5.0

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            (x * 2.0).backward()

    def test_repeated_backward_accumulates(self):
        x = Tensor([1.5], requires_grad=True)
        loss = (x * x).sum()
        loss.backward()
        loss.backward()
        assert x.grad[0] == 6.0

    def test_shared_subexpression(self):
        x = Tensor([2.0], requires_grad=True)
        y = x * x
        (y * y + y).sum().backward()  # d/dx (x^4 + x^2) = 4x^3 + 2x
        assert x.grad[0] == 36.0

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad

    def test_debug_mode_catches_nonfinite(self):
        with T.debug_mode():
            with pytest.raises(T.NonFiniteError):
                T.log(Tensor([-1.0]))
        assert T.is_grad_enabled()


class TestAdam:
    def test_first_step_scalar(self):
        w = np.array([0.0])
        adam_step([w], [np.array([1.0])], AdamState(), lr=1e-4)
        # m_hat = v_hat = 1 so the step is lr / (1 + eps)
        assert w[0] == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-12)

    def test_zero_gradient_fixed_point(self):
        w = np.array([0.3, -1.2])
        state = AdamState()
        for _ in range(3):
            adam_step([w], [np.zeros(2)], state, lr=1e-3)
        np.testing.assert_array_equal(w, [0.3, -1.2])
        assert state.step == 3

    def test_two_steps_scalar_reference(self):
        def reference(w, g, steps, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
            m = v = 0.0
            for t in range(1, steps + 1):
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                w = w - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
            return w

        w = np.array([0.5])
        state = AdamState()
        for _ in range(2):
            adam_step([w], [np.array([0.7])], state, lr=1e-3)
        assert abs(w[0] - reference(0.5, 0.7, 2)) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(T.DimensionError):
            adam_step([np.zeros(2)], [np.zeros(3)], AdamState(), lr=1e-3)

    def test_wrapper_uses_leaf_grads(self):
        p = Tensor([1.0], requires_grad=True)
        opt = Adam([p], lr=0.1)
        (p * p).sum().backward()
        opt.step()
        assert p.data[0] < 1.0


GRAD_CASES = {
    "add": (lambda a, b: a + b, [(3, 4), (4,)]),
    "sub": (lambda a, b: a - b, [(2, 3), (2, 3)]),
    "mul": (lambda a, b: a * b, [(2, 3), (1, 3)]),
    "div": (lambda a, b: a / (b * b + 1.0), [(2, 3), (2, 3)]),
    "matmul": (T.matmul, [(2, 3, 4), (4, 2)]),
    "matmul_batched": (T.matmul, [(2, 3, 4), (2, 4, 2)]),
    "exp": (T.exp, [(3, 2)]),
    "tanh": (T.tanh, [(3, 2)]),
    "sigmoid": (T.sigmoid, [(3, 2)]),
    "gelu": (T.gelu, [(3, 2)]),
    "softmax_causal": (lambda a: T.masked_softmax(a, causal=True), [(2, 4, 4)]),
    "layer_norm": (T.layer_norm, [(3, 5), (5,), (5,)]),
    "conv1d": (lambda x, w: T.conv1d(x, w, 2, 1), [(2, 3, 7), (4, 3, 3)]),
    "weight_norm": (T.weight_norm_apply, [(3, 2, 3), (3,)]),
    "getitem": (lambda a: a[:, 1::2], [(3, 6)]),
    "concat": (lambda a, b: T.concat([a, b], axis=1), [(2, 3), (2, 2)]),
    "transpose": (lambda a: a.transpose(2, 0, 1), [(2, 3, 4)]),
    "mean": (lambda a: a.mean(axis=1, keepdims=True), [(3, 4)]),
    "pow_base": (lambda a: 3.0**a, [(2, 3)]),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradients_match_central_differences(name):
    fn, shapes = GRAD_CASES[name]
    rng = np.random.default_rng(hash(name) % 2**32)
    for _ in range(3):
        arrays_ = [rng.normal(size=s) for s in shapes]
        assert max(gradcheck(fn, arrays_)) < 1e-4
