import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fmformer import tensor as T
from fmformer.tensor import Tensor

from .conftest import gradcheck


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


def naive_conv(x, w, b=None):
    bsz, h, wd, cin = x.shape
    k, _, _, cout = w.shape
    p = k // 2
    out = np.zeros((bsz, h, wd, cout))
    for n in range(bsz):
        for i in range(h):
            for j in range(wd):
                for di in range(k):
                    for dj in range(k):
                        ii, jj = i + di - p, j + dj - p
                        if 0 <= ii < h and 0 <= jj < wd:
                            out[n, i, j] += x[n, ii, jj] @ w[di, dj]
    return out if b is None else out + b


def naive_deconv(x, w):
    bsz, h, wd, cin = x.shape
    cout = w.shape[-1]
    out = np.zeros((bsz, 2 * h, 2 * wd, cout))
    for n in range(bsz):
        for i in range(h):
            for j in range(wd):
                for a in range(2):
                    for c in range(2):
                        out[n, 2 * i + a, 2 * j + c] += x[n, i, j] @ w[:, a, c]
    return out


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(T.matmul(Tensor(a), Tensor(np.eye(2))).data, a)

    def test_column_vector(self):
        out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
        np.testing.assert_array_equal(out.data, [[17.0], [39.0]])

    def test_zero(self, rng):
        out = T.matmul(Tensor(np.zeros((3, 4))), Tensor(rng.normal(size=(4, 5))))
        assert not out.data.any()

    def test_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 16), st.integers(1, 16), st.integers(1, 16), st.integers(0, 2 ** 31))
    def test_matches_loop_oracle(self, m, k, n, seed):
        g = np.random.default_rng(seed)
        a, b = g.normal(size=(m, k)), g.normal(size=(k, n))
        with T.default_dtype(np.float64):
            out = T.matmul(Tensor(a), Tensor(b)).data
        np.testing.assert_allclose(out, naive_matmul(a, b), rtol=1e-5, atol=1e-12)

    def test_gradient(self, rng):
        gradcheck(T.matmul, rng.normal(size=(3, 4)), rng.normal(size=(4, 2)))

    def test_batched_gradient(self, rng):
        gradcheck(T.matmul, rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 2)))


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_no_overflow(self):
        out = T.softmax(Tensor([1000.0, 0.0])).data
        assert np.all(np.isfinite(out))
        assert out[0] == pytest.approx(1.0) and out[1] == pytest.approx(0.0, abs=1e-30)

    def test_formula(self, rng, f64):
        x = rng.normal(size=4)
        np.testing.assert_allclose(T.softmax(Tensor(x)).data, np.exp(x) / np.exp(x).sum(), atol=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6),
                      elements=st.floats(-50, 50)))
    def test_rows_sum_to_one(self, x):
        with T.default_dtype(np.float64):
            out = T.softmax(Tensor(x), axis=-1).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)
        assert np.all((out >= 0) & (out <= 1))

    def test_gradient(self, rng):
        gradcheck(lambda x: T.softmax(x, axis=-1), rng.normal(size=(3, 5)))
        gradcheck(lambda x: T.log_softmax(x, axis=-1), rng.normal(size=(3, 5)))


class TestLayerNorm:
    def ln(self, x, gain=None, bias=None):
        d = x.shape[-1]
        with T.default_dtype(np.float64):
            g = Tensor(np.ones(d) if gain is None else gain)
            b = Tensor(np.zeros(d) if bias is None else bias)
            return T.layer_norm(Tensor(x), g, b).data

    def test_constant_row(self):
        np.testing.assert_array_equal(self.ln(np.full((1, 4), 3.0)), 0.0)

    def test_pair(self):
        np.testing.assert_allclose(self.ln(np.array([[1.0, -1.0]])), [[1.0, -1.0]], atol=1e-5)

    def test_zero_gain(self, rng):
        bias = rng.normal(size=5)
        np.testing.assert_allclose(self.ln(rng.normal(size=(3, 5)), np.zeros(5), bias), np.tile(bias, (3, 1)))

    def test_gradient(self, rng):
        gradcheck(T.layer_norm, rng.normal(size=(2, 3, 6)), rng.normal(size=6), rng.normal(size=6))


class TestBatchNorm:
    def bn(self, x, training=True, rm=None, rv=None):
        c = x.shape[-1]
        rm = np.zeros(c) if rm is None else rm
        rv = np.ones(c) if rv is None else rv
        with T.default_dtype(np.float64):
            out = T.batch_norm_2d(Tensor(x), Tensor(np.ones(c)), Tensor(np.zeros(c)), rm, rv, training)
        return out.data, rm, rv

    def test_standardised_input_passes(self, rng):
        x = rng.normal(size=(4, 5, 5, 3))
        x = (x - x.mean(axis=(0, 1, 2))) / x.std(axis=(0, 1, 2))
        out, _, _ = self.bn(x)
        np.testing.assert_allclose(out, x, atol=1e-4)

    def test_constant_channel(self):
        out, _, _ = self.bn(np.full((2, 3, 3, 2), 7.0))
        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    def test_statistics(self, rng):
        out, _, _ = self.bn(rng.normal(3.0, 2.5, size=(8, 6, 6, 4)))
        np.testing.assert_allclose(out.mean(axis=(0, 1, 2)), 0.0, atol=1e-9)
        np.testing.assert_allclose(out.var(axis=(0, 1, 2)), 1.0, atol=1e-4)

    def test_running_update_only_in_training(self, rng):
        x = rng.normal(2.0, 1.0, size=(4, 3, 3, 2))
        _, rm, rv = self.bn(x, training=True)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 1, 2)))
        m = x.size // 2
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 1, 2)) * m / (m - 1))
        rm2, rv2 = rm.copy(), rv.copy()
        self.bn(x, training=False, rm=rm, rv=rv)
        np.testing.assert_array_equal(rm, rm2)
        np.testing.assert_array_equal(rv, rv2)

    def test_eval_before_training_uses_initial_stats(self, rng):
        x = rng.normal(size=(2, 3, 3, 2))
        out, _, _ = self.bn(x, training=False)
        np.testing.assert_allclose(out, x / np.sqrt(1 + 1e-5))

    def test_gradient(self, rng):
        def op(x, g, b):
            return T.batch_norm_2d(x, g, b, np.zeros(3), np.ones(3), True)

        gradcheck(op, rng.normal(size=(2, 3, 3, 3)), rng.normal(size=3), rng.normal(size=3))


class TestConvolution:
    def test_identity_1x1(self, rng):
        x = rng.normal(size=(2, 5, 5, 4))
        w = np.eye(4).reshape(1, 1, 4, 4)
        with T.default_dtype(np.float64):
            np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(w)).data, x)

    def test_impulse_plateau(self):
        x = np.zeros((1, 7, 7, 1))
        x[0, 3, 3, 0] = 1.0
        out = T.conv2d(Tensor(x), Tensor(np.ones((3, 3, 1, 1)))).data[0, :, :, 0]
        expected = np.zeros((7, 7))
        expected[2:5, 2:5] = 1.0
        np.testing.assert_array_equal(out, expected)

    def test_zero_weights(self, rng):
        out = T.conv2d(Tensor(rng.normal(size=(1, 4, 4, 2))), Tensor(np.zeros((3, 3, 2, 3))))
        assert out.shape == (1, 4, 4, 3) and not out.data.any()

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channel"):
            T.conv2d(Tensor(np.ones((1, 4, 4, 2))), Tensor(np.ones((3, 3, 3, 1))))

    @settings(max_examples=15, deadline=None)
    @given(st.sampled_from([1, 3]), st.integers(1, 16), st.integers(1, 16), st.integers(1, 4),
           st.integers(1, 4), st.integers(0, 2 ** 31))
    def test_matches_loop_oracle(self, k, h, w, cin, cout, seed):
        g = np.random.default_rng(seed)
        x, wt, b = g.normal(size=(1, h, w, cin)), g.normal(size=(k, k, cin, cout)), g.normal(size=cout)
        with T.default_dtype(np.float64):
            out = T.conv2d(Tensor(x), Tensor(wt), Tensor(b)).data
        np.testing.assert_allclose(out, naive_conv(x, wt, b), rtol=1e-5, atol=1e-10)

    def test_gradient(self, rng):
        gradcheck(T.conv2d, rng.normal(size=(2, 4, 5, 2)), rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3))
        gradcheck(T.conv2d, rng.normal(size=(1, 3, 3, 4)), rng.normal(size=(1, 1, 4, 2)))


class TestDeconv:
    def test_single_pixel(self):
        out = T.deconv2d_2x2(Tensor(np.full((1, 1, 1, 1), 2.5)), Tensor(np.ones((1, 2, 2, 1))))
        np.testing.assert_array_equal(out.data[0, :, :, 0], np.full((2, 2), 2.5))

    def test_doubles(self, rng):
        out = T.deconv2d_2x2(Tensor(rng.normal(size=(2, 8, 8, 3))), Tensor(rng.normal(size=(3, 2, 2, 5))))
        assert out.shape == (2, 16, 16, 5)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 31))
    def test_matches_scatter_oracle(self, h, w, cin, cout, seed):
        g = np.random.default_rng(seed)
        x, wt = g.normal(size=(2, h, w, cin)), g.normal(size=(cin, 2, 2, cout))
        with T.default_dtype(np.float64):
            out = T.deconv2d_2x2(Tensor(x), Tensor(wt)).data
        np.testing.assert_allclose(out, naive_deconv(x, wt), rtol=1e-5, atol=1e-10)

    def test_gradient(self, rng):
        gradcheck(T.deconv2d_2x2, rng.normal(size=(2, 3, 2, 2)), rng.normal(size=(2, 2, 2, 3)), rng.normal(size=3))


class TestActivations:
    def test_relu(self):
        np.testing.assert_array_equal(T.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])

    def test_gelu_values(self, f64):
        assert T.gelu(Tensor([0.0])).data[0] == 0.0
        c = 0.7978845608
        expected = 0.5 * (1 + math.tanh(c * (1 + 0.044715)))
        assert T.gelu(Tensor([1.0])).data[0] == pytest.approx(expected, abs=1e-12)
        assert T.gelu(Tensor([1.0])).data[0] == pytest.approx(0.8412, abs=1e-4)

    def test_gradients(self, rng):
        gradcheck(T.gelu, rng.normal(size=(4, 5)))
        x = rng.normal(size=(4, 5))
        x[np.abs(x) < 0.05] = 0.5  # keep clear of the kink
        gradcheck(T.relu, x)
        gradcheck(T.exp, rng.normal(size=6))
        gradcheck(lambda a: T.log(a), rng.uniform(0.5, 2.0, size=6))
        gradcheck(T.reciprocal, rng.uniform(0.5, 2.0, size=6))


class TestShapesAndReductions:
    def test_gradients(self, rng):
        gradcheck(lambda a: T.tsum(a, axis=1), rng.normal(size=(3, 4, 2)))
        gradcheck(lambda a: T.mean(a, axis=(0, 2), keepdims=True), rng.normal(size=(3, 4, 2)))
        gradcheck(lambda a: T.transpose(a, (2, 0, 1)), rng.normal(size=(3, 4, 2)))
        gradcheck(lambda a: T.reshape(a, (6, 4)), rng.normal(size=(3, 4, 2)))
        gradcheck(lambda a: a[:, 1:3], rng.normal(size=(3, 4)))
        gradcheck(lambda a: a[np.array([0, 2, 0])], rng.normal(size=(3, 4)))
        gradcheck(lambda a, b: T.concat([a, b], axis=1), rng.normal(size=(2, 3)), rng.normal(size=(2, 2)))
        gradcheck(lambda a, b: a * b + a, rng.normal(size=(3, 4)), rng.normal(size=(4,)))
        gradcheck(lambda a: T.broadcast_to(a, (3, 4)), rng.normal(size=(1, 4)))
        gradcheck(lambda a: T.resize_bilinear(a, 5, 3), rng.normal(size=(1, 2, 4, 2)))
        gradcheck(lambda a: T.resize_axis(a, 1, 5), rng.normal(size=(2, 3, 2)))

    def test_bilinear_midpoint(self, f64):
        x = np.array([[0.0, 1.0], [1.0, 2.0]]).reshape(1, 2, 2, 1)
        out = T.resize_bilinear(Tensor(x), 3, 3).data[0, :, :, 0]
        assert out[1, 1] == pytest.approx(1.0)

    def test_interp_rows_sum_to_one(self):
        for n_in, n_out in [(2, 3), (32, 30), (5, 5), (7, 2)]:
            np.testing.assert_allclose(T.interp_matrix(n_in, n_out, np.float64).sum(axis=1), 1.0)


class TestBackward:
    def test_sum(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_square(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_shared_subexpression_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        y = x * x
        (y + y * x).sum().backward()
        assert x.grad[0] == pytest.approx(2 * 2.0 + 3 * 4.0)

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            (x * 2).backward()

    def test_second_call_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = (x * 2).sum()
        loss.backward()
        with pytest.raises(RuntimeError, match="already"):
            loss.backward()

    def test_empty_tape_rejected(self):
        with pytest.raises(RuntimeError):
            Tensor(np.ones(3)).sum().backward()

    def test_no_grad(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            y = (x * 2).sum()
        assert not y.requires_grad

    def test_check_finite(self):
        with T.check_finite(), np.errstate(divide="ignore"), pytest.raises(FloatingPointError):
            T.log(Tensor([0.0]))

    def test_tape_topological(self):
        a = Tensor([1.0], requires_grad=True)
        b = a * 2
        c = b + a
        d = c * b
        tape = T._build_tape(d)
        pos = {id(n): i for i, n in enumerate(tape)}
        for node in tape:
            for p in node._prev:
                if p.requires_grad:
                    assert pos[id(p)] < pos[id(node)]
        assert len(tape) == len({id(n) for n in tape})

    def test_float32_default_and_float64_mode(self):
        assert Tensor([1.0]).dtype == np.float32
        with T.default_dtype(np.float64):
            assert Tensor([1.0]).dtype == np.float64
        assert T.get_default_dtype() is np.float32

    def test_deterministic_forward(self, rng):
        x, w = rng.normal(size=(2, 6, 6, 3)), rng.normal(size=(3, 3, 3, 4))
        a = T.conv2d(Tensor(x), Tensor(w)).data
        b = T.conv2d(Tensor(x), Tensor(w)).data
        assert a.tobytes() == b.tobytes()
