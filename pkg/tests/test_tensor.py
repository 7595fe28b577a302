"""Numeric core: layer primitives, tape replay, finite-difference oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from egal.tensor import (
    ContractError,
    DimensionError,
    Tape,
    Tensor,
    add,
    avg_pool2d,
    backward,
    channel_mix,
    const_matmul,
    conv2d,
    cross_entropy,
    dense,
    divide,
    divide_rows,
    global_avg_pool,
    grad_check,
    mean_batch,
    mul,
    mul_const,
    pairwise_sqdist,
    positive_or_one,
    relu,
    scale,
    softmax,
    spatial_max,
    sum_all,
    sum_spatial,
    take_batch,
    take_column,
    upsample_bilinear,
)


def test_tensor_is_float64_row_major():
    t = Tensor([[1, 2], [3, 4]])
    assert t.data.dtype == np.float64
    assert t.data.flags["C_CONTIGUOUS"]
    assert t.shape == (2, 2)


class TestConv2d:
    def test_identity_kernel(self):
        x = Tensor(np.random.default_rng(0).normal(size=(1, 5, 5)))
        k = Tensor(np.ones((1, 1, 1, 1)))
        b = Tensor(np.zeros(1))
        y = conv2d(None, x, k, b)
        np.testing.assert_array_equal(y.data, x.data)

    def test_zero_kernel_zero_output(self):
        x = Tensor(np.random.default_rng(1).normal(size=(2, 6, 6)))
        k = Tensor(np.zeros((3, 2, 3, 3)))
        b = Tensor(np.zeros(3))
        y = conv2d(None, x, k, b, padding=1)
        assert y.shape == (3, 6, 6)
        np.testing.assert_array_equal(y.data, 0.0)

    def test_hand_convolution_all_fours(self):
        # ones(1,3,3) * ones(1,1,2,2): every 2x2 window sums to 4
        x = Tensor(np.ones((1, 3, 3)))
        k = Tensor(np.ones((1, 1, 2, 2)))
        b = Tensor(np.zeros(1))
        y = conv2d(None, x, k, b, stride=1, padding=0)
        assert y.shape == (1, 2, 2)
        np.testing.assert_allclose(y.data, 4.0)

    def test_output_extent_formula(self):
        x = Tensor(np.zeros((1, 9, 9)))
        k = Tensor(np.zeros((2, 1, 3, 3)))
        b = Tensor(np.zeros(2))
        y = conv2d(None, x, k, b, stride=2, padding=1)
        # (9 + 2 - 3)/2 + 1 = 5
        assert y.shape == (2, 5, 5)

    def test_channel_mismatch_names_axis(self):
        x = Tensor(np.zeros((2, 4, 4)))
        k = Tensor(np.zeros((1, 3, 2, 2)))
        with pytest.raises(DimensionError, match="channel"):
            conv2d(None, x, k, Tensor(np.zeros(1)))

    def test_stride_misfit_names_axis(self):
        x = Tensor(np.zeros((1, 6, 6)))
        k = Tensor(np.zeros((1, 1, 3, 3)))
        with pytest.raises(DimensionError, match="height"):
            conv2d(None, x, k, Tensor(np.zeros(1)), stride=2)

    def test_matches_naive_loops(self):
        rng = np.random.default_rng(7)
        xd = rng.normal(size=(2, 3, 7, 9))
        kd = rng.normal(size=(4, 3, 3, 3))
        bd = rng.normal(size=4)
        stride, pad = 2, 1
        y = conv2d(None, Tensor(xd), Tensor(kd), Tensor(bd), stride=stride, padding=pad)

        xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        ho = (7 + 2 * pad - 3) // stride + 1
        wo = (9 + 2 * pad - 3) // stride + 1
        ref = np.zeros((2, 4, ho, wo))
        for n in range(2):
            for o in range(4):
                for i in range(ho):
                    for j in range(wo):
                        patch = xp[n, :, i * stride:i * stride + 3, j * stride:j * stride + 3]
                        ref[n, o, i, j] = (patch * kd[o]).sum() + bd[o]
        np.testing.assert_allclose(y.data, ref, atol=1e-12)


class TestSoftmaxCrossEntropy:
    def test_uniform_by_symmetry(self):
        y = softmax(None, Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(y.data, 1.0 / 3.0, atol=1e-15)

    def test_two_logits_direct_evaluation(self):
        # softmax([1,2]) = [1/(1+e), e/(1+e)]
        y = softmax(None, Tensor([1.0, 2.0]))
        e = math.exp(1.0)
        np.testing.assert_allclose(y.data, [1.0 / (1.0 + e), e / (1.0 + e)], atol=1e-12)
        np.testing.assert_allclose(y.data, [0.26894, 0.73106], atol=1e-5)

    def test_large_logits_stable(self):
        y = softmax(None, Tensor([1000.0, 1000.0, 999.0]))
        assert np.all(np.isfinite(y.data))
        assert abs(y.data.sum() - 1.0) < 1e-12

    def test_empty_vector_rejected(self):
        with pytest.raises(DimensionError):
            softmax(None, Tensor(np.zeros(0)))

    def test_cross_entropy_certain_prediction_is_zero(self):
        loss = cross_entropy(None, Tensor([[0.0, 1.0, 0.0]]), [1])
        assert loss.item() == 0.0

    def test_cross_entropy_is_neg_log_prob(self):
        loss = cross_entropy(None, Tensor([[0.25, 0.75]]), [0])
        np.testing.assert_allclose(loss.item(), -math.log(0.25), atol=1e-15)

    def test_cross_entropy_target_out_of_range(self):
        with pytest.raises(ContractError):
            cross_entropy(None, Tensor([[0.5, 0.5]]), [2])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(min_value=-200, max_value=200), min_size=1, max_size=8))
    def test_softmax_simplex_property(self, logits):
        y = softmax(None, Tensor(logits))
        assert np.all(y.data >= 0.0)
        assert abs(y.data.sum() - 1.0) < 1e-12


class TestReluAndBackward:
    def test_relu_values(self):
        y = relu(None, Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(y.data, [0.0, 0.0, 2.0])

    def test_all_negative_zero_backward(self):
        x = Tensor([-3.0, -1.0, -0.5])
        tape = Tape()
        tape.watch(x)
        out = sum_all(tape, relu(tape, x))
        backward(tape, out)
        np.testing.assert_array_equal(out.data, 0.0)
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 0.0])

    def test_relu_gradient_matches_finite_differences(self):
        x = Tensor([-1.0, 3.0])

        def f(tape, params):
            return sum_all(tape, relu(tape, params[0]))

        assert grad_check(f, x, h=1e-6) < 1e-9
        tape = Tape()
        tape.watch(x)
        x.grad = None
        backward(tape, f(tape, [x]))
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])

    def test_identity_gradient(self):
        x = Tensor(5.0)
        tape = Tape()
        tape.watch(x)
        backward(tape, x)
        np.testing.assert_array_equal(x.grad, 1.0)

    def test_square_gradient_at_three(self):
        x = Tensor(3.0)
        tape = Tape()
        tape.watch(x)
        y = mul(tape, x, x)
        backward(tape, y)
        np.testing.assert_allclose(x.grad, 6.0, atol=1e-15)

    def test_backward_rejects_non_scalar(self):
        x = Tensor([1.0, 2.0])
        tape = Tape()
        tape.watch(x)
        y = relu(tape, x)
        with pytest.raises(ContractError):
            backward(tape, y)

    def test_backward_rejects_foreign_tensor(self):
        x = Tensor([1.0])
        tape = Tape()
        tape.watch(x)
        sum_all(tape, x)
        with pytest.raises(ContractError):
            backward(tape, Tensor(0.0))

    def test_unreached_leaf_gets_zero_gradient(self):
        x, unused = Tensor([1.0, 2.0]), Tensor([[3.0]])
        tape = Tape()
        tape.watch(x, unused)
        backward(tape, sum_all(tape, x))
        np.testing.assert_array_equal(unused.grad, [[0.0]])


class TestGradCheckThresholds:
    def test_linear_function(self):
        c = np.array([1.5, -2.0, 0.25])

        def f(tape, params):
            return sum_all(tape, mul_const(tape, params[0], c))

        assert grad_check(f, Tensor([0.3, 0.7, -1.1])) < 1e-9

    def test_quadratic_function(self):
        def f(tape, params):
            x = params[0]
            return sum_all(tape, mul(tape, x, x))

        assert grad_check(f, Tensor([0.5, -1.25, 2.0])) < 1e-7

    def test_two_layer_cnn_about_100_params(self):
        rng = np.random.default_rng(42)
        k1 = Tensor(rng.normal(scale=0.5, size=(2, 1, 3, 3)))
        b1 = Tensor(rng.normal(scale=0.1, size=2))
        k2 = Tensor(rng.normal(scale=0.5, size=(3, 2, 3, 3)))
        b2 = Tensor(rng.normal(scale=0.1, size=3))
        w = Tensor(rng.normal(scale=0.5, size=(3, 5)))
        bo = Tensor(rng.normal(scale=0.1, size=5))
        params = [k1, b1, k2, b2, w, bo]
        assert sum(p.size for p in params) == 97
        x = rng.normal(size=(1, 1, 6, 6))

        def f(tape, ps):
            h1 = relu(tape, conv2d(tape, Tensor(x), ps[0], ps[1]))
            h2 = relu(tape, conv2d(tape, h1, ps[2], ps[3]))
            emb = global_avg_pool(tape, h2)
            logits = dense(tape, emb, ps[4], ps[5])
            return cross_entropy(tape, softmax(tape, logits), [2])

        assert grad_check(f, params) < 1e-3


# one finite-difference check per remaining primitive, scalarized via sum_all
PRIMITIVE_CASES = {}


def _case(name):
    def deco(fn):
        PRIMITIVE_CASES[name] = fn
        return fn
    return deco


@_case("conv2d")
def _conv_case(rng):
    x = Tensor(rng.normal(size=(2, 2, 5, 5)))
    k = Tensor(rng.normal(size=(3, 2, 3, 3)))
    b = Tensor(rng.normal(size=3))

    def f(tape, ps):
        return sum_all(tape, conv2d(tape, ps[0], ps[1], ps[2], stride=2, padding=1))

    return f, [x, k, b]


@_case("avg_pool2d")
def _pool_case(rng):
    x = Tensor(rng.normal(size=(2, 3, 4, 4)))

    def f(tape, ps):
        return sum_all(tape, mul(tape, avg_pool2d(tape, ps[0]), avg_pool2d(tape, ps[0])))

    return f, [x]


@_case("global_avg_pool")
def _gap_case(rng):
    x = Tensor(rng.normal(size=(2, 3, 4, 4)))

    def f(tape, ps):
        g = global_avg_pool(tape, ps[0])
        return sum_all(tape, mul(tape, g, g))

    return f, [x]


@_case("dense")
def _dense_case(rng):
    x = Tensor(rng.normal(size=(3, 4)))
    w = Tensor(rng.normal(size=(4, 2)))
    b = Tensor(rng.normal(size=2))

    def f(tape, ps):
        y = dense(tape, ps[0], ps[1], ps[2])
        return sum_all(tape, mul(tape, y, y))

    return f, [x, w, b]


@_case("softmax_cross_entropy")
def _sce_case(rng):
    x = Tensor(rng.normal(size=(3, 4)))

    def f(tape, ps):
        return cross_entropy(tape, softmax(tape, ps[0]), [0, 2, 3])

    return f, [x]


@_case("upsample_bilinear")
def _ups_case(rng):
    x = Tensor(rng.normal(size=(2, 3, 3)))

    def f(tape, ps):
        y = upsample_bilinear(tape, ps[0], 7, 5)
        return sum_all(tape, mul(tape, y, y))

    return f, [x]


@_case("channel_mix")
def _mix_case(rng):
    x = Tensor(rng.normal(size=(2, 3, 4, 4)))
    w = rng.normal(size=(2, 3))

    def f(tape, ps):
        y = channel_mix(tape, ps[0], w)
        return sum_all(tape, mul(tape, y, y))

    return f, [x]


@_case("spatial_ops")
def _spatial_case(rng):
    x = Tensor(rng.normal(size=(2, 3, 3)) + np.linspace(0, 1, 18).reshape(2, 3, 3))

    def f(tape, ps):
        s = sum_spatial(tape, ps[0])
        m = spatial_max(tape, ps[0])
        return mean_batch(tape, divide(tape, s, positive_or_one(tape, m)))

    return f, [x]


@_case("divide_rows")
def _divrows_case(rng):
    x = Tensor(rng.normal(size=(2, 3, 3)))
    s = Tensor(rng.uniform(0.5, 2.0, size=2))

    def f(tape, ps):
        return sum_all(tape, divide_rows(tape, ps[0], ps[1]))

    return f, [x, s]


@_case("gather_ops")
def _gather_case(rng):
    x = Tensor(rng.normal(size=(4, 3)))

    def f(tape, ps):
        sub = take_batch(tape, ps[0], [0, 2, 2])
        col = take_column(tape, sub, [1, 0, 2])
        return sum_all(tape, mul(tape, col, col))

    return f, [x]


@_case("pairwise_sqdist")
def _sqdist_case(rng):
    q = Tensor(rng.normal(size=(3, 4)))
    p = Tensor(rng.normal(size=(2, 4)))

    def f(tape, ps):
        d = pairwise_sqdist(tape, ps[0], ps[1])
        return cross_entropy(tape, softmax(tape, scale(tape, d, -1.0)), [0, 1, 0])

    return f, [q, p]


@_case("const_matmul")
def _cmm_case(rng):
    m = rng.normal(size=(2, 3))
    x = Tensor(rng.normal(size=(3, 4)))

    def f(tape, ps):
        y = const_matmul(tape, m, ps[0])
        return sum_all(tape, mul(tape, y, y))

    return f, [x]


@_case("scalar_arith")
def _arith_case(rng):
    a = Tensor(rng.normal(size=(3,)))
    b = Tensor(rng.normal(size=(3,)))

    def f(tape, ps):
        y = add(tape, scale(tape, ps[0], 2.5), mul(tape, ps[0], ps[1]))
        return mean_batch(tape, y)

    return f, [a, b]


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients_match_finite_differences(name):
    fn, params = PRIMITIVE_CASES[name](np.random.default_rng(hash(name) % 2**32))
    assert grad_check(fn, params) < 1e-3


class TestBilinearUpsample:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 4, 5))
        got = upsample_bilinear(None, Tensor(x), 9, 7).data

        ref = np.zeros((2, 9, 7))
        for i in range(9):
            for j in range(7):
                sy = i * (4 - 1) / (9 - 1)
                sx = j * (5 - 1) / (7 - 1)
                y0, x0 = min(int(sy), 2), min(int(sx), 3)
                fy, fx = sy - y0, sx - x0
                ref[:, i, j] = ((1 - fy) * (1 - fx) * x[:, y0, x0]
                                + (1 - fy) * fx * x[:, y0, x0 + 1]
                                + fy * (1 - fx) * x[:, y0 + 1, x0]
                                + fy * fx * x[:, y0 + 1, x0 + 1])
        np.testing.assert_allclose(got, ref, atol=1e-12)

    def test_corners_are_preserved(self):
        x = np.arange(6, dtype=float).reshape(1, 2, 3)
        up = upsample_bilinear(None, Tensor(x), 8, 8).data
        assert up[0, 0, 0] == x[0, 0, 0]
        assert up[0, 0, -1] == x[0, 0, -1]
        assert up[0, -1, 0] == x[0, -1, 0]
        assert up[0, -1, -1] == x[0, -1, -1]


def test_avg_pool_requires_divisible_extent():
    with pytest.raises(DimensionError):
        avg_pool2d(None, Tensor(np.zeros((1, 1, 5, 4))))


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(123)
        x = Tensor(rng.normal(size=(2, 3, 8, 8)))
        k = Tensor(rng.normal(size=(4, 3, 3, 3)))
        b = Tensor(rng.normal(size=4))
        tape = Tape()
        tape.watch(x, k, b)
        y = relu(tape, conv2d(tape, x, k, b, padding=1))
        loss = sum_all(tape, mul(tape, y, y))
        backward(tape, loss)
        return loss.data.tobytes(), k.grad.tobytes()

    assert run() == run()


def test_tape_replays_in_reverse_order():
    order = []
    tape = Tape()
    a = Tensor(1.0)
    tape.watch(a)
    for i in range(4):
        a = scale(tape, a, 2.0)
        tape.record(a, lambda dy, i=i: order.append(i))
    backward(tape, a)
    assert order == [3, 2, 1, 0]
