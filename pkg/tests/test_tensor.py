"""Reverse-mode autodiff core: forward values, gradients and the dump format."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from stereovol import tensor as T
from stereovol.tensor import ContractError, DimensionError, Tensor


def conv_loop_oracle(x, k, stride, pad):
    """Direct nested-loop zero-padded cross-correlation for (C, D, H, W) inputs."""
    c, d, h, w = x.shape
    co, _, kd, kh, kw = k.shape
    xp = np.zeros((c, d + 2 * pad[0], h + 2 * pad[1], w + 2 * pad[2]))
    xp[:, pad[0]:pad[0] + d, pad[1]:pad[1] + h, pad[2]:pad[2] + w] = x
    od = (d + 2 * pad[0] - kd) // stride[0] + 1
    oh = (h + 2 * pad[1] - kh) // stride[1] + 1
    ow = (w + 2 * pad[2] - kw) // stride[2] + 1
    out = np.zeros((co, od, oh, ow))
    for o in range(co):
        for i in range(od):
            for j in range(oh):
                for l in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for a in range(kd):
                            for b in range(kh):
                                for e in range(kw):
                                    acc += k[o, ci, a, b, e] * xp[ci, i * stride[0] + a, j * stride[1] + b,
                                                                  l * stride[2] + e]
                    out[o, i, j, l] = acc
    return out


class TestElementwise:
    def test_add(self):
        np.testing.assert_array_equal(T.elementwise("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])

    def test_tanh_at_origin(self):
        x = Tensor(0.0, requires_grad=True)
        y = T.tanh(x)
        T.backward(y)
        assert y.item() == 0.0
        assert x.grad == pytest.approx(1.0)

    def test_exp_matches_scalar_loop(self):
        a = np.random.default_rng(0).normal(size=(3, 4, 5))
        out = T.exp(Tensor(a)).data
        for idx in np.ndindex(a.shape):
            assert abs(out[idx] - math.exp(a[idx])) <= 1e-15 * max(1.0, math.exp(a[idx]))

    def test_scalar_operand(self):
        np.testing.assert_allclose((Tensor([1.0, 2.0]) * 3.0).data, [3.0, 6.0])
        np.testing.assert_allclose((2.0 - Tensor([1.0, 2.0])).data, [1.0, 0.0])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.elementwise("add", Tensor(np.zeros(2)), Tensor(np.zeros(3)))

    def test_unknown_op(self):
        with pytest.raises(ContractError):
            T.elementwise("frobnicate", Tensor(1.0))

    @pytest.mark.parametrize("kind", ["exp", "tanh", "sigmoid", "softplus", "sin", "cos", "square", "neg"])
    def test_unary_gradients(self, kind):
        x = np.random.default_rng(1).normal(size=(4, 3))
        assert T.grad_check(lambda t: T.tsum(T.elementwise(kind, t)), x) < 1e-8

    @pytest.mark.parametrize("kind", ["add", "sub", "mul", "div"])
    def test_binary_gradients(self, kind):
        rng = np.random.default_rng(2)
        b = Tensor(rng.uniform(0.5, 2.0, size=(3, 3)))
        w = Tensor(rng.normal(size=(3, 3)))
        assert T.grad_check(lambda t: T.tsum(T.elementwise(kind, t, b) * w), rng.normal(size=(3, 3))) < 1e-8
        assert T.grad_check(lambda t: T.tsum(T.elementwise(kind, b, t) * w), rng.uniform(0.5, 2, size=(3, 3))) < 1e-8


class TestConv:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).normal(size=(3, 4, 5))
        k = np.zeros((3, 3, 1, 1))
        k[np.arange(3), np.arange(3)] = 1.0
        np.testing.assert_array_equal(T.conv_nd(Tensor(x), Tensor(k)).data, x)

    def test_counting_case(self):
        out = T.conv_nd(Tensor(np.ones((1, 5, 5))), Tensor(np.ones((1, 1, 3, 3))))
        np.testing.assert_array_equal(out.data, np.full((1, 3, 3), 9.0))

    @pytest.mark.parametrize("strategy", ["input", "output"])
    @pytest.mark.parametrize("stride,pad", [((1, 1, 1), (0, 0, 0)), ((1, 2, 1), (1, 1, 1)), ((2, 1, 2), (1, 0, 1))])
    def test_3d_matches_loop_oracle(self, stride, pad, strategy, monkeypatch):
        monkeypatch.setattr(T, "CONV_STRATEGY", strategy)
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 4, 5, 4))
        k = rng.normal(size=(3, 2, 3, 2, 3))
        out = T.conv_nd(Tensor(x), Tensor(k), stride, pad).data
        np.testing.assert_allclose(out, conv_loop_oracle(x, k, stride, pad), atol=1e-12, rtol=0)

    def test_input_and_output_unfolding_agree(self, monkeypatch):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(2, 5, 4, 6)), requires_grad=True)
        k = Tensor(rng.normal(size=(3, 2, 3, 3, 3)), requires_grad=True)
        g = rng.normal(size=(3, 5, 2, 6))
        results = []
        for strategy in ("input", "output"):
            monkeypatch.setattr(T, "CONV_STRATEGY", strategy)
            T.zero_grad([x, k])
            out = T.conv_nd(x, k, (1, 2, 1), 1)
            T.backward(T.tsum(out * Tensor(g)))
            results.append((out.data, x.grad.copy(), k.grad.copy()))
        for a, b in zip(*results):
            np.testing.assert_allclose(a, b, atol=1e-12, rtol=0)

    def test_bias(self):
        x = Tensor(np.zeros((1, 3, 3)))
        out = T.conv_nd(x, Tensor(np.ones((2, 1, 3, 3))), padding=1, bias=Tensor(np.array([1.5, -2.0])))
        np.testing.assert_array_equal(out.data[0], 1.5)
        np.testing.assert_array_equal(out.data[1], -2.0)

    def test_kernel_too_large(self):
        with pytest.raises(DimensionError):
            T.conv_nd(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            T.conv_nd(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_gradients(self):
        rng = np.random.default_rng(4)
        k = Tensor(rng.normal(size=(2, 2, 3, 3, 3)))
        x = rng.normal(size=(2, 3, 4, 4))
        assert T.grad_check(lambda t: T.tsum(T.square(T.conv_nd(t, k, (1, 2, 1), 1))), x) < 1e-6
        assert T.grad_check(lambda t: T.tsum(T.square(T.conv_nd(Tensor(x), t, (1, 2, 1), 1))), k.data) < 1e-6


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_array_equal(T.softmax(Tensor(np.zeros(4))).data, 0.25)

    def test_saturated(self):
        np.testing.assert_allclose(T.softmax(Tensor([100.0, 0.0, 0.0])).data, [1.0, 0.0, 0.0], atol=1e-10)

    def test_shift_invariance(self):
        x = np.random.default_rng(0).normal(size=(5, 3))
        np.testing.assert_allclose(T.softmax(Tensor(x), 0).data, T.softmax(Tensor(x + 7.3), 0).data, atol=1e-12)


class TestSmoothL1:
    def test_zero(self):
        assert T.smooth_l1(Tensor([1.0, 2.0]), np.array([1.0, 2.0])).item() == 0.0

    def test_linear_branch(self):
        assert T.smooth_l1(Tensor([2.0]), np.array([0.0])).item() == pytest.approx(1.5)

    def test_quadratic_branch(self):
        assert T.smooth_l1(Tensor([0.5]), np.array([0.0])).item() == pytest.approx(0.125)

    def test_bad_beta(self):
        with pytest.raises(ContractError):
            T.smooth_l1(Tensor([0.5]), np.array([0.0]), beta=0.0)


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.zeros((2, 3, 4)), requires_grad=True)
        T.backward(T.tsum(x))
        np.testing.assert_array_equal(x.grad, 1.0)

    def test_square(self):
        x = Tensor(3.0, requires_grad=True)
        T.backward(x * x)
        assert x.grad == 6.0

    def test_shared_subexpression_accumulates(self):
        x = Tensor(2.0, requires_grad=True)
        y = x * x
        T.backward(y + y * x)  # 2x^2... d/dx (x^2 + x^3) = 2x + 3x^2
        assert x.grad == pytest.approx(16.0)

    def test_composite_conv_softmax_smooth_l1(self):
        rng = np.random.default_rng(5)
        k = Tensor(rng.normal(size=(3, 2, 3, 3)))
        target = rng.normal(size=(3, 5, 5))

        def fn(t):
            return T.smooth_l1(T.softmax(T.conv_nd(t, k, 1, 1), axis=0) * 4.0, target)

        assert T.grad_check(fn, rng.normal(size=(2, 5, 5)), 1e-5) < 1e-4

    def test_non_scalar_rejected(self):
        with pytest.raises(ContractError):
            T.backward(Tensor(np.zeros(3), requires_grad=True) * 2.0)

    def test_tape_order_is_topological(self):
        x = Tensor(1.0, requires_grad=True)
        y = T.exp(x) * x
        tape = T.backward(y)
        pos = {id(n): i for i, n in enumerate(tape.nodes)}
        for n in tape.nodes:
            for p in n._parents:
                assert pos[id(p)] < pos[id(n)]
        assert x in tape.leaves()

    def test_zero_grad(self):
        x = Tensor(np.ones(3), requires_grad=True)
        T.backward(T.tsum(x))
        T.zero_grad([x])
        assert x.grad is None or not np.any(x.grad)


class TestGradCheck:
    def test_sum_of_squares(self):
        assert T.grad_check(lambda t: T.tsum(t * t), np.random.default_rng(0).normal(size=6)) < 1e-8

    def test_soft_argmin_like(self):
        cands = Tensor(np.linspace(2.0, 9.0, 8))
        assert T.grad_check(lambda t: T.tsum(T.softmax(-t) * cands), np.random.default_rng(1).normal(size=8)) < 1e-4

    def test_eps_range(self):
        with pytest.raises(ContractError):
            T.grad_check(lambda t: T.tsum(t), np.zeros(2), eps=1e-2)


class TestStructural:
    def test_getitem_gradient(self):
        x = np.random.default_rng(0).normal(size=(4, 5))
        assert T.grad_check(lambda t: T.tsum(T.square(t[1:3, ::2])), x) < 1e-8

    def test_gather_weighted_gradient_repeated_indices(self):
        rng = np.random.default_rng(1)
        idx = rng.integers(0, 6, size=(7, 3))
        w = rng.normal(size=(7, 3))
        assert T.grad_check(lambda t: T.tsum(T.square(T.gather_weighted(t, idx, w))), rng.normal(size=(2, 6))) < 1e-8

    def test_concat_transpose_repeat(self):
        rng = np.random.default_rng(2)
        other = Tensor(rng.normal(size=(2, 3)))

        def fn(t):
            c = T.concat([t, other], axis=0)
            return T.tsum(T.square(T.transpose(c, (1, 0)) * T.repeat(T.reshape(t[0], (3, 1)), 4, axis=1)))

        assert T.grad_check(fn, rng.normal(size=(2, 3))) < 1e-8

    def test_clamp_and_minimum(self):
        x = np.array([-2.0, -0.3, 0.4, 1.7])
        np.testing.assert_allclose(T.clamp(Tensor(x), -1.0, 1.0).data, [-1.0, -0.3, 0.4, 1.0])
        np.testing.assert_allclose(T.minimum(Tensor(x), Tensor(np.zeros(4))).data, [-2.0, -0.3, 0.0, 0.0])


class TestDumpFormat:
    def test_round_trip(self, tmp_path):
        a = np.random.default_rng(0).normal(size=(2, 3, 4))
        T.save(tmp_path / "a.ten", Tensor(a))
        np.testing.assert_array_equal(T.load(tmp_path / "a.ten").data, a)

    def test_header(self):
        buf = T.dumps(Tensor(np.zeros((2, 5))))
        assert buf.startswith(b"dims: 2 5\n")
        assert len(buf) == len(b"dims: 2 5\n") + 80

    def test_truncated(self):
        with pytest.raises(ValueError):
            T.loads(T.dumps(Tensor(np.zeros(4)))[:-3])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)), arrays(np.float64, (3, 4), elements=st.floats(-5, 5)))
def test_product_rule_property(a, b):
    x = Tensor(a, requires_grad=True)
    y = Tensor(b, requires_grad=True)
    T.backward(T.tsum(x * y))
    np.testing.assert_array_equal(x.grad, b)
    np.testing.assert_array_equal(y.grad, a)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (6,), elements=st.floats(-30, 30)))
def test_softmax_is_distribution(x):
    p = T.softmax(Tensor(x)).data
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-12
