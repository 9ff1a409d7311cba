import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agln.layers import (SGD, BatchNorm2d, ConfigurationError, Conv2d, DataError, Initializer, OptimizerState,
                         bilinear_resize, conv2d, cross_entropy, poly_lr, resize_array, sgd_step)
from agln.tensor import ContractError, DimensionError, Tensor, backward, grad_check, mul, sum_all


def direct_conv3x3(x, w, b, stride):
    """Loop-nest cross-correlation with zero padding 1 (independent oracle)."""
    bsz, cin, h, wd = x.shape
    cout = w.shape[0]
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((bsz, cout, ho, wo))
    for n in range(bsz):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    out[n, o, i, j] = np.sum(xp[n, :, i * stride:i * stride + 3, j * stride:j * stride + 3] * w[o]) + b[o]
    return out


def direct_resize(x, oh, ow):
    """Per-output-pixel half-pixel bilinear sampling."""
    h, w = x.shape[-2:]
    out = np.zeros(x.shape[:-2] + (oh, ow))

    def taps(d, src, dst):
        s = min(max((d + 0.5) * src / dst - 0.5, 0.0), src - 1)
        i0 = int(math.floor(s))
        return i0, min(i0 + 1, src - 1), s - i0

    for i in range(oh):
        y0, y1, ly = taps(i, h, oh)
        for j in range(ow):
            x0, x1, lx = taps(j, w, ow)
            top = x[..., y0, x0] * (1 - lx) + x[..., y0, x1] * lx
            bot = x[..., y1, x0] * (1 - lx) + x[..., y1, x1] * lx
            out[..., i, j] = top * (1 - ly) + bot * ly
    return out


def make_conv(cin, cout, kind="standard_3x3", stride=1, seed=0):
    return Conv2d(cin, cout, kind, stride, name="c", init=Initializer(seed))


class TestConv:
    def test_pointwise_identity(self, f64, rng):
        c = make_conv(3, 3, "pointwise_1x1")
        c.weight.data[...] = np.eye(3).reshape(3, 3, 1, 1)
        c.bias.data[...] = 0
        x = rng.normal(size=(3, 4, 5))
        np.testing.assert_array_equal(conv2d(c, Tensor(x)).data, x)

    def test_delta_kernel_identity(self, f64, rng):
        c = make_conv(1, 1)
        c.weight.data[...] = 0
        c.weight.data[0, 0, 1, 1] = 1
        c.bias.data[...] = 0
        x = rng.normal(size=(2, 1, 5, 6))
        np.testing.assert_array_equal(conv2d(c, Tensor(x)).data, x)

    def test_ones_kernel_on_ones_image(self, f64):
        c = make_conv(1, 1)
        c.weight.data[...] = 1
        c.bias.data[...] = 0
        out = conv2d(c, Tensor(np.ones((1, 3, 3)))).data[0]
        assert out[1, 1] == 9 and out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4

    @pytest.mark.parametrize("stride", [1, 2])
    def test_matches_loop_oracle(self, f64, rng, stride):
        c = make_conv(3, 4, stride=stride, seed=3)
        x = rng.normal(size=(2, 3, 7, 6))
        ref = direct_conv3x3(x, c.weight.data, c.bias.data, stride)
        np.testing.assert_allclose(conv2d(c, Tensor(x)).data, ref, rtol=1e-12, atol=1e-12)

    def test_separable_matches_composition(self, f64, rng):
        c = make_conv(3, 2, "depthwise_separable_3x3", seed=5)
        x = rng.normal(size=(1, 3, 5, 5))
        dw = np.stack([direct_conv3x3(x[:, i:i + 1], c.depthwise.data[i:i + 1], [0.0], 1)[:, 0] for i in range(3)], 1)
        ref = np.einsum("oi,nihw->nohw", c.weight.data[:, :, 0, 0], dw) + c.bias.data[None, :, None, None]
        np.testing.assert_allclose(conv2d(c, Tensor(x)).data, ref, rtol=1e-12, atol=1e-12)

    def test_parameter_shapes(self):
        assert make_conv(2, 3, "pointwise_1x1").weight.shape == (3, 2, 1, 1)
        assert make_conv(2, 3).weight.shape == (3, 2, 3, 3)
        sep = make_conv(2, 3, "depthwise_separable_3x3")
        assert sep.depthwise.shape == (2, 1, 3, 3) and sep.weight.shape == (3, 2, 1, 1)
        # 1x1 conv 2->3 with bias: 9 parameters
        assert sum(p.size for p in make_conv(2, 3, "pointwise_1x1").parameters()) == 9

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError, match="channels"):
            conv2d(make_conv(2, 3), Tensor(np.ones((1, 4, 4, 4))))

    def test_bad_kind(self):
        with pytest.raises(ConfigurationError):
            make_conv(2, 3, "dilated_3x3")

    @pytest.mark.parametrize("kind,stride", [("standard_3x3", 1), ("standard_3x3", 2), ("pointwise_1x1", 1),
                                             ("depthwise_separable_3x3", 1), ("depthwise_separable_3x3", 2)])
    def test_gradients(self, f64, rng, kind, stride):
        c = make_conv(2, 3, kind, stride, seed=1)
        x = Tensor(rng.normal(size=(2, 2, 5, 4)), requires_grad=True)
        proj = Tensor(rng.normal(size=conv2d(c, x).shape))

        def loss(_):
            return sum_all(mul(conv2d(c, x), proj))

        for target in [x] + c.parameters():
            assert grad_check(loss, target, tol=1e-6).passed

    def test_single_precision_gradients(self, rng):
        c = make_conv(2, 2, seed=2)
        x = Tensor(rng.normal(size=(1, 2, 4, 4)).astype(np.float32), requires_grad=True)
        rep = grad_check(lambda _: sum_all(mul(conv2d(c, x), conv2d(c, x))), x, eps=1e-2, tol=1e-4)
        assert rep.max_rel_err < 1e-2  # float32 differences are noise-limited; see double-precision checks


class TestBatchNorm:
    def test_eval_identity_stats(self, f64, rng):
        bn = BatchNorm2d(3).eval()
        x = rng.normal(size=(2, 3, 2, 2))
        np.testing.assert_allclose(bn(Tensor(x)).data, x / np.sqrt(1 + 1e-5), rtol=1e-12)

    def test_constant_input_gives_shift(self, f64):
        bn = BatchNorm2d(2)
        bn.shift.data[...] = [0.5, -1.0]
        out = bn(Tensor(np.full((2, 2, 3, 3), 7.0))).data
        np.testing.assert_array_equal(out[:, 0], 0.5)
        np.testing.assert_array_equal(out[:, 1], -1.0)

    def test_two_point_normalization(self, f64):
        out = BatchNorm2d(1)(Tensor(np.array([-1.0, 1.0]).reshape(2, 1, 1, 1))).data.reshape(-1)
        np.testing.assert_allclose(out, [-1, 1], atol=1e-5)

    def test_running_stats_update(self, f64, rng):
        bn = BatchNorm2d(2)
        x = rng.normal(2.0, 3.0, size=(4, 2, 3, 3))
        bn(Tensor(x))
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3), ddof=1)
        np.testing.assert_allclose(bn.running_mean, 0.1 * mean, rtol=1e-12)
        np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * var, rtol=1e-12)
        assert np.all(bn.running_var >= 0)

    def test_eval_is_affine(self, f64, rng):
        bn = BatchNorm2d(2)
        bn(Tensor(rng.normal(size=(3, 2, 2, 2))))
        bn.eval()
        x, y = rng.normal(size=(1, 2, 2, 2)), rng.normal(size=(1, 2, 2, 2))
        f = lambda v: bn(Tensor(v)).data
        np.testing.assert_allclose(f(0.3 * x + 0.7 * y), 0.3 * f(x) + 0.7 * f(y), rtol=1e-10, atol=1e-12)

    @pytest.mark.parametrize("mode", ["train", "eval"])
    def test_gradients(self, f64, rng, mode):
        bn = BatchNorm2d(3)
        bn.gamma.data[...] = rng.uniform(0.5, 1.5, 3)
        bn.shift.data[...] = rng.normal(size=3)
        bn.train(mode == "train")
        x = Tensor(rng.normal(size=(2, 3, 2, 3)), requires_grad=True)
        proj = Tensor(rng.normal(size=x.shape))
        loss = lambda _: sum_all(mul(bn(x), proj))
        for target in (x, bn.gamma, bn.shift):
            assert grad_check(loss, target, tol=1e-6).passed


class TestResize:
    def test_spec_grid(self, f64):
        out = bilinear_resize(Tensor(np.array([[[0.0, 2.0], [4.0, 6.0]]])), 4, 4).data[0]
        np.testing.assert_array_equal(out, [[0, 0.5, 1.5, 2], [1, 1.5, 2.5, 3], [3, 3.5, 4.5, 5], [4, 4.5, 5.5, 6]])

    def test_identity_size(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4)).astype(np.float32))
        assert bilinear_resize(x, 3, 4) is x

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 9), st.integers(1, 9),
           st.floats(-100, 100, allow_nan=False))
    def test_constants_stay_constant(self, h, w, oh, ow, value):
        x = np.full((2, h, w), value, dtype=np.float32)
        out = resize_array(resize_array(x, oh, ow), h, w)
        assert np.all(resize_array(x, oh, ow) == np.float32(value))
        assert np.all(out == np.float32(value))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 7), st.integers(1, 7), st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**31))
    def test_matches_pointwise_oracle(self, h, w, oh, ow, seed):
        x = np.random.default_rng(seed).normal(size=(2, h, w))
        np.testing.assert_allclose(resize_array(x, oh, ow), direct_resize(x, oh, ow), rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("src,dst", [((2, 2), (4, 4)), ((4, 6), (2, 3)), ((3, 5), (7, 2)), ((1, 1), (3, 3))])
    def test_gradients(self, f64, rng, src, dst):
        x = Tensor(rng.normal(size=(2, 2) + src), requires_grad=True)
        proj = Tensor(rng.normal(size=(2, 2) + dst))
        assert grad_check(lambda _: sum_all(mul(bilinear_resize(x, *dst), proj)), x, tol=1e-6).passed

    def test_invalid_size(self):
        with pytest.raises(DimensionError):
            bilinear_resize(Tensor(np.ones((1, 2, 2))), 0, 3)


class TestCrossEntropy:
    def test_uniform_logits(self, f64):
        loss = cross_entropy(Tensor(np.zeros((1, 2, 2, 2))), np.zeros((1, 2, 2), dtype=np.int64))
        assert float(loss.data) == pytest.approx(math.log(2), abs=1e-12)

    def test_confident_pair(self, f64):
        loss = cross_entropy(Tensor(np.array([2.0, 0.0]).reshape(1, 2, 1, 1)), np.zeros((1, 1, 1), np.int64))
        assert float(loss.data) == pytest.approx(-math.log(math.e**2 / (math.e**2 + 1)), abs=1e-12)
        assert float(loss.data) == pytest.approx(0.12693, abs=1e-5)

    def test_all_ignored(self, f64):
        x = Tensor(np.ones((1, 3, 2, 2)), requires_grad=True)
        loss = cross_entropy(x, np.full((1, 2, 2), 255))
        assert float(loss.data) == 0.0
        backward(loss)
        np.testing.assert_array_equal(x.grad, 0)

    def test_bad_target(self):
        with pytest.raises(DataError, match="7"):
            cross_entropy(Tensor(np.zeros((1, 3, 1, 1))), np.full((1, 1, 1), 7))

    def test_nonnegative_and_gradients(self, f64, rng):
        x = Tensor(rng.normal(size=(2, 4, 3, 3)), requires_grad=True)
        tgt = rng.integers(0, 4, size=(2, 3, 3))
        tgt[0, 0, :] = 255
        assert float(cross_entropy(x, tgt).data) >= 0
        assert grad_check(lambda _: cross_entropy(x, tgt), x, tol=1e-6).passed


class TestOptimizer:
    def test_poly_examples(self):
        assert poly_lr(0.001, 0, 100, 0.9) == 0.001
        assert poly_lr(0.001, 100, 100, 0.9) == 0.0
        assert poly_lr(0.001, 50, 100, 0.9) == pytest.approx(5.359e-4, abs=1e-7)
        # 0.0005 * 0.75**0.9 = 0.0005 * exp(0.9 * ln 0.75) = 3.8594e-4 (a quoted 3.866e-4 is off in the 4th digit)
        assert poly_lr(0.0005, 25, 100, 0.9) == pytest.approx(0.0005 * math.exp(0.9 * math.log(0.75)), rel=1e-15)
        assert poly_lr(0.0005, 25, 100, 0.9) == pytest.approx(3.8594e-4, abs=1e-8)

    def test_poly_errors(self):
        with pytest.raises(ContractError):
            poly_lr(0.1, 11, 10)
        with pytest.raises(ConfigurationError):
            poly_lr(0.1, 0, 0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 10_000), st.floats(0.1, 3.0))
    def test_poly_monotone(self, total, power):
        lrs = [poly_lr(0.01, i, total, power) for i in range(0, total + 1, max(1, total // 50))]
        assert lrs[0] == 0.01 and all(a >= b >= 0 for a, b in zip(lrs, lrs[1:]))

    def test_sgd_update_rule(self, f64):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        state = OptimizerState(base_lr=0.1, momentum=0.9, weight_decay=0.01, total_iter=4, power=1.0)
        p.grad = np.array([0.5, 0.5])
        assert sgd_step(state, [p]) == 0.1
        v = np.array([0.5, 0.5]) + 0.01 * np.array([1.0, -2.0])
        np.testing.assert_allclose(p.data, [1.0, -2.0] - 0.1 * v)
        p.grad = np.array([0.0, 0.0])
        before = p.data.copy()
        assert sgd_step(state, [p]) == pytest.approx(0.075)
        v = 0.9 * v + 0.01 * before
        np.testing.assert_allclose(p.data, before - 0.075 * v)
        assert state.iter == 2

    def test_sgd_requires_grads(self):
        opt = SGD([Tensor(np.zeros(2), requires_grad=True)], total_iter=1)
        with pytest.raises(ContractError):
            opt.step()

    def test_zero_total(self):
        with pytest.raises(ConfigurationError):
            SGD([], total_iter=0)
