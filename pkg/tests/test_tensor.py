import math

import numpy as np
import pytest

import tensor as T
from tensor import Tensor

TOL = 1e-4
# Each gradient check runs on five independently drawn shapes.
SHAPE_SEEDS = [11, 23, 37, 41, 59]


def leaf(rng, shape, scale=1.0, offset=0.0):
    return Tensor(rng.normal(size=shape) * scale + offset, requires_grad=True)


def spaced(rng, shape, step=0.1):
    """Values at least ``step`` apart, so max-type kernels have no near ties."""
    n = int(np.prod(shape))
    return Tensor((rng.permutation(n) * step - n * step / 2).reshape(shape), requires_grad=True)


def away_from_zero(rng, shape, low=0.2, high=2.0):
    return Tensor(rng.uniform(low, high, size=shape) * rng.choice([-1, 1], size=shape), requires_grad=True)


def dims(rng, n, low=1, high=4):
    return tuple(int(v) for v in rng.integers(low, high + 1, size=n))


def weighted_sum(out, weights):
    return T.tensor_sum(T.mul(out, weights))


def check(fn, tensors, rng):
    """gradcheck of a weighted sum of ``fn()`` with random weights."""
    g = rng.normal(size=fn().shape)
    return T.gradcheck(lambda: weighted_sum(fn(), g), tensors)


class TestPrecision:
    def test_context_restores_previous_dtype(self):
        with T.precision('float64'):
            with T.precision('float32'):
                assert Tensor(1.0).data.dtype == np.float32
            assert Tensor(1.0).data.dtype == np.float64

    def test_unknown_precision_rejected(self):
        with pytest.raises(ValueError):
            T.set_precision('float16')


@pytest.mark.parametrize('seed', SHAPE_SEEDS)
class TestGradients:
    def test_broadcast_add_mul(self, f64, seed):
        rng = np.random.default_rng(seed)
        m, n = dims(rng, 2, 1, 5)
        a, b = leaf(rng, (m, n)), leaf(rng, (n,))
        assert check(lambda: a * b + a - b, [a, b], rng) < TOL

    @pytest.mark.parametrize('op', ['exp', 'log', 'sigmoid', 'log_sigmoid', 'power', 'div', 'relu'])
    def test_unary(self, f64, seed, op):
        rng = np.random.default_rng(seed)
        shape = dims(rng, 2, 1, 5)
        x = away_from_zero(rng, shape)
        pos = Tensor(rng.uniform(0.5, 2.0, size=shape), requires_grad=True)
        fns = {
            'exp': (lambda: T.exp(x), [x]),
            'log': (lambda: T.log(pos), [pos]),
            'sigmoid': (lambda: T.sigmoid(x), [x]),
            'log_sigmoid': (lambda: T.log_sigmoid(x * 4.0), [x]),
            'power': (lambda: T.power(pos, 2.5), [pos]),
            'div': (lambda: T.div(x, pos), [x, pos]),
            'relu': (lambda: T.relu(x), [x]),
        }
        fn, tensors = fns[op]
        assert check(fn, tensors, rng) < TOL

    def test_smooth_l1(self, f64, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(3, 9))
        # Keep clear of the kink at 1/9.
        mags = np.where(rng.random(n) < 0.5, rng.uniform(0.01, 0.09, n), rng.uniform(0.15, 2.0, n))
        x = Tensor(mags * rng.choice([-1, 1], size=n), requires_grad=True)
        assert check(lambda: T.smooth_l1(x, 1.0 / 9.0), [x], rng) < TOL

    def test_reshape_transpose_concat_take(self, f64, seed):
        rng = np.random.default_rng(seed)
        r, c1, c2 = dims(rng, 3)
        a, b = leaf(rng, (r, c1)), leaf(rng, (r, c2))
        n = r * (c1 + c2)
        idx = rng.integers(0, n, size=int(rng.integers(1, 2 * n)))

        def fn():
            joined = T.concat([a, b], axis=1)
            flat = T.reshape(T.transpose(joined, (1, 0)), (n,))
            return T.take(flat, idx, axis=0)
        assert check(fn, [a, b], rng) < TOL

    def test_sum_mean_over_axes(self, f64, seed):
        rng = np.random.default_rng(seed)
        x = leaf(rng, dims(rng, 3))
        assert check(lambda: T.tensor_mean(T.tensor_sum(x, axis=0), axis=1), [x], rng) < TOL

    def test_max_over(self, f64, seed):
        rng = np.random.default_rng(seed)
        x = spaced(rng, dims(rng, 3, 1, 4))
        assert check(lambda: T.max_over(x, (1, 2)), [x], rng) < TOL

    def test_mlp(self, f64, seed):
        rng = np.random.default_rng(seed)
        n, d0, d1, d2 = dims(rng, 4, 1, 5)
        x = leaf(rng, (n, d0))
        w1, b1 = leaf(rng, (d0, d1)), leaf(rng, (d1,))
        w2, b2 = leaf(rng, (d1, d2)), leaf(rng, (d2,), offset=0.5)
        assert check(lambda: T.mlp(x, [(w1, b1), (w2, b2)]), [x, w1, b1, w2, b2], rng) < TOL

    def test_conv2d(self, f64, seed):
        rng = np.random.default_rng(seed)
        cin, cout = dims(rng, 2, 1, 3)
        h, w = dims(rng, 2, 3, 7)
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        x, k, b = leaf(rng, (cin, h, w)), leaf(rng, (cout, cin, 3, 3)), leaf(rng, (cout,))
        assert check(lambda: T.conv2d(x, k, b, stride, pad), [x, k, b], rng) < TOL

    def test_tconv2d(self, f64, seed):
        rng = np.random.default_rng(seed)
        cin, cout = dims(rng, 2, 1, 3)
        h, w = dims(rng, 2, 1, 4)
        size, stride = int(rng.integers(2, 4)), int(rng.integers(1, 3))
        x, k, b = leaf(rng, (cin, h, w)), leaf(rng, (cin, cout, size, size)), leaf(rng, (cout,))
        assert check(lambda: T.tconv2d(x, k, b, stride=stride), [x, k, b], rng) < TOL

    def test_batchnorm_training(self, f64, seed):
        rng = np.random.default_rng(seed)
        c = int(rng.integers(1, 4))
        h, w = dims(rng, 2, 2, 5)
        x, gamma, beta = leaf(rng, (c, h, w)), leaf(rng, (c,), offset=1.0), leaf(rng, (c,))
        mean, var = np.zeros(c), np.ones(c)
        assert check(lambda: T.batchnorm2d(x, gamma, beta, mean, var, training=True), [x, gamma, beta], rng) < TOL

    def test_avg_pool(self, f64, seed):
        rng = np.random.default_rng(seed)
        c, a, b = dims(rng, 3, 1, 3)
        x = leaf(rng, (c, 2 * a, 2 * b))
        assert check(lambda: T.avg_pool2d(x, 2), [x], rng) < TOL

    def test_attention_pools(self, f64, seed):
        rng = np.random.default_rng(seed)
        x = spaced(rng, dims(rng, 3, 2, 5))
        ga, gm = rng.normal(size=x.shape[0]), rng.normal(size=x.shape[0])
        ca, cm = rng.normal(size=x.shape[1:]), rng.normal(size=x.shape[1:])

        def fn():
            avg, mx = T.pooled_descriptors(x)
            cavg, cmax = T.channel_pool(x)
            return (weighted_sum(avg, ga) + weighted_sum(mx, gm)
                    + weighted_sum(cavg, ca) + weighted_sum(cmax, cm))
        assert T.gradcheck(fn, [x]) < TOL

    def test_bilinear_sample(self, f64, seed):
        rng = np.random.default_rng(seed)
        c = int(rng.integers(1, 4))
        h, w = dims(rng, 2, 2, 6)
        x = leaf(rng, (c, h, w))
        uv = np.column_stack([rng.uniform(0, h - 1, 6), rng.uniform(0, w - 1, 6)])
        assert check(lambda: T.bilinear_sample(x, uv), [x], rng) < TOL

    def test_masked_max(self, f64, seed):
        rng = np.random.default_rng(seed)
        p, n, c = dims(rng, 3, 1, 5)
        x = spaced(rng, (p, n, c))
        mask = rng.random((p, n)) < 0.6
        mask[:, 0] = True
        assert check(lambda: T.masked_max(x, mask), [x], rng) < TOL

    def test_scatter(self, f64, seed):
        rng = np.random.default_rng(seed)
        h, w = dims(rng, 2, 2, 5)
        p, c = int(rng.integers(1, h * w + 1)), int(rng.integers(1, 4))
        cells = rng.choice(h * w, size=p, replace=False)
        coords = np.column_stack([cells // w, cells % w])
        x = leaf(rng, (p, c))
        assert check(lambda: T.scatter_to_grid(x, coords, (h, w)), [x], rng) < TOL


class TestElementwise:
    def test_sigmoid_is_finite_for_large_inputs(self):
        out = T.sigmoid(Tensor([-1000.0, 0.0, 1000.0])).data
        assert np.allclose(out, [0.0, 0.5, 1.0])

    def test_log_clamps_zero(self):
        assert np.isfinite(T.log(Tensor([0.0])).data).all()

    def test_log_sigmoid_keeps_gradient_when_saturated(self, f64):
        x = Tensor([-40.0, 0.0, 3.0], requires_grad=True)
        out = T.log_sigmoid(x)
        assert np.allclose(out.data, np.log(T.sigmoid(Tensor([-40.0, 0.0, 3.0])).data))
        T.tensor_sum(out).backward()
        assert np.allclose(x.grad, [1.0, 0.5, 1.0 / (1.0 + math.exp(3.0))])

    def test_smooth_l1_values(self):
        out = T.smooth_l1(Tensor([0.5, -0.5, 0.05]), 1.0 / 9.0).data
        assert out[0] == pytest.approx(0.444444, abs=1e-6)
        assert out[1] == pytest.approx(0.444444, abs=1e-6)
        assert out[2] == pytest.approx(0.5 * 0.05 ** 2 * 9.0)

    def test_backward_needs_scalar(self, rng):
        x = leaf(rng, (3,))
        with pytest.raises(ValueError):
            (x * 2.0).backward()

    def test_gradients_accumulate_until_zeroed(self, f64):
        x = Tensor([1.0, 2.0], requires_grad=True)
        T.tensor_sum(x * 3.0).backward()
        T.tensor_sum(x * 3.0).backward()
        assert np.allclose(x.grad, [6.0, 6.0])
        x.zero_grad()
        assert x.grad is None


class TestDense:
    def test_linear_matches_numpy(self, rng):
        x, w, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 2)), rng.normal(size=(2,))
        assert np.allclose(T.linear(Tensor(x), Tensor(w), Tensor(b)).data, x @ w + b)

    def test_unknown_activation(self, rng):
        with pytest.raises(ValueError):
            T.mlp(Tensor(np.ones((1, 2))), [], activation='tanh')


class TestSpatial:
    def test_conv2d_matches_direct_loop(self, f64, rng):
        x, w, b = rng.normal(size=(2, 5, 6)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=(3,))
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, pad=1).data
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        ref = np.zeros((3, 5, 6))
        for o in range(3):
            for i in range(5):
                for j in range(6):
                    ref[o, i, j] = np.sum(xp[:, i:i + 3, j:j + 3] * w[o]) + b[o]
        assert np.allclose(out, ref)

    def test_conv2d_rejects_channel_mismatch(self, rng):
        with pytest.raises(ValueError):
            T.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))

    def test_tconv2d_is_adjoint_of_conv2d(self, f64, rng):
        w = rng.normal(size=(3, 2, 3, 3))
        x = rng.normal(size=(2, 7, 7))
        y = rng.normal(size=(3, 3, 3))
        lhs = np.sum(T.conv2d(Tensor(x), Tensor(w), stride=2).data * y)
        rhs = np.sum(x * T.tconv2d(Tensor(y), Tensor(w), stride=2).data)
        assert lhs == pytest.approx(rhs)

    def test_batchnorm_normalises_and_tracks_running_stats(self, f64, rng):
        x = Tensor(rng.normal(3.0, 2.0, size=(2, 8, 8)))
        mean, var = np.zeros(2), np.ones(2)
        out = T.batchnorm2d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), mean, var, training=True, momentum=0.5)
        assert np.allclose(out.data.mean(axis=(1, 2)), 0.0, atol=1e-9)
        assert np.allclose(mean, 0.5 * x.data.mean(axis=(1, 2)))

    def test_batchnorm_eval_uses_running_stats(self, f64):
        x = Tensor(np.full((1, 2, 2), 5.0))
        out = T.batchnorm2d(x, Tensor([2.0]), Tensor([1.0]), np.array([3.0]), np.array([4.0]),
                            training=False, eps=0.0)
        assert np.allclose(out.data, 2.0 * (5.0 - 3.0) / 2.0 + 1.0)

    def test_avg_pool(self, f64, rng):
        x = leaf(rng, (2, 4, 6))
        out = T.avg_pool2d(x, 2)
        assert out.shape == (2, 2, 3)
        assert out.data[1, 0, 2] == pytest.approx(x.data[1, 0:2, 4:6].mean())
        with pytest.raises(ValueError):
            T.avg_pool2d(Tensor(np.ones((1, 3, 4))), 2)

    def test_attention_pools(self, rng):
        x = Tensor(rng.normal(size=(3, 4, 5)))
        avg, mx = T.pooled_descriptors(x)
        assert np.allclose(avg.data, x.data.mean(axis=(1, 2)))
        assert np.allclose(mx.data, x.data.max(axis=(1, 2)))
        cavg, cmax = T.channel_pool(x)
        assert cavg.shape == (4, 5)
        assert np.allclose(cmax.data, x.data.max(axis=0))

    def test_bilinear_sample_values(self, f64):
        x = Tensor(np.arange(12, dtype=float).reshape(1, 3, 4))
        out = T.bilinear_sample(x, np.array([[1.0, 2.0], [0.5, 0.5], [-5.0, 0.0]])).data[:, 0]
        assert out[0] == pytest.approx(6.0)
        assert out[1] == pytest.approx((0 + 1 + 4 + 5) / 4.0)
        assert out[2] == 0.0


class TestPillarKernels:
    def test_masked_max_ignores_padding(self):
        x = Tensor(np.array([[[1.0], [9.0], [3.0]], [[-2.0], [-1.0], [-5.0]]]))
        mask = np.array([[True, False, True], [False, False, False]])
        assert np.allclose(T.masked_max(x, mask).data, [[3.0], [0.0]])

    def test_scatter_places_pillars(self, f64, rng):
        x = leaf(rng, (2, 3))
        coords = np.array([[0, 1], [2, 3]])
        canvas = T.scatter_to_grid(x, coords, (3, 4))
        assert canvas.shape == (3, 3, 4)
        assert np.allclose(canvas.data[:, 2, 3], x.data[1])
        assert np.count_nonzero(canvas.data.sum(axis=0)) <= 2


class TestGradcheck:
    def test_relative_error_is_zero_for_equal_arrays(self):
        a = np.array([1.0, -2.0])
        assert T.relative_error(a, a) == 0.0
