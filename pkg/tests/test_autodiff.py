"""Dense runtime: op correctness against independent oracles plus tape gradient checks."""

import numpy as np
import pytest

from cdrecon import autodiff as ad
from cdrecon.errors import CheckFailedError, InvalidArgumentError


def conv2d_loop_oracle(x, w, b, stride, padding):
    """Direct nested-loop convolution; independent of the im2col path."""
    cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((cout, ho, wo))
    for co in range(cout):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for ci in range(cin):
                    for a in range(kh):
                        for bb in range(kw):
                            acc += xp[ci, i * stride + a, j * stride + bb] * w[co, ci, a, bb]
                out[co, i, j] = acc + (b[co] if b is not None else 0.0)
    return out


class TestConv2d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = ad.constant(rng.normal(size=(3, 5, 4)))
        w = np.zeros((3, 3, 1, 1))
        for c in range(3):
            w[c, c, 0, 0] = 1.0
        out = ad.conv2d(x, ad.constant(w))
        assert np.array_equal(out.data, x.data)

    def test_zero_input(self):
        rng = np.random.default_rng(1)
        x = ad.constant(np.zeros((2, 6, 6)))
        w = ad.constant(rng.normal(size=(4, 2, 3, 3)))
        out = ad.conv2d(x, w, padding=1)
        assert np.all(out.data == 0.0)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 4, 5))
        w = rng.normal(size=(2, 1, 3, 3))
        b = rng.normal(size=2)
        for stride, padding in [(1, 0), (1, 1), (2, 1)]:
            got = ad.conv2d(ad.constant(x), ad.constant(w), ad.constant(b), stride, padding)
            want = conv2d_loop_oracle(x, w, b, stride, padding)
            assert np.abs(got.data - want).max() < 1e-10

    def test_shape_mismatch_raises(self):
        x = ad.constant(np.zeros((2, 4, 4)))
        w = ad.constant(np.zeros((3, 5, 3, 3)))
        with pytest.raises(InvalidArgumentError):
            ad.conv2d(x, w)

    def test_even_kernel_raises(self):
        with pytest.raises(InvalidArgumentError):
            ad.conv2d(ad.constant(np.zeros((1, 4, 4))), ad.constant(np.zeros((1, 1, 2, 2))))


class TestBasicOps:
    def test_sigmoid_neuron_analytic_gradient(self):
        x = 0.37
        p = ad.parameter(np.array([x]))
        with ad.Tape() as tape:
            out = ad.tsum(ad.sigmoid(p))
            tape.backward(out)
        s = 1.0 / (1.0 + np.exp(-x))
        assert abs(p.grad[0] - s * (1 - s)) < 1e-7

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        x = ad.constant(rng.normal(size=(7, 5)) * 10)
        p = ad.softmax(x, axis=1)
        assert np.allclose(p.data.sum(axis=1), 1.0)

    def test_concat_roundtrip(self):
        rng = np.random.default_rng(4)
        a, b = rng.normal(size=(3, 2)), rng.normal(size=(3, 4))
        out = ad.concat([ad.constant(a), ad.constant(b)], axis=1)
        assert np.array_equal(out.data[:, :2], a)
        assert np.array_equal(out.data[:, 2:], b)

    def test_detached_tensor_grad_never_written(self):
        p = ad.parameter(np.ones(3))
        d = p.detach()
        with ad.Tape() as tape:
            out = ad.tsum(ad.mul(d, ad.constant(np.ones(3) * 2)))
            tape.backward(out)
        assert d.grad is None and p.grad is None

    def test_no_tape_means_no_graph(self):
        p = ad.parameter(np.ones(3))
        out = ad.mul(p, p)
        assert not out.requires_grad

    def test_ce_uniform_logits_is_log_nc(self):
        logits = ad.constant(np.zeros((10, 7)))
        ce = ad.softmax_cross_entropy(logits, np.arange(10) % 7)
        assert abs(ce.item() - np.log(7)) < 1e-12

    def test_bce_closed_form(self):
        x = np.array([0.0])
        got = ad.bce_with_logits(ad.constant(x), np.array([1.0]), pos_weight=1.0)
        assert abs(got.item() - np.log(2)) < 1e-12

    def test_log_tsdf_range_endpoints(self):
        x = ad.constant(np.array([-1.0, 0.0, 1.0]))
        y = ad.log_tsdf(x)
        assert np.allclose(y.data, [-1.0, 0.0, 1.0])


def _check_unary(name, builder, shape=(4, 5), seed=0):
    rng = np.random.default_rng(seed)
    p = ad.parameter(rng.normal(size=shape))

    def fn():
        return ad.tsum(builder(p))

    return ad.grad_check(fn, {name: p})


class TestGradients:
    """Every differentiable op agrees with central finite differences (20 seeds)."""

    @pytest.mark.parametrize("seed", range(20))
    def test_op_suite_fd_agreement(self, seed):
        rng = np.random.default_rng(seed)
        ops = {
            "relu": lambda t: ad.relu(t),
            "sigmoid": lambda t: ad.sigmoid(t),
            "tanh": lambda t: ad.tanh(t),
            "abs": lambda t: ad.absolute(t),
            "softmax": lambda t: ad.mul(t, ad.softmax(t, axis=1)),
            "logtf": lambda t: ad.log_tsdf(t),
            "mean": lambda t: ad.tmean(t),
            "max": lambda t: ad.tmax(t),
        }
        name = list(ops)[seed % len(ops)]
        # keep relu/abs inputs away from their kinks
        p = ad.parameter(rng.normal(size=(3, 4)) + np.sign(rng.normal(size=(3, 4))) * 0.1)

        def fn():
            return ad.tsum(ops[name](p))

        assert ad.grad_check(fn, {"p": p}) < 1e-3

    def test_linear_graph_near_exact(self):
        rng = np.random.default_rng(42)
        p = ad.parameter(rng.normal(size=(3, 3)))
        w = ad.parameter(rng.normal(size=(3, 2)))

        def fn():
            return ad.tsum(ad.matmul(p, w))

        assert ad.grad_check(fn, {"p": p, "w": w}) < 1e-10

    def test_conv2d_gradients(self):
        rng = np.random.default_rng(5)
        x = ad.parameter(rng.normal(size=(2, 5, 6)))
        w = ad.parameter(rng.normal(size=(3, 2, 3, 3)) * 0.5)
        b = ad.parameter(rng.normal(size=3))

        def fn():
            return ad.tsum(ad.tanh(ad.conv2d(x, w, b, stride=2, padding=1)))

        assert ad.grad_check(fn, {"x": x, "w": w, "b": b}) < 1e-3

    def test_pool_upsample_gather_gradients(self):
        rng = np.random.default_rng(6)
        x = ad.parameter(rng.normal(size=(2, 4, 4)))

        def fn():
            y = ad.avg_pool2d(x)
            y = ad.upsample2d_nearest(y, 2)
            g = ad.gather_pixels(y, np.array([0, 3, 2]), np.array([1, 2, 0]))
            return ad.tsum(ad.mul(g, g))

        assert ad.grad_check(fn, {"x": x}) < 1e-3

    def test_bilinear_sample_gradients(self):
        rng = np.random.default_rng(7)
        x = ad.parameter(rng.normal(size=(3, 5, 5)))
        px = rng.uniform(-0.5, 4.5, size=8)
        py = rng.uniform(-0.5, 4.5, size=8)

        def fn():
            s, _ = ad.bilinear_sample2d(x, px, py)
            return ad.tsum(ad.mul(s, s))

        assert ad.grad_check(fn, {"x": x}) < 1e-3

    def test_loss_gradients(self):
        rng = np.random.default_rng(8)
        logits = ad.parameter(rng.normal(size=(6, 4)))
        occ = ad.parameter(rng.normal(size=9))
        labels = rng.integers(0, 4, size=6)
        targets = rng.integers(0, 2, size=9).astype(float)

        def fn():
            return ad.add(
                ad.softmax_cross_entropy(logits, labels),
                ad.bce_with_logits(occ, targets, pos_weight=1.5),
            )

        assert ad.grad_check(fn, {"logits": logits, "occ": occ}) < 1e-3

    def test_tape_reverse_order_correct_on_chain(self):
        # f(x) = tanh(sigmoid(x) * x); validates ordering by composing dependent ops
        p = ad.parameter(np.array([0.7, -0.3]))

        def fn():
            return ad.tsum(ad.tanh(ad.mul(ad.sigmoid(p), p)))

        assert ad.grad_check(fn, {"p": p}) < 1e-6

    def test_grad_check_requires_f64(self):
        ad.set_precision("run")
        try:
            p = ad.parameter(np.ones(2))
            with pytest.raises(CheckFailedError):
                ad.grad_check(lambda: ad.tsum(p), {"p": p})
        finally:
            ad.set_precision("test")


class TestAdam:
    def test_quadratic_descends(self):
        p = ad.parameter(np.array([3.0, -2.0]))
        opt = ad.Adam({"p": p}, lr=0.05)
        for _ in range(200):
            opt.zero_grad()
            with ad.Tape() as tape:
                loss = ad.tsum(ad.mul(p, p))
                tape.backward(loss)
            opt.step()
        assert np.abs(p.data).max() < 0.05
