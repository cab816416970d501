import numpy as np
import pytest

from rankfid import autodiff as ad
from rankfid.autodiff import Tape, Tensor, backward, grad_check


def away_from_zero(x, margin=1e-2):
    """Nudge values off the relu kink."""
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin * 2, x)


def bn_stats(c):
    return ad.RunningStats(np.zeros(c), np.ones(c))


class TestForward:
    def test_relu(self):
        assert ad.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]

    def test_matmul_shape(self):
        assert ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4)))).shape == (2, 4)

    def test_matmul_mismatch(self):
        with pytest.raises(ad.ShapeError, match="matmul"):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))))

    def test_conv_padding(self):
        out = ad.conv2d(Tensor(np.ones((1, 1, 8, 8))), Tensor(np.ones((1, 1, 3, 3))), stride=1, padding=1)
        assert out.shape == (1, 1, 8, 8)
        assert out.data[0, 0, 0, 0] == 4 and out.data[0, 0, 3, 3] == 9

    def test_conv_matches_direct_loops(self):
        rng = np.random.default_rng(0)
        x, w, b = rng.normal(size=(2, 3, 7, 6)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
        out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros((2, 4, 4, 3))
        for n in range(2):
            for o in range(4):
                for i in range(4):
                    for j in range(3):
                        ref[n, o, i, j] = (xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]).sum() + b[o]
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    def test_maxpool_values(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        assert ad.maxpool2d(Tensor(x), 2).data[0, 0].tolist() == [[5, 7], [13, 15]]

    def test_maxpool_tie_goes_to_first(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        with Tape() as tape:
            y = ad.sum_(ad.maxpool2d(x, 2))
        g = backward(tape, y, {"x": x})["x"]
        assert g[0, 0].tolist() == [[1, 0], [0, 0]]

    def test_batchnorm_eval_is_affine(self):
        stats = ad.RunningStats(np.array([1.0, -2.0]), np.array([4.0, 0.25]))
        x = np.random.default_rng(0).normal(size=(3, 2, 2, 2))
        out = ad.batchnorm(Tensor(x), Tensor([2.0, 1.0]), Tensor([0.5, 0.0]), stats, training=False).data
        ref = (x - np.array([1.0, -2.0]).reshape(1, 2, 1, 1)) / np.sqrt(np.array([4.0, 0.25]) + 1e-5).reshape(1, 2, 1, 1)
        ref = ref * np.array([2.0, 1.0]).reshape(1, 2, 1, 1) + np.array([0.5, 0.0]).reshape(1, 2, 1, 1)
        np.testing.assert_allclose(out, ref, rtol=1e-12)

    def test_batchnorm_running_update(self):
        x = np.random.default_rng(1).normal(3.0, 2.0, size=(8, 1, 4, 4))
        stats = bn_stats(1)
        ad.batchnorm(Tensor(x), Tensor([1.0]), Tensor([0.0]), stats, training=True)
        assert stats.mean[0] == pytest.approx(0.1 * x.mean())
        assert stats.var[0] == pytest.approx(0.9 + 0.1 * x.var(ddof=1))

    def test_non_finite_is_error(self):
        with pytest.raises(ad.NumericError):
            ad.div(Tensor([1.0]), Tensor([0.0]))

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        x, w = rng.random((2, 3, 9, 9)).astype(np.float32), rng.random((4, 3, 3, 3)).astype(np.float32)
        a = ad.conv2d(Tensor(x), Tensor(w), padding=1).data
        b = ad.conv2d(Tensor(x), Tensor(w), padding=1).data
        assert a.tobytes() == b.tobytes()

    def test_float32_preserved(self):
        x = Tensor(np.ones(3, dtype=np.float32))
        y = ad.sub(1.0, ad.mul(ad.sqrt(x), 2.0))
        assert y.dtype == np.float32


class TestBackward:
    def test_mean(self):
        w = Tensor(np.arange(5.0), requires_grad=True)
        with Tape() as tape:
            loss = ad.mean(w)
        np.testing.assert_allclose(backward(tape, loss, {"w": w})["w"], np.full(5, 0.2))

    def test_sum_of_squares(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            loss = ad.sum_(ad.square(w))
        assert backward(tape, loss, {"w": w})["w"].tolist() == [2.0, 4.0]

    def test_untouched_parameter_gets_zero(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        u = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape() as tape:
            loss = ad.sum_(w)
        g = backward(tape, loss, {"w": w, "u": u})
        assert g["u"].tolist() == [[0, 0], [0, 0]]

    def test_fan_out_accumulates(self):
        w = Tensor([3.0], requires_grad=True)
        with Tape() as tape:
            loss = ad.sum_(ad.add(ad.mul(w, w), ad.scale(w, 5.0)))
        assert backward(tape, loss, {"w": w})["w"].tolist() == [11.0]

    def test_duplicate_input_graph(self):
        rng = np.random.default_rng(0)
        x0 = rng.normal(size=(3, 4))
        x = Tensor(x0, requires_grad=True)
        with Tape() as tape:
            a = ad.softplus(x)
            loss = ad.sum_(ad.add(ad.mul(a, a), ad.matmul(a, Tensor(np.ones((4, 1))))))
        g = backward(tape, loss, {"x": x})["x"]
        sig = 1 / (1 + np.exp(-x0))
        # the (3, 1) matmul output broadcasts over 4 columns
        np.testing.assert_allclose(g, (2 * np.logaddexp(0, x0) + 4) * sig, rtol=1e-12)

    def test_loss_not_on_tape(self):
        w = Tensor([1.0], requires_grad=True)
        with Tape():
            loss = ad.sum_(w)
        with pytest.raises(ad.TapeError):
            backward(Tape(), loss)

    def test_non_scalar_loss(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = ad.square(w)
        with pytest.raises(ad.TapeError):
            backward(tape, y)

    def test_no_grad_records_nothing(self):
        w = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            with ad.no_grad():
                ad.square(w)
        assert len(tape) == 0


SMOOTH = {
    "add": lambda x: ad.sum_(ad.add(x, ad.square(x))),
    "sub": lambda x: ad.sum_(ad.square(ad.sub(x, ad.scale(x, 0.3)))),
    "mul": lambda x: ad.sum_(ad.mul(x, ad.softplus(x))),
    "div": lambda x: ad.sum_(ad.div(x, ad.add(ad.square(x), 1.0))),
    "scale": lambda x: ad.sum_(ad.square(ad.scale(x, -2.5))),
    "square": lambda x: ad.mean(ad.square(x)),
    "sqrt": lambda x: ad.sum_(ad.sqrt(ad.add(ad.square(x), 0.5))),
    "log": lambda x: ad.sum_(ad.log(ad.add(ad.square(x), 0.5))),
    "softplus": lambda x: ad.sum_(ad.softplus(x)),
    "normal_cdf": lambda x: ad.sum_(ad.square(ad.normal_cdf(x))),
    "mean": lambda x: ad.mean(ad.square(ad.mean(x, axis=0))),
    "sum_axis": lambda x: ad.sum_(ad.square(ad.sum_(ad.reshape(x, (3, 4)), axis=1))),
    "reshape": lambda x: ad.sum_(ad.square(ad.matmul(ad.reshape(x, (4, 3)), Tensor(np.arange(6.0).reshape(3, 2))))),
    "flatten": lambda x: ad.sum_(ad.softplus(ad.flatten(ad.reshape(x, (2, 2, 3))))),
    "index": lambda x: ad.sum_(ad.square(ad.take(ad.reshape(x, (3, 4)), [0, 2, 2, 1]))),
    "matmul": lambda x: ad.sum_(ad.square(ad.matmul(ad.reshape(x, (3, 4)), ad.reshape(ad.scale(x, 0.5), (4, 3))))),
    "gram": lambda x: ad.mean(ad.gram(ad.reshape(x, (4, 3)))),
    "gram_batched": lambda x: ad.sum_(ad.square(ad.gram(ad.reshape(x, (2, 3, 2))))),
}


class TestGradCheck:
    @pytest.mark.parametrize("name", sorted(SMOOTH))
    def test_smooth_ops(self, name):
        rng = np.random.default_rng(abs(hash(name)) % 2**32)
        for _ in range(10):
            rep = grad_check(SMOOTH[name], rng.normal(size=12), tol_rel=1e-6)
            assert rep.passed, (name, rep.failures[:3])

    def test_relu(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            rep = grad_check(lambda x: ad.sum_(ad.square(ad.relu(x))), away_from_zero(rng.normal(size=20)), 1e-4)
            assert rep.passed

    def test_clip(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            pt = rng.uniform(-2, 2, 20)
            pt = np.where(np.abs(np.abs(pt) - 1) < 1e-2, pt * 1.1, pt)
            rep = grad_check(lambda x: ad.sum_(ad.square(ad.clip(x, -1.0, 1.0))), pt, 1e-4)
            assert rep.passed

    def test_maxpool(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            rep = grad_check(lambda x: ad.sum_(ad.square(ad.maxpool2d(x, 2))), rng.normal(size=(2, 2, 4, 5)), 1e-4)
            assert rep.passed

    @pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (1, 0)])
    def test_conv2d_input_and_weight(self, stride, padding):
        rng = np.random.default_rng(stride * 10 + padding)
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        x = Tensor(rng.normal(size=(2, 2, 6, 6)))
        for _ in range(10):
            rep = grad_check(lambda t: ad.mean(ad.square(ad.conv2d(t, w, stride=stride, padding=padding))),
                             rng.normal(size=x.shape), 1e-5)
            assert rep.passed
            rep = grad_check(lambda t: ad.mean(ad.square(ad.conv2d(x, t, stride=stride, padding=padding))),
                             rng.normal(size=w.shape), 1e-5)
            assert rep.passed

    def test_conv2d_bias(self):
        rng = np.random.default_rng(9)
        x, w = Tensor(rng.normal(size=(2, 2, 5, 5))), Tensor(rng.normal(size=(3, 2, 3, 3)))
        for _ in range(10):
            rep = grad_check(lambda b: ad.sum_(ad.square(ad.conv2d(x, w, b, padding=1))), rng.normal(size=3), 1e-6)
            assert rep.passed

    def test_conv_relu_mean(self):
        rng = np.random.default_rng(4)
        w = Tensor(rng.normal(size=(2, 1, 3, 3)))

        def fn(t):
            return ad.mean(ad.relu(ad.conv2d(t, w, padding=1)))

        checked = 0
        while checked < 10:
            pt = rng.normal(size=(1, 1, 6, 6))
            pre = ad.conv2d(Tensor(pt), w, padding=1).data
            if np.min(np.abs(pre)) < 1e-3:
                continue  # too close to a relu kink
            assert grad_check(fn, pt, 1e-4).passed
            checked += 1

    @pytest.mark.parametrize("training", [True, False])
    def test_batchnorm(self, training):
        rng = np.random.default_rng(int(training))
        gamma, beta = Tensor(rng.normal(size=3)), Tensor(rng.normal(size=3))
        stats = ad.RunningStats(rng.normal(size=3), rng.uniform(0.5, 2, 3))
        mix = Tensor(rng.normal(size=(2, 3, 3, 2)))

        def fn(t):
            y = ad.batchnorm(t, gamma, beta, stats, training=training, update_stats=False)
            return ad.sum_(ad.mul(y, mix))

        for _ in range(10):
            assert grad_check(fn, rng.normal(size=(2, 3, 3, 2)), 1e-6).passed

    def test_batchnorm_affine_params(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(4, 2, 3, 3)))
        mix = Tensor(rng.normal(size=(4, 2, 3, 3)))
        for _ in range(10):
            beta = Tensor(rng.normal(size=2))
            rep = grad_check(lambda g: ad.sum_(ad.mul(ad.batchnorm(x, g, beta, bn_stats(2), True), mix)),
                             rng.normal(size=2), 1e-6)
            assert rep.passed

    def test_report_flags_wrong_gradient(self):
        def wrong(x):
            out = ad.sum_(ad.square(x))
            # corrupt the backward of the last node
            node = ad.active_tape().nodes[-1] if ad.active_tape() else None
            if node is not None:
                node.backward = lambda g: (np.broadcast_to(g, node.inputs[0].shape) * 3.0,)
            return out

        rep = grad_check(wrong, np.ones(3), 1e-4)
        assert not rep.passed and rep.failures
