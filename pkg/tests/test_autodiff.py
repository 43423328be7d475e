"""Engine-level checks: forward values against plain numpy, gradients
against central finite differences."""

import numpy as np
import pytest

from agnet import autodiff as ad
from agnet.gradcheck import numeric_gradient, relative_error

RNG = np.random.default_rng(20240811)


def check_grads(build, arrays, tol=1e-7, step=1e-5):
    """Gradient of a scalar graph vs finite differences, for each leaf."""
    leaves = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    build(*leaves).backward()
    for i, leaf in enumerate(leaves):
        def f(x, i=i):
            probe = [ad.Tensor(a.copy()) for a in arrays]
            probe[i] = ad.Tensor(x)
            return build(*probe).item()

        num = numeric_gradient(f, arrays[i], step=step)
        err = relative_error(leaf.grad, num)
        assert err < tol, f"leaf {i}: relative error {err:.3e}"


class TestForwardValues:
    def test_add_mul_broadcast(self):
        a = RNG.standard_normal((3, 4))
        b = RNG.standard_normal(4)
        out = ad.Tensor(a) * b + 2.0
        np.testing.assert_allclose(out.data, a * b + 2.0)

    def test_linear_matches_numpy(self):
        x = RNG.standard_normal((5, 3))
        w = RNG.standard_normal((2, 3))
        b = RNG.standard_normal(2)
        out = ad.linear(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b))
        np.testing.assert_allclose(out.data, x @ w.T + b)

    def test_softmax_rows_sum_to_one(self):
        x = RNG.standard_normal((6, 9)) * 10
        y = ad.softmax(ad.Tensor(x), axis=1).data
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(y > 0)

    def test_softmax_shift_invariance(self):
        x = RNG.standard_normal((2, 5))
        a = ad.softmax(ad.Tensor(x), axis=1).data
        b = ad.softmax(ad.Tensor(x + 123.0), axis=1).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_conv2d_matches_direct_loops(self):
        x = RNG.standard_normal((2, 3, 6, 6))
        w = RNG.standard_normal((4, 3, 3, 3))
        b = RNG.standard_normal(4)
        for stride, pad in [(1, 1), (2, 1), (1, 0), (2, 0)]:
            out = ad.conv2d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b),
                            stride=stride, pad=pad).data
            xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
            oh = (xp.shape[2] - 3) // stride + 1
            ow = (xp.shape[3] - 3) // stride + 1
            ref = np.zeros((2, 4, oh, ow))
            for n in range(2):
                for o in range(4):
                    for i in range(oh):
                        for j in range(ow):
                            patch = xp[n, :, i * stride:i * stride + 3,
                                       j * stride:j * stride + 3]
                            ref[n, o, i, j] = (patch * w[o]).sum() + b[o]
            np.testing.assert_allclose(out, ref, atol=1e-10)

    def test_take_per_row(self):
        x = RNG.standard_normal((4, 5))
        idx = np.array([3, 0, 4, 1])
        out = ad.take_per_row(ad.Tensor(x), idx).data
        np.testing.assert_allclose(out, x[np.arange(4), idx])

    def test_concat_and_global_avg_pool(self):
        a = RNG.standard_normal((2, 3))
        b = RNG.standard_normal((4, 3))
        out = ad.concat([ad.Tensor(a), ad.Tensor(b)], axis=0).data
        np.testing.assert_allclose(out, np.concatenate([a, b]))
        x = RNG.standard_normal((2, 5, 3, 3))
        np.testing.assert_allclose(
            ad.global_avg_pool(ad.Tensor(x)).data, x.mean(axis=(2, 3)))

    def test_backward_requires_scalar(self):
        t = ad.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            (t * 2.0).backward()


class TestGradients:
    def test_add_mul_sub_broadcast(self):
        a = RNG.standard_normal((3, 4))
        b = RNG.standard_normal(4)
        r = RNG.standard_normal((3, 4))
        check_grads(lambda x, y: ad.tsum((x * y - x + y) * r), [a, b])

    def test_linear(self):
        x = RNG.standard_normal((4, 3))
        w = RNG.standard_normal((2, 3))
        b = RNG.standard_normal(2)
        r = RNG.standard_normal((4, 2))
        check_grads(lambda *t: ad.tsum(ad.linear(*t) * r), [x, w, b])

    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0), (2, 0)])
    def test_conv2d(self, stride, pad):
        x = RNG.standard_normal((2, 3, 5, 5))
        w = RNG.standard_normal((4, 3, 3, 3))
        b = RNG.standard_normal(4)

        def build(xt, wt, bt):
            out = ad.conv2d(xt, wt, bt, stride=stride, pad=pad)
            return ad.tsum(out * out)

        check_grads(build, [x, w, b], tol=1e-6)

    def test_relu_away_from_kink(self):
        x = np.where(RNG.uniform(size=(4, 4)) > 0.5, 1.0, -1.0) \
            * RNG.uniform(0.1, 1.0, (4, 4))
        r = RNG.standard_normal((4, 4))
        check_grads(lambda t: ad.tsum(ad.relu(t) * r), [x])

    def test_softmax_log_gather(self):
        x = RNG.standard_normal((5, 7))
        idx = RNG.integers(0, 7, 5)

        def build(t):
            q = ad.softmax(t, axis=1)
            return ad.tmean(-ad.log(ad.take_per_row(q, idx)))

        check_grads(build, [x])

    def test_mean_axes_and_clip_min(self):
        x = RNG.uniform(0.5, 2.0, (3, 4, 2, 2))

        def build(t):
            pooled = ad.tmean(t, axis=(2, 3))
            return ad.tsum(ad.clip_min(pooled, 1.0))

        check_grads(build, [x])

    def test_concat_gradient_splits(self):
        a = RNG.standard_normal((2, 3))
        b = RNG.standard_normal((4, 3))
        r = RNG.standard_normal((6, 3))
        check_grads(lambda x, y: ad.tsum(ad.concat([x, y], axis=0) * r), [a, b])

    def test_reused_node_accumulates(self):
        # d(x*x)/dx = 2x must come out of grad accumulation over both uses
        x = RNG.standard_normal(5)
        t = ad.Tensor(x, requires_grad=True)
        ad.tsum(t * t).backward()
        np.testing.assert_allclose(t.grad, 2 * x, atol=1e-12)

    def test_inference_builds_no_graph(self):
        a = ad.Tensor(np.ones((2, 2)))
        out = a * 3.0 + 1.0
        assert not out.requires_grad and out._backward is None
