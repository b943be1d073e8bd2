import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from indistill import tensor as T
from indistill.errors import DimensionError, ParameterError, TapeError


def direct_conv2d(x, k, b, stride=1, padding=0):
    """Six-loop reference convolution; intentionally slow and independent."""
    n, c_in, h, w = x.shape
    _, c_out, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, c_out, ho, wo), dtype=np.float64)
    for ni in range(n):
        for co in range(c_out):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(c_in):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[ni, ci, i * stride + u, j * stride + v] * k[ci, co, u, v]
                    out[ni, co, i, j] = acc + (b[co] if b is not None else 0.0)
    return out


def spaced_values(rng, shape, gap=0.05):
    """Values with pairwise gaps >> the finite-difference step, so argmax/relu
    decisions cannot flip under perturbation."""
    n = int(np.prod(shape))
    base = (np.arange(n) - n / 3) * gap
    return rng.permutation(base).reshape(shape) + 0.5 * gap


class TestConv2d:
    def test_scalar_scaling(self):
        x = T.Tensor(np.ones((1, 1, 3, 3)))
        k = T.Tensor(np.full((1, 1, 1, 1), 2.0))
        out = T.conv2d(x, k, T.Tensor(np.zeros(1)))
        assert out.shape == (1, 1, 3, 3)
        np.testing.assert_allclose(out.data, 2.0)

    def test_same_padding_shape(self):
        x = T.Tensor(np.zeros((1, 3, 32, 32)))
        k = T.Tensor(np.zeros((3, 16, 3, 3)))
        out = T.conv2d(x, k, T.Tensor(np.zeros(16)), stride=1, padding=1)
        assert out.shape == (1, 16, 32, 32)

    def test_matches_direct_oracle(self):
        rng = np.random.default_rng(7)
        with T.float64_mode():
            x = rng.normal(size=(1, 2, 4, 4))
            k = rng.normal(size=(2, 3, 3, 3))
            b = rng.normal(size=3)
            got = T.conv2d(T.Tensor(x), T.Tensor(k), T.Tensor(b)).data
            want = direct_conv2d(x, k, b)
        np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-9)

    def test_matches_direct_oracle_fuzz(self):
        rng = np.random.default_rng(11)
        with T.float64_mode():
            for _ in range(25):
                n = int(rng.integers(1, 3))
                c_in = int(rng.integers(1, 5))
                c_out = int(rng.integers(1, 4))
                kk = int(rng.choice([1, 3]))
                h = int(rng.integers(kk, 9))
                w = int(rng.integers(kk, 9))
                stride = int(rng.integers(1, 3))
                pad = int(rng.integers(0, 2))
                x = rng.normal(size=(n, c_in, h, w))
                k = rng.normal(size=(c_in, c_out, kk, kk))
                b = rng.normal(size=c_out)
                got = T.conv2d(T.Tensor(x), T.Tensor(k), T.Tensor(b), stride, pad).data
                want = direct_conv2d(x, k, b, stride, pad)
                np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-9)

    def test_channel_mismatch_names_axis(self):
        x = T.Tensor(np.zeros((1, 3, 8, 8)))
        k = T.Tensor(np.zeros((2, 4, 3, 3)))
        with pytest.raises(DimensionError, match="axis"):
            T.conv2d(x, k, T.Tensor(np.zeros(4)))

    def test_empty_output_rejected(self):
        x = T.Tensor(np.zeros((1, 1, 2, 2)))
        k = T.Tensor(np.zeros((1, 1, 5, 5)))
        with pytest.raises(DimensionError, match="output position"):
            T.conv2d(x, k, None)


class TestBatchnorm:
    def test_constant_input_zero_output(self):
        x = T.Tensor(np.full((4, 2, 3, 3), 7.0))
        g = T.Tensor(np.ones(2))
        b = T.Tensor(np.zeros(2))
        rs = T.RunningStats.initial(2)
        out = T.batchnorm2d(x, g, b, rs, mode="train")
        np.testing.assert_allclose(out.data, 0.0)

    def test_two_value_normalization(self):
        x = np.zeros((2, 1, 1, 1))
        x[0] = 1.0
        x[1] = 3.0
        out = T.batchnorm2d(
            T.Tensor(x), T.Tensor(np.ones(1)), T.Tensor(np.zeros(1)),
            T.RunningStats.initial(1), mode="train",
        )
        np.testing.assert_allclose(out.data.ravel(), [-1.0, 1.0], atol=1e-4)

    def test_eval_identity_with_unit_stats(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
        out = T.batchnorm2d(
            T.Tensor(x), T.Tensor(np.ones(3)), T.Tensor(np.zeros(3)),
            T.RunningStats.initial(3), mode="eval",
        )
        np.testing.assert_allclose(out.data, x, rtol=1e-5, atol=1e-6)

    def test_running_stats_update(self):
        x = np.full((1, 1, 2, 2), 4.0)
        rs = T.RunningStats.initial(1)
        T.batchnorm2d(T.Tensor(x), T.Tensor(np.ones(1)), T.Tensor(np.zeros(1)), rs, "train")
        np.testing.assert_allclose(rs.mean, [0.4], rtol=1e-6)   # 0.9*0 + 0.1*4

    def test_channel_mismatch(self):
        x = T.Tensor(np.zeros((1, 3, 2, 2)))
        with pytest.raises(DimensionError):
            T.batchnorm2d(x, T.Tensor(np.ones(2)), T.Tensor(np.zeros(3)), T.RunningStats.initial(3))


class TestDenseReluPoolFlatten:
    def test_dense_identity(self):
        x = T.Tensor(np.array([1.0, -2.0, 3.0]))
        out = T.dense(x, T.Tensor(np.eye(3)), T.Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, x.data)

    def test_dense_batched(self):
        rng = np.random.default_rng(1)
        x, w, b = rng.normal(size=(5, 3)), rng.normal(size=(3, 2)), rng.normal(size=2)
        out = T.dense(T.Tensor(x), T.Tensor(w), T.Tensor(b))
        np.testing.assert_allclose(out.data, (x @ w + b).astype(np.float32), rtol=1e-6)

    def test_dense_shape_error(self):
        with pytest.raises(DimensionError):
            T.dense(T.Tensor(np.zeros(4)), T.Tensor(np.zeros((3, 2))), T.Tensor(np.zeros(2)))

    def test_relu(self):
        out = T.relu(T.Tensor(np.array([-2.0, 0.0, 3.0])))
        np.testing.assert_allclose(out.data, [0.0, 0.0, 3.0])

    def test_maxpool_enumeration(self):
        x = T.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        out = T.maxpool2d(x, window=2, stride=2)
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == 4.0

    def test_maxpool_tie_routes_to_first(self):
        x = T.Tensor(np.full((1, 1, 2, 2), 5.0), requires_grad=True)
        tape = T.GradTape()
        with tape:
            out = T.maxpool2d(x, 2).sum()
        T.backward(out)
        np.testing.assert_allclose(x.grad.ravel(), [1.0, 0.0, 0.0, 0.0])

    def test_adaptive_pool_grid(self):
        x = T.Tensor(np.arange(49, dtype=np.float64).reshape(1, 1, 7, 7))
        out = T.adaptive_maxpool2d(x, 2, 2)
        # windows split 7 into [0,4) and [3,7): maxima are the bottom-right corners
        np.testing.assert_allclose(out.data[0, 0], [[24.0, 27.0], [45.0, 48.0]])

    def test_adaptive_pool_upsamples_singleton(self):
        x = T.Tensor(np.full((1, 1, 1, 1), 3.0))
        out = T.adaptive_maxpool2d(x, 2, 2)
        np.testing.assert_allclose(out.data, 3.0)
        assert out.shape == (1, 1, 2, 2)

    def test_flatten(self):
        x = T.Tensor(np.zeros((2, 3, 4, 4)))
        assert T.flatten(x).shape == (2, 48)


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax_with_temperature(T.Tensor(np.zeros(2)), 1.0)
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_closed_form(self):
        out = T.softmax_with_temperature(T.Tensor(np.array([0.0, np.log(3.0)])), 1.0)
        np.testing.assert_allclose(out.data, [0.25, 0.75], rtol=1e-6)

    def test_high_temperature_uniform(self):
        rng = np.random.default_rng(3)
        out = T.softmax_with_temperature(T.Tensor(rng.normal(size=8)), 1e6)
        np.testing.assert_allclose(out.data, 1 / 8, atol=1e-4)

    def test_temperature_validated(self):
        with pytest.raises(ParameterError):
            T.softmax_with_temperature(T.Tensor(np.zeros(2)), 0.0)

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=12),
           st.floats(-30, 30))
    @settings(max_examples=60, deadline=None)
    def test_sums_to_one_and_shift_invariant(self, logits, shift):
        x = np.asarray(logits, dtype=np.float64)
        with T.float64_mode():
            a = T.softmax_with_temperature(T.Tensor(x), 2.5).data
            b = T.softmax_with_temperature(T.Tensor(x + shift), 2.5).data
        assert abs(a.sum() - 1.0) < 1e-6
        np.testing.assert_allclose(a, b, atol=1e-9)


class TestTapeSemantics:
    def test_linear_gradient(self):
        w = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)
        x = T.Tensor(np.array([3.0, 4.0]))
        tape = T.GradTape()
        with tape:
            loss = (w * x).sum()
        T.backward(loss)
        np.testing.assert_allclose(w.grad, x.data)

    def test_double_backward_rejected(self):
        w = T.Tensor(np.ones(2), requires_grad=True)
        tape = T.GradTape()
        with tape:
            loss = (w * w).sum()
        T.backward(loss)
        with pytest.raises(TapeError, match="consumed"):
            T.backward(loss)

    def test_non_scalar_rejected(self):
        w = T.Tensor(np.ones(2), requires_grad=True)
        tape = T.GradTape()
        with tape:
            out = w * 2.0
        with pytest.raises(TapeError, match="scalar"):
            T.backward(out)

    def test_constant_loss_all_grads_zero(self):
        w = T.Tensor(np.ones(2), requires_grad=True)
        loss = T.Tensor(np.asarray(1.0))
        T.backward(loss)  # no-op: nothing reachable
        assert w.grad is None

    def test_grad_accumulates_across_tapes(self):
        w = T.Tensor(np.ones(2), requires_grad=True)
        for _ in range(2):
            tape = T.GradTape()
            with tape:
                loss = (w * 3.0).sum()
            T.backward(loss)
        np.testing.assert_allclose(w.grad, [6.0, 6.0])

    def test_no_grad_detaches(self):
        w = T.Tensor(np.ones(2), requires_grad=True)
        tape = T.GradTape()
        with tape:
            with T.no_grad():
                out = (w * 2.0).sum()
        assert not out.requires_grad
        assert len(tape) == 0

    def test_forward_bitwise_deterministic(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
        k = rng.normal(size=(3, 4, 3, 3)).astype(np.float32)
        b = rng.normal(size=4).astype(np.float32)
        a = T.conv2d(T.Tensor(x), T.Tensor(k), T.Tensor(b), padding=1).data
        bb = T.conv2d(T.Tensor(x), T.Tensor(k), T.Tensor(b), padding=1).data
        assert np.array_equal(a, bb)


def _gradcheck_case(rng, op):
    """Build (f, leaves) in float64 for one randomized small instance."""
    if op == "conv2d":
        x = T.Tensor(rng.normal(size=(2, 2, 5, 5)), requires_grad=True)
        k = T.Tensor(rng.normal(size=(2, 3, 3, 3)), requires_grad=True)
        b = T.Tensor(rng.normal(size=3), requires_grad=True)
        return (lambda x, k, b: (T.conv2d(x, k, b, stride=1, padding=1) ** 2).sum()), [x, k, b]
    if op == "batchnorm2d":
        x = T.Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        g = T.Tensor(rng.normal(size=2) + 1.5, requires_grad=True)
        b = T.Tensor(rng.normal(size=2), requires_grad=True)
        rs = T.RunningStats.initial(2, dtype=np.float64)
        return (lambda x, g, b: (T.batchnorm2d(x, g, b, rs, "train") ** 2).sum()), [x, g, b]
    if op == "dense":
        x = T.Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        w = T.Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        b = T.Tensor(rng.normal(size=3), requires_grad=True)
        return (lambda x, w, b: (T.dense(x, w, b) ** 2).sum()), [x, w, b]
    if op == "maxpool":
        x = T.Tensor(spaced_values(rng, (2, 2, 6, 6)), requires_grad=True)
        return (lambda x: (T.maxpool2d(x, 2) ** 2).sum()), [x]
    if op == "softmax":
        x = T.Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        return (lambda x: (T.softmax_with_temperature(x, 2.0) ** 2).sum()), [x]
    if op == "log_softmax":
        x = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        return (lambda x: (T.log_softmax(x, 3.0) ** 2).sum()), [x]
    if op == "adaptive_maxpool":
        x = T.Tensor(spaced_values(rng, (2, 2, 5, 5)), requires_grad=True)
        return (lambda x: (T.adaptive_maxpool2d(x, 2, 2) ** 2).sum()), [x]
    if op == "take_channels":
        x = T.Tensor(rng.normal(size=(2, 5, 3, 3)), requires_grad=True)
        return (lambda x: (T.take_channels(x, [0, 2, 4]) ** 2).sum()), [x]
    raise AssertionError(op)


@pytest.mark.parametrize("op", [
    "conv2d", "batchnorm2d", "dense", "maxpool", "softmax",
    "log_softmax", "adaptive_maxpool", "take_channels",
])
def test_finite_difference_per_op(op):
    with T.float64_mode():
        rng = np.random.default_rng(hash(op) % 2**32)
        for _ in range(5):
            f, leaves = _gradcheck_case(rng, op)
            err = T.finite_diff_check(f, leaves, h=1e-3)
            assert err < 1e-4, f"{op}: finite-diff error {err}"


def test_composite_network_gradcheck():
    """conv -> bn -> relu -> dense -> softened KL against fixed target logits."""
    from indistill.losses import kl_distill_loss

    with T.float64_mode():
        rng = np.random.default_rng(42)
        x = T.Tensor(rng.normal(size=(2, 2, 4, 4)) * 0.7 + 0.1, requires_grad=True)
        k = T.Tensor(rng.normal(size=(2, 3, 3, 3)), requires_grad=True)
        kb = T.Tensor(rng.normal(size=3), requires_grad=True)
        g = T.Tensor(rng.normal(size=3) + 1.5, requires_grad=True)
        be = T.Tensor(rng.normal(size=3), requires_grad=True)
        w = T.Tensor(rng.normal(size=(3 * 4 * 4, 4)), requires_grad=True)
        wb = T.Tensor(rng.normal(size=4), requires_grad=True)
        target = T.Tensor(rng.normal(size=(2, 4)))
        rs = T.RunningStats.initial(3, dtype=np.float64)

        def f(x, k, kb, g, be, w, wb):
            h1 = T.conv2d(x, k, kb, padding=1)
            h2 = T.relu(T.batchnorm2d(h1, g, be, rs, "train"))
            logits = T.dense(T.flatten(h2), w, wb)
            return kl_distill_loss(target, logits, temperature=2.0).tensor

        err = T.finite_diff_check(f, [x, k, kb, g, be, w, wb], h=1e-3)
    assert err < 1e-4, f"composite network finite-diff error {err}"


def test_elementwise_grads():
    with T.float64_mode():
        rng = np.random.default_rng(9)
        a = T.Tensor(rng.normal(size=(3, 4)) + 3.0, requires_grad=True)  # keep log/div away from 0
        b = T.Tensor(rng.normal(size=(3, 4)) + 3.0, requires_grad=True)

        def f(a, b):
            return ((a * b - a / b + (a + b) ** 2).log().exp() * 0.25).sum()

        assert T.finite_diff_check(f, [a, b], h=1e-4) < 1e-4


def test_broadcast_grads():
    with T.float64_mode():
        rng = np.random.default_rng(10)
        m = T.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        row = T.Tensor(rng.normal(size=(1, 3)), requires_grad=True)
        col = T.Tensor(rng.normal(size=(4, 1)) + 2.0, requires_grad=True)

        def f(m, row, col):
            return ((m + row) / col).sum()

        assert T.finite_diff_check(f, [m, row, col], h=1e-4) < 1e-4


def test_matmul_and_transpose_grads():
    with T.float64_mode():
        rng = np.random.default_rng(12)
        a = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = T.Tensor(rng.normal(size=(4, 2)), requires_grad=True)

        def f(a, b):
            return ((a @ b).T ** 2).sum()

        assert T.finite_diff_check(f, [a, b], h=1e-4) < 1e-4


def test_mean_and_axis_sum_grads():
    with T.float64_mode():
        rng = np.random.default_rng(13)
        a = T.Tensor(rng.normal(size=(3, 4, 2)), requires_grad=True)

        def f(a):
            return (a.sum(axis=1) ** 2).mean() + a.mean(axis=(0, 2)).sum()

        assert T.finite_diff_check(f, a, h=1e-4) < 1e-4
