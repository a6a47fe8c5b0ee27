import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pyrabox import tensor as T
from pyrabox.verify import BUILDERS, b_conv2d


def leaf(a, dtype=np.float64):
    return T.Tensor(np.asarray(a, dtype=dtype), requires_grad=True)


def direct_conv(x, w, b, stride, pad, dil):
    """Loop-level cross-correlation used as an independent reference."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - dil * (kh - 1) - 1) // stride + 1
    ow = (wd + 2 * pad - dil * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for i in range(oh):
        for j in range(ow):
            for p in range(kh):
                for q in range(kw):
                    patch = xp[:, :, i * stride + p * dil, j * stride + q * dil]
                    out[:, :, i, j] += patch @ w[:, :, p, q].T
    return out + b[None, :, None, None]


class TestConv:
    def test_unit_kernel_scales(self):
        y = T.conv2d(T.Tensor(np.ones((1, 1, 3, 3))), T.Tensor(np.full((1, 1, 1, 1), 2.0)), T.Tensor(np.zeros(1)))
        assert y.shape == (1, 1, 3, 3)
        assert np.all(y.data == 2.0)

    def test_same_padding_shape(self):
        y = T.conv2d(T.Tensor(np.zeros((1, 1, 4, 4))), T.Tensor(np.zeros((1, 1, 3, 3))), None, 1, 1)
        assert y.shape == (1, 1, 4, 4)

    @pytest.mark.parametrize("stride,pad,dil", [(1, 0, 1), (2, 1, 1), (1, 2, 2), (2, 0, 2), (3, 1, 1)])
    def test_matches_loop_reference(self, stride, pad, dil):
        rng = np.random.default_rng(stride * 10 + pad + dil)
        x = rng.standard_normal((2, 3, 9, 8))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        with T.precision(np.float64):
            y = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride, pad, dil)
        np.testing.assert_allclose(y.data, direct_conv(x, w, b, stride, pad, dil), rtol=1e-12, atol=1e-12)

    def test_identity_kernel_is_identity(self):
        x = np.random.default_rng(0).standard_normal((2, 4, 5, 5))
        w = np.eye(4).reshape(4, 4, 1, 1)
        with T.precision(np.float64):
            y = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(np.zeros(4)))
        assert np.array_equal(y.data, x)

    def test_channel_mismatch_is_dimension_error(self):
        with pytest.raises(T.DimensionError, match="input channels"):
            T.conv2d(T.Tensor(np.zeros((1, 2, 4, 4))), T.Tensor(np.zeros((1, 3, 3, 3))))

    def test_rank_and_geometry_errors(self):
        with pytest.raises(T.DimensionError):
            T.conv2d(T.Tensor(np.zeros((2, 4, 4))), T.Tensor(np.zeros((1, 2, 3, 3))))
        with pytest.raises(T.ContractError):
            T.conv2d(T.Tensor(np.zeros((1, 1, 4, 4))), T.Tensor(np.zeros((1, 1, 3, 3))), stride=0)
        with pytest.raises(T.DimensionError, match="empty"):
            T.conv2d(T.Tensor(np.zeros((1, 1, 2, 2))), T.Tensor(np.zeros((1, 1, 3, 3))))

    def test_random_instance_gradcheck(self):
        def builder(rng):
            x = rng.standard_normal((2, 3, 8, 8))
            w = rng.standard_normal((4, 3, 3, 3))
            b = rng.standard_normal(4)
            r = rng.standard_normal((2, 4, 8, 8))
            return (lambda x, w, b: T.sum(T.mul(T.conv2d(x, w, b, 1, 1), r))), {"x": x, "w": w, "b": b}

        rep = T.gradcheck(builder, seed=11)
        assert rep.passed, rep.errors


class TestElementwise:
    def test_channel_group_max_value_and_gradient(self):
        x = leaf([0.5, 0.2, 0.9, 0.4, 1.7]).data.reshape(1, 5, 1, 1)
        t = leaf(x)
        y = T.channel_group_max(t, 1, 3)
        assert y.shape == (1, 1, 1, 1) and y.data.item() == pytest.approx(0.9)
        T.backward(T.sum(y))
        assert t.grad.ravel().tolist() == [0, 0, 1, 0, 0]

    def test_channel_group_max_tie_goes_to_lowest_index(self):
        t = leaf(np.array([1.0, 3.0, 3.0, 0.0]).reshape(1, 4, 1, 1))
        T.backward(T.sum(T.channel_group_max(t, 0, 4)))
        assert t.grad.ravel().tolist() == [0, 1, 0, 0]

    @given(st.lists(st.floats(-5, 5), min_size=4, max_size=4), st.permutations(range(4)))
    @settings(max_examples=50, deadline=None)
    def test_channel_group_max_permutation_equivariance(self, vals, perm):
        x = np.array(vals).reshape(1, 4, 1, 1)
        a = T.channel_group_max(T.Tensor(x, dtype=np.float64), 0, 4).data
        b = T.channel_group_max(T.Tensor(x[:, list(perm)], dtype=np.float64), 0, 4).data
        assert a.item() == b.item()
        t = leaf(x)
        T.backward(T.sum(T.channel_group_max(t, 0, 4)))
        assert t.grad.sum() == 1.0

    def test_channel_group_errors(self):
        x = T.Tensor(np.zeros((1, 4, 2, 2)))
        with pytest.raises(T.DimensionError):
            T.channel_group_max(x, 0, 0)
        with pytest.raises(T.DimensionError):
            T.channel_group_max(x, 2, 3)

    def test_l2_rescale_three_four_five(self):
        x = T.Tensor(np.array([3.0, 4.0]).reshape(1, 2, 1, 1), dtype=np.float64)
        y = T.l2_rescale(x, T.Tensor(np.ones(2), dtype=np.float64), eps=0.0)
        np.testing.assert_allclose(y.data.ravel(), [0.6, 0.8], rtol=0, atol=1e-15)

    def test_l2_rescale_zero_vector_stays_finite(self):
        x = leaf(np.zeros((1, 3, 2, 2)))
        g = leaf(np.full(3, 20.0))
        y = T.l2_rescale(x, g)
        T.backward(T.sum(y))
        assert np.all(np.isfinite(y.data)) and np.all(np.isfinite(x.grad))

    def test_upsample_nearest_blocks(self):
        x = T.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        y = T.upsample2x(x).data[0, 0]
        assert y.tolist() == [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]

    def test_upsample_bilinear_preserves_constants(self):
        y = T.upsample2x(T.Tensor(np.full((1, 2, 3, 3), 7.0)), "bilinear")
        np.testing.assert_allclose(y.data, 7.0, rtol=1e-6)

    def test_maxpool_floors_odd_sizes(self):
        x = T.Tensor(np.arange(25.0).reshape(1, 1, 5, 5))
        y = T.maxpool2x(x)
        assert y.data[0, 0].tolist() == [[6, 8], [16, 18]]

    def test_softmax_channels_groups_sum_to_one(self):
        x = T.Tensor(np.random.default_rng(0).standard_normal((2, 6, 3, 3)), dtype=np.float64)
        p = T.softmax_channels(x, 2).data.reshape(2, 3, 2, 3, 3)
        np.testing.assert_allclose(p.sum(axis=2), 1.0, rtol=1e-12)
        with pytest.raises(T.DimensionError):
            T.softmax_channels(x, 4)


class TestBackward:
    def test_sum_gives_ones(self):
        x = leaf(np.zeros((2, 2)))
        T.backward(T.sum(x))
        assert np.array_equal(x.grad, np.ones((2, 2)))

    def test_relu_subgradient(self):
        x = leaf([-1.0, 2.0])
        T.backward(T.sum(T.relu(x)))
        assert x.grad.tolist() == [0.0, 1.0]

    def test_non_scalar_loss_rejected(self):
        x = leaf(np.ones(3))
        with pytest.raises(T.ContractError, match="scalar"):
            T.backward(T.relu(x))

    def test_shared_input_accumulates_once(self):
        x = leaf([1.5, -2.0])
        y = T.add(T.mul(x, x), x)
        T.backward(T.sum(y))
        np.testing.assert_allclose(x.grad, 2 * np.array([1.5, -2.0]) + 1)

    def test_replay_order_is_reverse_of_execution(self):
        x = leaf(np.ones((1, 1, 2, 2)))
        y = T.relu(T.mul(T.add(x, 1.0), 2.0))
        loss = T.sum(y)
        seqs = [node.seq for _, node in T.Graph(loss).reverse()]
        assert seqs == sorted(seqs, reverse=True) and len(seqs) == 4

    def test_graph_consumed(self):
        x = leaf([1.0])
        loss = T.sum(T.mul(x, 3.0))
        T.backward(loss)
        with pytest.raises(T.ContractError):
            T.backward(loss)

    def test_no_grad_records_nothing(self):
        x = leaf([1.0])
        with T.no_grad():
            y = T.mul(x, 2.0)
        assert y.is_leaf and not y.requires_grad

    def test_checked_mode_flags_non_finite(self):
        x = T.Tensor(np.array([1e30], dtype=np.float32))
        with np.errstate(over="ignore"), T.checked_mode(), pytest.raises(T.NonFiniteError, match="mul"):
            T.mul(x, x)

    def test_deterministic_gradients(self):
        grads = []
        for _ in range(2):
            fn, inputs = b_conv2d(np.random.default_rng(5))
            ts = {k: leaf(v) for k, v in inputs.items()}
            T.backward(fn(**ts))
            grads.append(ts["w"].grad.tobytes())
        assert grads[0] == grads[1]


class TestGradcheck:
    def test_quadratic(self):
        def builder(rng):
            return (lambda x: T.sum(T.mul(x, x))), {"x": np.array([3.0])}

        rep = T.gradcheck(builder, seed=0)
        x = np.array([3.0])
        num = T.numeric_grad(lambda: float((x * x).sum()), x)
        assert num[0] == pytest.approx(6.0, abs=1e-8)
        assert rep.max_error < 1e-8

    def test_smooth_l1_junction_brackets_unit_slope(self):
        eps = 1e-5
        f = lambda d: 0.5 * d * d if abs(d) < 1 else abs(d) - 0.5  # noqa: E731
        left = (f(1.0) - f(1.0 - eps)) / eps
        right = (f(1.0 + eps) - f(1.0)) / eps
        x = leaf([1.0])
        T.backward(T.sum(T.smooth_l1(x)))
        assert left <= x.grad[0] <= right + 1e-12
        assert x.grad[0] == 1.0

    def test_full_cpm_block(self):
        rep = T.gradcheck(BUILDERS["cpm"], seed=0)
        assert rep.passed, rep.failures

    def test_report_lists_failures(self):
        def wrong(rng):
            x = rng.standard_normal(3)

            def fn(x):
                y = T.mul(x, 2.0)
                if y._node is not None:
                    y._node.backward = lambda g: (g,)  # deliberately wrong adjoint
                return T.sum(y)

            return fn, {"x": x}

        rep = T.gradcheck(wrong, seed=0)
        assert not rep.passed and rep.failures == ["x"]

    @pytest.mark.parametrize("op", sorted(BUILDERS))
    def test_each_op_few_seeds(self, op):
        for seed in range(3):
            rep = T.gradcheck(BUILDERS[op], seed=seed, max_coords=12)
            assert rep.passed, (op, seed, rep.errors)
