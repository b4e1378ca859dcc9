"""Gradient, determinism and contract tests for the autodiff engine."""

import numpy as np
import pytest

from fedmm import autodiff as ad
from fedmm.autodiff import Tensor
from fedmm.exceptions import ContractError, DimensionError, DomainError
from fedmm.optim import Adam

from conftest import assert_gradients_close, central_difference


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = ad.matmul(a, Tensor(np.eye(2)))
        np.testing.assert_array_equal(out.data, a.data)

    def test_identity_times_column(self):
        out = ad.matmul(Tensor(np.eye(2)), Tensor([[5.0], [7.0]]))
        np.testing.assert_array_equal(out.data, [[5.0], [7.0]])

    def test_hand_product(self):
        out = ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_allclose(out.data, [[11.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))

    @pytest.mark.parametrize("shape_a,shape_b", [
        ((3, 4), (4, 2)), ((3, 4), (4,)), ((4,), (4, 2)), ((5,), (5,)),
    ])
    def test_gradients(self, rng, shape_a, shape_b):
        a = Tensor(rng.standard_normal(shape_a), requires_grad=True)
        b = Tensor(rng.standard_normal(shape_b), requires_grad=True)
        ad.backward(ad.reduce_sum(ad.matmul(a, b) * 2.0))

        def value():
            return float((ad.matmul(Tensor(a.data), Tensor(b.data)).data * 2.0).sum())

        fd_a, fd_b = central_difference(value, [a.data, b.data])
        assert_gradients_close(a.grad, fd_a)
        assert_gradients_close(b.grad, fd_b)


class TestUnaryOps:
    def test_sigmoid_at_zero(self):
        assert ad.sigmoid(Tensor(0.0)).item() == 0.5

    def test_tanh_at_zero(self):
        assert ad.tanh(Tensor(0.0)).item() == 0.0

    def test_softplus_at_zero(self):
        np.testing.assert_allclose(ad.softplus(Tensor(0.0)).item(), np.log(2.0), atol=1e-12)

    def test_log_rejects_nonpositive_with_index(self):
        with pytest.raises(DomainError, match="index 2"):
            ad.log(Tensor([1.0, 2.0, -1.0]))

    def test_exp_input_clamp(self):
        out = ad.exp(Tensor([100.0, -100.0]))
        np.testing.assert_allclose(out.data, [np.exp(60.0), np.exp(-60.0)])

    def test_map_unary_dispatch(self):
        x = Tensor([0.3, -0.7])
        np.testing.assert_array_equal(ad.map_unary(x, "relu").data, [0.3, 0.0])
        with pytest.raises(DomainError):
            ad.map_unary(x, "gelu")

    @pytest.mark.parametrize("kind", ["relu", "sigmoid", "tanh", "softplus", "exp", "log"])
    def test_gradients_vs_finite_differences(self, rng, kind):
        for seed in range(20):
            local = np.random.default_rng(seed)
            raw = local.standard_normal((3, 5))
            if kind == "log":
                raw = np.abs(raw) + 0.5
            if kind == "relu":
                raw += np.sign(raw) * 1e-3  # keep clear of the kink
            x = Tensor(raw.copy(), requires_grad=True)
            ad.backward(ad.reduce_mean(ad.map_unary(x, kind)))

            def value():
                return ad.reduce_mean(ad.map_unary(Tensor(x.data), kind)).item()

            (fd,) = central_difference(value, [x.data])
            assert_gradients_close(x.grad, fd)


class TestReductions:
    def test_mean_vector(self):
        assert ad.reduce_mean(Tensor([1.0, 2.0, 3.0])).item() == 2.0

    def test_mean_axis(self):
        out = ad.reduce_mean(Tensor([[1.0, 3.0], [5.0, 7.0]]), axis=0)
        np.testing.assert_array_equal(out.data, [3.0, 5.0])

    def test_mean_scalar_identity(self):
        for c in (-2.5, 0.0, 7.25):
            assert ad.reduce_mean(Tensor([c])).item() == c

    def test_empty_rejected(self):
        with pytest.raises(DomainError):
            ad.reduce_mean(Tensor(np.zeros(0)))

    def test_mean_gradient_distributes(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        ad.backward(ad.reduce_mean(x))
        np.testing.assert_allclose(x.grad, np.full((2, 3), 1.0 / 6.0))


class TestRowFusedOps:
    def test_logsumexp_matches_numpy(self, rng):
        x = Tensor(rng.standard_normal((4, 6)) * 30.0, requires_grad=True)
        out = ad.logsumexp_rows(x)
        expected = np.log(np.exp(x.data - x.data.max(axis=1, keepdims=True)).sum(axis=1))
        expected += x.data.max(axis=1)
        np.testing.assert_allclose(out.data, expected, rtol=1e-12)

    def test_softmax_rows_sum_to_one(self, rng):
        p = ad.softmax_rows(Tensor(rng.standard_normal((5, 7)) * 20.0))
        np.testing.assert_allclose(p.data.sum(axis=1), 1.0, atol=1e-12)

    @pytest.mark.parametrize("op", [ad.logsumexp_rows, ad.softmax_rows])
    def test_gradients(self, rng, op):
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        weights = rng.standard_normal(op(Tensor(x.data)).shape)
        ad.backward(ad.reduce_sum(op(x) * Tensor(weights)))

        def value():
            return float((op(Tensor(x.data)).data * weights).sum())

        (fd,) = central_difference(value, [x.data])
        assert_gradients_close(x.grad, fd)


class TestSpatialOps:
    def test_conv_all_ones(self):
        x = Tensor(np.ones((1, 3, 3, 1)))
        k = Tensor(np.ones((2, 2, 1, 1)))
        out = ad.conv2d(x, k, Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, np.full((1, 2, 2, 1), 4.0))

    def test_conv_identity_kernel_crops(self, rng):
        x = rng.standard_normal((2, 5, 4, 1))
        k = np.zeros((2, 2, 1, 1))
        k[0, 0, 0, 0] = 1.0
        out = ad.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(1)))
        np.testing.assert_allclose(out.data[..., 0], x[:, :4, :3, 0])

    def test_conv_channel_sum(self, rng):
        x = rng.standard_normal((1, 4, 4, 2))
        k = np.zeros((1, 1, 2, 1))
        k[0, 0, :, 0] = 1.0
        out = ad.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(1)))
        np.testing.assert_allclose(out.data[0, :, :, 0], x[0].sum(axis=2))

    def test_conv_matches_nested_loop_oracle(self, rng):
        x = Tensor(rng.standard_normal((2, 6, 5, 3)), requires_grad=True)
        k = Tensor(rng.standard_normal((3, 2, 3, 4)), requires_grad=True)
        bias = Tensor(rng.standard_normal(4), requires_grad=True)
        out = ad.conv2d(x, k, bias)
        ref = np.zeros(out.shape)
        for b in range(2):
            for i in range(4):
                for j in range(4):
                    for o in range(4):
                        acc = bias.data[o]
                        for c in range(3):
                            for p in range(3):
                                for q in range(2):
                                    acc += x.data[b, i + p, j + q, c] * k.data[p, q, c, o]
                        ref[b, i, j, o] = acc
        np.testing.assert_allclose(out.data, ref, atol=1e-12)

    def test_conv_kernel_too_large(self):
        with pytest.raises(DimensionError):
            ad.conv2d(Tensor(np.ones((1, 2, 2, 1))), Tensor(np.ones((3, 3, 1, 1))),
                      Tensor(np.zeros(1)))

    def test_conv_gradients(self, rng):
        x = Tensor(rng.standard_normal((2, 5, 5, 2)), requires_grad=True)
        k = Tensor(rng.standard_normal((2, 2, 2, 3)), requires_grad=True)
        bias = Tensor(rng.standard_normal(3), requires_grad=True)
        weights = rng.standard_normal((2, 4, 4, 3))
        ad.backward(ad.reduce_sum(ad.conv2d(x, k, bias) * Tensor(weights)))

        def value():
            out = ad.conv2d(Tensor(x.data), Tensor(k.data), Tensor(bias.data))
            return float((out.data * weights).sum())

        fds = central_difference(value, [x.data, k.data, bias.data])
        for tensor, fd in zip((x, k, bias), fds):
            assert_gradients_close(tensor.grad, fd)

    def test_maxpool_basic(self):
        out = ad.maxpool2d(Tensor([[[[1.0], [2.0]], [[3.0], [4.0]]]]), 2)
        np.testing.assert_array_equal(out.data, [[[[4.0]]]])

    def test_maxpool_constant_keeps_value(self):
        x = Tensor(np.full((1, 4, 4, 2), 3.25))
        out = ad.maxpool2d(x, 2)
        np.testing.assert_array_equal(out.data, np.full((1, 2, 2, 2), 3.25))

    def test_maxpool_tie_routes_to_first_entry(self):
        x = Tensor(np.full((1, 2, 2, 1), 4.0), requires_grad=True)
        ad.backward(ad.reduce_sum(ad.maxpool2d(x, 2)))
        np.testing.assert_array_equal(x.grad[0, :, :, 0], [[1.0, 0.0], [0.0, 0.0]])

    def test_maxpool_rejects_indivisible(self):
        with pytest.raises(DimensionError):
            ad.maxpool2d(Tensor(np.zeros((1, 3, 4, 1))), 2)

    def test_maxpool_gradient(self, rng):
        x = Tensor(rng.standard_normal((2, 4, 6, 3)), requires_grad=True)
        weights = rng.standard_normal((2, 2, 3, 3))
        ad.backward(ad.reduce_sum(ad.maxpool2d(x, 2) * Tensor(weights)))

        def value():
            return float((ad.maxpool2d(Tensor(x.data), 2).data * weights).sum())

        (fd,) = central_difference(value, [x.data])
        assert_gradients_close(x.grad, fd)

    def test_avgpool_matches_window_means(self, rng):
        x = rng.standard_normal((2, 4, 4, 2))
        out = ad.avgpool2d(Tensor(x), 2)
        ref = x.reshape(2, 2, 2, 2, 2, 2).mean(axis=(2, 4))
        np.testing.assert_allclose(out.data, ref, atol=1e-12)

    def test_avgpool_gradient(self, rng):
        x = Tensor(rng.standard_normal((1, 4, 4, 2)), requires_grad=True)
        weights = rng.standard_normal((1, 2, 2, 2))
        ad.backward(ad.reduce_sum(ad.avgpool2d(x, 2) * Tensor(weights)))

        def value():
            return float((ad.avgpool2d(Tensor(x.data), 2).data * weights).sum())

        (fd,) = central_difference(value, [x.data])
        assert_gradients_close(x.grad, fd)


class TestBackward:
    def test_power_rule(self):
        x = Tensor(3.0, requires_grad=True)
        ad.backward(x * x)
        np.testing.assert_allclose(x.grad, 6.0)

    def test_accumulation_over_multiple_uses(self):
        x = Tensor([1.0, 1.0], requires_grad=True)
        ad.backward(ad.reduce_sum(x + x))
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            ad.backward(x + x)

    def test_composite_graph_matches_finite_differences(self):
        for seed in range(30):
            rng = np.random.default_rng(seed)
            a = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
            b = Tensor(rng.standard_normal((3, 2)), requires_grad=True)

            def forward(at, bt):
                z = ad.tanh(ad.matmul(at, bt))
                s = ad.sigmoid(z) * ad.softplus(z) + ad.exp(z * 0.3)
                return ad.reduce_mean(s * s)

            ad.backward(forward(a, b))

            def value():
                return forward(Tensor(a.data), Tensor(b.data)).item()

            fd_a, fd_b = central_difference(value, [a.data, b.data])
            assert_gradients_close(a.grad, fd_a)
            assert_gradients_close(b.grad, fd_b)

    def test_determinism_bitwise(self):
        def run():
            rng = np.random.default_rng(77)
            a = Tensor(rng.standard_normal((8, 8)), requires_grad=True)
            loss = ad.reduce_mean(ad.tanh(ad.matmul(a, a)) * 3.0)
            ad.backward(loss)
            return loss.data.copy(), a.grad.copy()

        l1, g1 = run()
        l2, g2 = run()
        assert l1.tobytes() == l2.tobytes()
        assert g1.tobytes() == g2.tobytes()

    def test_two_forwards_independent_backwards(self, rng):
        x = Tensor(rng.standard_normal(5), requires_grad=True)
        first = ad.reduce_sum(x * 2.0)
        second = ad.reduce_sum(x * x)
        ad.backward(first)
        grad_first = x.grad.copy()
        x.grad = None
        ad.backward(second)
        np.testing.assert_allclose(grad_first, np.full(5, 2.0))
        np.testing.assert_allclose(x.grad, 2.0 * x.data)

    def test_no_grad_blocks_recording(self, rng):
        x = Tensor(rng.standard_normal(4), requires_grad=True)
        with ad.no_grad():
            out = ad.reduce_sum(x * x)
        assert not out.requires_grad
        with pytest.raises(ContractError):
            ad.backward(out)

    def test_broadcast_bias_gradient(self, rng):
        x = Tensor(rng.standard_normal((6, 3)), requires_grad=True)
        bias = Tensor(rng.standard_normal(3), requires_grad=True)
        ad.backward(ad.reduce_sum((x + bias) * 2.0))
        np.testing.assert_allclose(bias.grad, np.full(3, 12.0))


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = Tensor([1.5, -2.0], requires_grad=True)
        opt = Adam([("p", p)])
        p.grad = np.zeros(2)
        opt.step()
        np.testing.assert_array_equal(p.data, [1.5, -2.0])
        assert opt.step_count == 1

    def test_first_step_moves_by_learning_rate(self):
        p = Tensor([0.0], requires_grad=True)
        opt = Adam([("p", p)])
        p.grad = np.ones(1)
        opt.step()
        # bias-corrected first step: m_hat = g, v_hat = g^2
        np.testing.assert_allclose(p.data, [-0.001 / (1.0 + 1e-8)], rtol=1e-12)
        assert p.grad is None

    def test_statefulness_differs_from_doubled_rate(self):
        def one(lr, steps):
            p = Tensor([1.0], requires_grad=True)
            opt = Adam([("p", p)], learning_rate=lr)
            for i in range(steps):
                p.grad = np.array([0.5 + 0.5 * i])
                opt.step()
            return p.data[0]

        assert one(0.001, 2) != one(0.002, 1)

    def test_missing_grad_names_parameter(self):
        p = Tensor([1.0], requires_grad=True)
        opt = Adam([("encoder.w0", p)])
        with pytest.raises(ContractError, match="encoder.w0"):
            opt.step()

    def test_invalid_hyperparameters(self):
        from fedmm.exceptions import ConfigError
        p = Tensor([1.0], requires_grad=True)
        with pytest.raises(ConfigError):
            Adam([("p", p)], beta1=1.0)
        with pytest.raises(ConfigError):
            Adam([("p", p)], epsilon=0.0)
