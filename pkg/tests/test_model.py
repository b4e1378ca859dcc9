"""Encoder, fusion, head and parameter-set tests with independent oracles."""

import numpy as np
import pytest

from fedmm import autodiff as ad
from fedmm.autodiff import Tensor
from fedmm.data import rng_stream
from fedmm.exceptions import ConfigError, DimensionError, DomainError
from fedmm.model import (AttentionFusion, ConvEncoder, GlobalModel, LstmEncoder,
                         LstmGates, MeanFusion, MlpEncoder, ModalityArch, ModelArch,
                         PredictionHead, default_arch, forward_sample, lstm_step)

from conftest import assert_gradients_close, central_difference


def small_arch(latent_dim=4, fusion="attention"):
    return ModelArch(
        modalities=(
            ModalityArch(name="image", kind="conv", input_shape=(1, 6, 6),
                         conv_layers=((2, 3),), conv_pool=2, conv_pooling="max",
                         conv_fc=4),
            ModalityArch(name="text", kind="lstm", input_shape=(3, 5),
                         lstm_hidden=3, bidirectional=True),
            ModalityArch(name="vector", kind="mlp", input_shape=(6,),
                         mlp_hidden=(4,)),
        ),
        latent_dim=latent_dim, head_hidden=(3,), fusion=fusion)


def sample_batch(rng, arch, batch=3):
    return {m.name: rng.standard_normal((batch, *m.input_shape))
            for m in arch.modalities}


class TestMlpEncoder:
    def test_zero_params_give_zero(self, rng):
        enc = MlpEncoder.build(None, 5, (4,), 3)
        out = enc.forward(rng.standard_normal((2, 5)))
        np.testing.assert_array_equal(out.data, np.zeros((2, 3)))

    def test_no_hidden_identity_weights(self):
        enc = MlpEncoder.build(None, 2, (), 2)
        enc.weights[0].data[...] = np.eye(2)
        out = enc.forward(np.array([[1.0, 2.0]]))
        np.testing.assert_array_equal(out.data, [[1.0, 2.0]])

    def test_hand_evaluated_relu_chain(self):
        enc = MlpEncoder.build(None, 1, (1,), 1)
        enc.weights[0].data[...] = [[-1.0]]
        enc.weights[1].data[...] = [[5.0]]
        enc.biases[1].data[...] = [3.0]
        out = enc.forward(np.array([[2.0]]))
        np.testing.assert_allclose(out.data, [[3.0]])  # relu(-2) = 0, then 0*5+3

    def test_shape_mismatch(self):
        enc = MlpEncoder.build(None, 5, (4,), 3)
        with pytest.raises(DimensionError):
            enc.forward(np.zeros((2, 6)))


class TestConvEncoder:
    def test_zero_params_give_zero(self, rng):
        enc = ConvEncoder.build(None, (2, 5, 5), ((3, 2),), 2, 4, 6)
        out = enc.forward(rng.standard_normal((2, 2, 5, 5)))
        np.testing.assert_array_equal(out.data, np.zeros((2, 6)))

    def test_single_pixel_passthrough(self):
        enc = ConvEncoder.build(None, (1, 1, 1), ((1, 1),), 1, 1, 1)
        enc.kernels[0].data[...] = 1.0
        enc.w_fc.data[...] = 1.0
        enc.w_out.data[...] = 1.0
        out = enc.forward(np.array([[[[2.5]]]]))
        np.testing.assert_allclose(out.data, [[2.5]])

    def test_matches_straight_line_oracle(self, rng):
        enc = ConvEncoder.build(rng_stream(3), (3, 8, 8), ((4, 3),), 2, 5, 4,
                                pooling="max")
        x = rng.standard_normal((2, 3, 8, 8))
        out = enc.forward(x)

        # independent nested-loop re-evaluation of the same pipeline
        def oracle(img):  # img (3,8,8) channel-first
            hwc = img.transpose(1, 2, 0)
            conv = np.zeros((6, 6, 4))
            for i in range(6):
                for j in range(6):
                    for o in range(4):
                        acc = enc.conv_biases[0].data[o]
                        for p in range(3):
                            for q in range(3):
                                for c in range(3):
                                    acc += hwc[i + p, j + q, c] * enc.kernels[0].data[p, q, c, o]
                        conv[i, j, o] = acc
            act = np.maximum(conv, 0.0)
            pooled = np.zeros((3, 3, 4))
            for i in range(3):
                for j in range(3):
                    for o in range(4):
                        pooled[i, j, o] = act[2 * i:2 * i + 2, 2 * j:2 * j + 2, o].max()
            flat = pooled.reshape(-1)
            hidden = np.maximum(flat @ enc.w_fc.data + enc.b_fc.data, 0.0)
            return hidden @ enc.w_out.data + enc.b_out.data

        ref = np.stack([oracle(x[i]) for i in range(2)])
        np.testing.assert_allclose(out.data, ref, atol=1e-12)

    def test_indivisible_pooling_is_config_error(self):
        with pytest.raises(ConfigError):
            ConvEncoder.build(None, (1, 6, 6), ((2, 2),), 2, 4, 4)


class TestLstm:
    def test_zero_params_zero_state(self):
        gates = LstmGates.build(None, 4, 3)
        h, c = lstm_step(gates, Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 3))),
                         Tensor(np.zeros((2, 3))))
        np.testing.assert_array_equal(h.data, np.zeros((2, 3)))
        np.testing.assert_array_equal(c.data, np.zeros((2, 3)))

    def test_memory_limit_preserves_cell(self, rng):
        gates = LstmGates.build(rng_stream(5), 4, 3)
        gates.b_forget.data[...] = 30.0   # forget gate ~ 1
        gates.b_input.data[...] = -30.0   # input gate ~ 0
        c_prev = rng.standard_normal((2, 3))
        _, c = lstm_step(gates, Tensor(rng.standard_normal((2, 4))),
                         Tensor(rng.standard_normal((2, 3))), Tensor(c_prev))
        assert np.max(np.abs(c.data - c_prev)) < 1e-9

    def test_three_step_sequence_matches_scalar_oracle(self, rng):
        gates = LstmGates.build(rng_stream(6), 2, 3)
        xs = rng.standard_normal((1, 3, 2))

        def sig(v):
            return 1.0 / (1.0 + np.exp(-v))

        h = np.zeros(3)
        c = np.zeros(3)
        for t in range(3):
            joint = np.concatenate([h, xs[0, t]])
            f = sig(gates.w_forget.data @ joint + gates.b_forget.data)
            i = sig(gates.w_input.data @ joint + gates.b_input.data)
            cand = np.tanh(gates.w_cell.data @ joint + gates.b_cell.data)
            c = f * c + i * cand
            o = sig(gates.w_output.data @ joint + gates.b_output.data)
            h = o * np.tanh(c)

        ht = Tensor(np.zeros((1, 3)))
        ct = Tensor(np.zeros((1, 3)))
        for t in range(3):
            ht, ct = lstm_step(gates, Tensor(xs[:, t]), ht, ct)
        np.testing.assert_allclose(ht.data[0], h, atol=1e-12)
        np.testing.assert_allclose(ct.data[0], c, atol=1e-12)

    def test_zero_params_sequence_outputs_bias(self, rng):
        enc = LstmEncoder.build(None, 4, 3, 5, bidirectional=False)
        enc.b_proj.data[...] = np.arange(5.0)
        out = enc.forward(rng.standard_normal((2, 6, 4)))
        np.testing.assert_allclose(out.data, np.tile(np.arange(5.0), (2, 1)))

    def test_length_one_equals_single_step_plus_projection(self, rng):
        enc = LstmEncoder.build(rng_stream(7), 4, 3, 5, bidirectional=False)
        x = rng.standard_normal((2, 1, 4))
        h, _ = lstm_step(enc.forward_gates, Tensor(x[:, 0]),
                         Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
        expected = h.data @ enc.w_proj.data + enc.b_proj.data
        np.testing.assert_allclose(enc.forward(x).data, expected, atol=1e-12)

    def test_bidirectional_concatenates_final_states(self, rng):
        enc = LstmEncoder.build(rng_stream(8), 2, 3, 4, bidirectional=True)
        x = rng.standard_normal((1, 4, 2))

        def run(gates, seq):
            h = Tensor(np.zeros((1, 3)))
            c = Tensor(np.zeros((1, 3)))
            for t in range(seq.shape[1]):
                h, c = lstm_step(gates, Tensor(seq[:, t]), h, c)
            return h.data

        hf = run(enc.forward_gates, x)
        hb = run(enc.backward_gates, x[:, ::-1])
        expected = np.concatenate([hf, hb], axis=1) @ enc.w_proj.data + enc.b_proj.data
        np.testing.assert_allclose(enc.forward(x).data, expected, atol=1e-12)

    def test_empty_sequence_rejected(self, rng):
        enc = LstmEncoder.build(rng_stream(9), 4, 3, 5, bidirectional=False)
        with pytest.raises(DomainError):
            enc.forward(np.zeros((2, 0, 4)))

    def test_ten_step_encoding_matches_oracle(self, rng):
        enc = LstmEncoder.build(rng_stream(10), 5, 4, 6, bidirectional=False)
        x = rng.standard_normal((1, 10, 5))

        def sig(v):
            return 1.0 / (1.0 + np.exp(-v))

        h = np.zeros(4)
        c = np.zeros(4)
        g = enc.forward_gates
        for t in range(10):
            joint = np.concatenate([h, x[0, t]])
            f = sig(g.w_forget.data @ joint + g.b_forget.data)
            i = sig(g.w_input.data @ joint + g.b_input.data)
            cand = np.tanh(g.w_cell.data @ joint + g.b_cell.data)
            c = f * c + i * cand
            o = sig(g.w_output.data @ joint + g.b_output.data)
            h = o * np.tanh(c)
        expected = h @ enc.w_proj.data + enc.b_proj.data
        np.testing.assert_allclose(enc.forward(x).data[0], expected, atol=1e-12)


class TestFusion:
    def test_equal_features_give_uniform_weights(self, rng):
        fusion = AttentionFusion.build(rng_stream(11), 4)
        z = Tensor(rng.standard_normal((3, 4)))
        fused, alpha = fusion.forward([z, z, z], return_weights=True)
        np.testing.assert_allclose(alpha, np.full((3, 3), 1 / 3), atol=1e-12)
        expected = z.data @ fusion.w_fusion.data + fusion.b_fusion.data
        np.testing.assert_allclose(fused.data, expected, atol=1e-12)

    def test_single_modality_weight_is_one(self, rng):
        fusion = AttentionFusion.build(rng_stream(12), 4)
        z = Tensor(rng.standard_normal((2, 4)))
        fused, alpha = fusion.forward([z], return_weights=True)
        np.testing.assert_allclose(alpha, np.ones((2, 1)), atol=1e-15)
        expected = z.data @ fusion.w_fusion.data + fusion.b_fusion.data
        np.testing.assert_allclose(fused.data, expected, atol=1e-12)

    def test_two_way_softmax_log3_gap(self):
        fusion = AttentionFusion.build(None, 2)
        fusion.w_att.data[...] = [[1.0], [0.0]]
        z1 = Tensor(np.array([[np.log(3.0), 0.0]]))
        z2 = Tensor(np.array([[0.0, 0.0]]))
        _, alpha = fusion.forward([z1, z2], return_weights=True)
        np.testing.assert_allclose(alpha, [[0.75, 0.25]], atol=1e-12)

    def test_weights_positive_sum_to_one(self, rng):
        fusion = AttentionFusion.build(rng_stream(13), 6)
        for trial in range(25):
            local = np.random.default_rng(trial)
            feats = [Tensor(local.standard_normal((4, 6)) * local.uniform(0.1, 30))
                     for _ in range(local.integers(1, 5))]
            _, alpha = fusion.forward(feats, return_weights=True)
            assert np.all(alpha > 0)
            np.testing.assert_allclose(alpha.sum(axis=1), 1.0, atol=1e-12)

    def test_empty_feature_list_rejected(self, rng):
        fusion = AttentionFusion.build(rng_stream(14), 4)
        with pytest.raises(DomainError):
            fusion.forward([])

    def test_mean_fusion_uniform(self, rng):
        fusion = MeanFusion.build(rng_stream(15), 4)
        z1 = Tensor(rng.standard_normal((2, 4)))
        z2 = Tensor(rng.standard_normal((2, 4)))
        fused, alpha = fusion.forward([z1, z2], return_weights=True)
        np.testing.assert_allclose(alpha, 0.5)
        expected = 0.5 * (z1.data + z2.data) @ fusion.w_fusion.data + fusion.b_fusion.data
        np.testing.assert_allclose(fused.data, expected, atol=1e-12)


class TestHead:
    def test_zero_params_zero_output(self, rng):
        head = PredictionHead.build(None, 4, (3,))
        out = head.forward(Tensor(rng.standard_normal((5, 4))))
        np.testing.assert_array_equal(out.data, np.zeros(5))

    def test_affine_readout(self):
        head = PredictionHead.build(None, 3, ())
        head.weights[0].data[...] = [[1.0, 0.0, 0.0]]
        head.biases[0].data[...] = [2.0]
        out = head.forward(Tensor(np.array([[3.0, 9.0, 9.0]])))
        np.testing.assert_allclose(out.data, [5.0])

    def test_matches_layer_by_layer_oracle(self, rng):
        head = PredictionHead.build(rng_stream(16), 4, (3, 2))
        z = rng.standard_normal((3, 4))
        a = z
        for w, b in zip(head.weights[:-1], head.biases[:-1]):
            a = np.maximum(a @ w.data.T + b.data, 0.0)
        expected = (a @ head.weights[-1].data.T + head.biases[-1].data).ravel()
        np.testing.assert_allclose(head.forward(Tensor(z)).data, expected, atol=1e-12)


class TestGlobalModel:
    def test_forward_sample_equals_manual_composition(self, rng):
        arch = small_arch()
        model = GlobalModel.build(arch, rng_stream(17))
        batch = sample_batch(rng, arch, batch=1)
        from fedmm.data import ModalSample
        sample = ModalSample({k: v[0] for k, v in batch.items()}, 0.0)
        feats, fused, pred = forward_sample(model, sample)
        by_hand = [model.encoders[m.name].forward(batch[m.name]) for m in arch.modalities]
        fused_hand = model.fusion.forward(by_hand)
        pred_hand = model.head.forward(fused_hand)
        for m, z in zip(arch.modalities, by_hand):
            np.testing.assert_allclose(feats[m.name].data, z.data, atol=1e-15)
        np.testing.assert_allclose(fused.data, fused_hand.data, atol=1e-15)
        np.testing.assert_allclose(pred.data, pred_hand.data, atol=1e-15)

    def test_zero_model_prediction_from_biases(self, rng):
        arch = small_arch()
        model = GlobalModel.build(arch, rng=None)
        batch = sample_batch(rng, arch)
        feats, fused, preds = model.forward_batch(batch)
        for z in feats:
            np.testing.assert_array_equal(z.data, np.zeros_like(z.data))
        np.testing.assert_array_equal(fused.data, np.zeros_like(fused.data))
        np.testing.assert_array_equal(preds.data, np.zeros(3))

    def test_missing_modality_named(self, rng):
        arch = small_arch()
        model = GlobalModel.build(arch, rng_stream(18))
        batch = sample_batch(rng, arch)
        del batch["text"]
        with pytest.raises(DimensionError, match="text"):
            model.forward_batch(batch)

    def test_encoder_outputs_have_latent_dim(self, rng):
        for latent in (2, 5, 8):
            arch = small_arch(latent_dim=latent)
            model = GlobalModel.build(arch, rng_stream(19 + latent))
            feats, fused, _ = model.forward_batch(sample_batch(rng, arch, batch=2))
            for z in feats:
                assert z.shape == (2, latent)
            assert fused.shape == (2, latent)

    def test_flatten_unflatten_bijection(self, rng):
        arch = small_arch()
        model = GlobalModel.build(arch, rng_stream(20))
        flat = model.get_flat()
        twin = GlobalModel.build(arch, rng_stream(999))
        twin.set_flat(flat)
        assert twin.get_flat().tobytes() == flat.tobytes()

    def test_clone_is_deep(self, rng):
        arch = small_arch()
        model = GlobalModel.build(arch, rng_stream(21))
        twin = model.clone()
        assert twin.get_flat().tobytes() == model.get_flat().tobytes()
        twin.named_params()[0][1].data += 1.0
        assert twin.get_flat().tobytes() != model.get_flat().tobytes()

    def test_end_to_end_gradient_matches_finite_differences(self):
        arch = small_arch()
        for seed in range(6):
            rng = np.random.default_rng(seed)
            model = GlobalModel.build(arch, rng_stream(100 + seed))
            assert model.param_count() <= 2000
            batch = sample_batch(rng, arch, batch=2)
            targets = rng.standard_normal(2)

            def loss_value(m):
                _, _, preds = m.forward_batch(batch)
                diff = preds - Tensor(targets)
                return ad.reduce_mean(diff * diff)

            ad.backward(loss_value(model))
            analytic = {name: p.grad.copy() for name, p in model.named_params()}
            frozen = model.clone()

            probe = np.random.default_rng(1000 + seed)
            names = [n for n, _ in frozen.named_params()]
            params = dict(frozen.named_params())
            for name in probe.choice(names, size=6, replace=False):
                p = params[name]
                idx = tuple(probe.integers(0, s) for s in p.shape) if p.shape else ()
                h = 1e-5
                orig = p.data[idx]
                p.data[idx] = orig + h
                up = loss_value(frozen).item()
                p.data[idx] = orig - h
                down = loss_value(frozen).item()
                p.data[idx] = orig
                fd = (up - down) / (2 * h)
                assert_gradients_close(analytic[name][idx], fd)

    def test_checkpoint_roundtrip(self, rng, tmp_path):
        arch = small_arch()
        model = GlobalModel.build(arch, rng_stream(22))
        path = tmp_path / "model.bin"
        model.save(path)
        loaded = GlobalModel.load(path)
        assert loaded.get_flat().tobytes() == model.get_flat().tobytes()
        batch = sample_batch(rng, arch)
        np.testing.assert_array_equal(loaded.predict_batch(batch),
                                      model.predict_batch(batch))

    def test_default_arch_routes_by_rank(self):
        arch = default_arch({"a": (3, 8, 8), "b": (4, 7), "c": (9,)})
        kinds = {m.name: m.kind for m in arch.modalities}
        assert kinds == {"a": "conv", "b": "lstm", "c": "mlp"}
