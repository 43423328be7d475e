"""Network-level contracts: determinism, shapes, scalar oracles for the
attention ops, siamese symmetry, and the checkpoint format."""

import numpy as np
import pytest

from agnet import autodiff as ad
from agnet import model as m
from agnet.errors import CheckpointError, ConfigError, NumericError, ShapeError

RNG = np.random.default_rng(7011)


def small_config(seed=0, **kw):
    args = dict(backbone_channels=(4, 6), spatial_size=2, num_identities=5,
                num_colors=3, num_types=2, embedding_dim=8, seed=seed)
    args.update(kw)
    return m.ModelConfig(**args)


# Scalar reference implementations, independent of the autodiff path.

def mask_oracle(f_r, weight, bias):
    c, h, w = f_r.shape
    pooled = [float(f_r[i].sum()) / (h * w) for i in range(c)]
    logits = [sum(weight[o][i] * pooled[i] for i in range(c)) + bias[o]
              for o in range(weight.shape[0])]
    exps = [np.exp(v) for v in logits]
    total = sum(exps)
    return np.array([e / total for e in exps])


def guided_oracle(f_c, mask, weight, bias):
    c, h, w = f_c.shape
    gate = [sum(weight[o][i] * mask[i] for i in range(len(mask))) + bias[o]
            for o in range(c)]
    out = np.empty_like(f_c)
    for i in range(c):
        for y in range(h):
            for x in range(w):
                out[i, y, x] = f_c[i, y, x] + f_c[i, y, x] * gate[i]
    return out


def verify_oracle(f1, f2, weight, bias):
    fv = [(a - b) ** 2 for a, b in zip(f1, f2)]
    return np.array([sum(weight[k][i] * fv[i] for i in range(len(fv))) + bias[k]
                     for k in range(2)])


class TestModelConfig:
    def test_invalid_dimension_rejected(self):
        with pytest.raises(ConfigError):
            small_config(num_identities=0)
        with pytest.raises(ConfigError):
            m.ModelConfig(backbone_channels=(4, 0), spatial_size=2,
                          num_identities=5, num_colors=3, num_types=2)

    def test_mask_dim_defaults_to_last_channel(self):
        assert small_config().mask_dim == 6

    def test_mask_dim_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            small_config(mask_dim=4)

    def test_input_side(self):
        assert small_config().input_side == 8
        assert m.desk_config(8, 3, 2).input_side == 32


class TestBuildModel:
    def test_same_seed_bit_identical(self):
        a = m.build_model(small_config(seed=7))
        b = m.build_model(small_config(seed=7))
        assert list(a.params) == list(b.params)
        for name in a.params:
            assert np.array_equal(a.params[name], b.params[name]), name

    def test_different_seed_differs(self):
        a = m.build_model(small_config(seed=7))
        b = m.build_model(small_config(seed=8))
        assert any(not np.array_equal(a.params[n], b.params[n])
                   for n in a.params)

    def test_id_logits_length_follows_config(self):
        model = m.build_model(small_config(num_identities=8))
        out = m.forward_branch(model, RNG.uniform(size=(3, 8, 8)))
        assert out.id_logits.shape == (8,)

    def test_desk_config_shape_propagation(self):
        # 32x32 input, three stride-2 blocks: 32 -> 16 -> 8 -> 4, then GAP
        # over 4x4 maps of 64 channels, embeddings of 64.
        config = m.desk_config(8, 3, 2, seed=1)
        model = m.build_model(config)
        out = m.forward_branch(model, RNG.uniform(size=(3, 32, 32)))
        assert out.id_logits.shape == (8,)
        assert out.color_logits.shape == (3,)
        assert out.type_logits.shape == (2,)
        assert out.attr_embedding.shape == (64,)
        assert out.cat_embedding.shape == (64,)
        assert out.mask.weights.shape == (64,)
        assert model.params["stem.weight"].shape == (16, 3, 3, 3)
        assert model.params["backbone.2.conv2.weight"].shape == (64, 64, 3, 3)

    def test_params_are_float32(self):
        model = m.build_model(small_config())
        assert all(p.dtype == np.float32 for p in model.params.values())


class TestAttributeMask:
    def test_equal_channel_means_give_uniform_mask(self):
        c = 6
        f_r = RNG.standard_normal((c, 4, 4))
        f_r -= f_r.mean(axis=(1, 2), keepdims=True)  # every channel mean 0
        params = m.MaskParams(np.eye(c), np.zeros(c))
        mask = m.attribute_mask(f_r, params).data
        np.testing.assert_allclose(mask, np.full(c, 1.0 / c), atol=1e-12)

    def test_sums_to_one_for_random_inputs(self):
        params = m.MaskParams(RNG.standard_normal((6, 6)),
                              RNG.standard_normal(6))
        for _ in range(50):
            f_r = RNG.standard_normal((2, 6, 3, 3)) * 10
            mask = m.attribute_mask(f_r, params).data
            assert np.all(mask >= 0)
            np.testing.assert_allclose(mask.sum(axis=1), 1.0, atol=1e-5)

    def test_matches_scalar_oracle(self):
        weight = RNG.standard_normal((5, 5))
        bias = RNG.standard_normal(5)
        f_r = RNG.standard_normal((5, 4, 4))
        got = m.attribute_mask(f_r, m.MaskParams(weight, bias)).data
        np.testing.assert_allclose(got, mask_oracle(f_r, weight, bias),
                                   atol=1e-6)

    def test_non_finite_input_rejected(self):
        f_r = np.full((3, 2, 2), np.nan)
        params = m.MaskParams(np.eye(3), np.zeros(3))
        with pytest.raises(NumericError):
            m.attribute_mask(f_r, params)


class TestApplyMask:
    def test_uniform_mask_scales_everything(self):
        f = RNG.standard_normal((4, 3, 3))
        out = m.apply_mask(f, np.full(4, 0.25)).data
        np.testing.assert_allclose(out, f * 0.25, atol=1e-12)

    def test_one_hot_mask_keeps_one_channel(self):
        f = RNG.standard_normal((4, 3, 3))
        mask = np.zeros(4)
        mask[2] = 1.0
        out = m.apply_mask(f, mask).data
        np.testing.assert_allclose(out[2], f[2])
        assert np.all(out[[0, 1, 3]] == 0)

    def test_matches_elementwise_oracle(self):
        f = RNG.standard_normal((2, 5, 3, 3))
        mask = RNG.uniform(0.1, 1.0, (2, 5))
        got = m.apply_mask(f, mask).data
        ref = np.empty_like(f)
        for n in range(2):
            for c in range(5):
                ref[n, c] = f[n, c] * mask[n, c]
        np.testing.assert_allclose(got, ref, atol=1e-7)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            m.apply_mask(RNG.standard_normal((4, 3, 3)), np.full(5, 0.2))


class TestGuidedCategoryFeatures:
    def test_zero_guide_params_is_identity_bitwise(self):
        f_c = RNG.standard_normal((2, 6, 4, 4))
        mask = RNG.uniform(0.1, 1.0, (2, 6))
        params = m.GuideParams(np.zeros((6, 6)), np.zeros(6))
        out = m.guided_category_features(f_c, mask, params).data
        assert np.array_equal(out, f_c)

    def test_unit_gate_doubles_input(self):
        f_c = RNG.standard_normal((6, 4, 4))
        mask = RNG.uniform(0.1, 1.0, 6)
        params = m.GuideParams(np.zeros((6, 6)), np.ones(6))
        out = m.guided_category_features(f_c, mask, params).data
        np.testing.assert_allclose(out, 2.0 * f_c, atol=1e-12)

    def test_matches_scalar_oracle(self):
        f_c = RNG.standard_normal((5, 3, 3))
        mask = RNG.uniform(0.0, 1.0, 4)
        weight = RNG.standard_normal((5, 4))
        bias = RNG.standard_normal(5)
        got = m.guided_category_features(
            f_c, mask, m.GuideParams(weight, bias)).data
        np.testing.assert_allclose(got, guided_oracle(f_c, mask, weight, bias),
                                   atol=1e-6)

    def test_shape_mismatch_rejected(self):
        params = m.GuideParams(np.zeros((5, 4)), np.zeros(5))
        with pytest.raises(ShapeError):
            m.guided_category_features(RNG.standard_normal((6, 3, 3)),
                                       np.full(4, 0.25), params)


class TestVerificationHead:
    def test_equal_embeddings_give_projection_bias(self):
        f = RNG.standard_normal(8)
        weight = RNG.standard_normal((2, 8))
        bias = RNG.standard_normal(2)
        out = m.verification_head(f, f.copy(), m.VerifyParams(weight, bias))
        np.testing.assert_allclose(out.data, bias, atol=1e-12)

    def test_unit_basis_squares(self):
        params = m.VerifyParams(np.ones((2, 2)), np.zeros(2))
        out = m.verification_head(np.array([1.0, 0.0]), np.array([0.0, 1.0]),
                                  params)
        # f_v = (1, 1), both logits sum it
        np.testing.assert_allclose(out.data, [2.0, 2.0])

    def test_matches_scalar_oracle(self):
        f1 = RNG.standard_normal(6)
        f2 = RNG.standard_normal(6)
        weight = RNG.standard_normal((2, 6))
        bias = RNG.standard_normal(2)
        got = m.verification_head(f1, f2, m.VerifyParams(weight, bias)).data
        np.testing.assert_allclose(got, verify_oracle(f1, f2, weight, bias),
                                   atol=1e-7)

    def test_length_mismatch_rejected(self):
        params = m.VerifyParams(np.zeros((2, 4)), np.zeros(2))
        with pytest.raises(ShapeError):
            m.verification_head(np.zeros(4), np.zeros(5), params)


class TestForwardBranch:
    def test_identical_batch_rows_identical_outputs(self):
        model = m.build_model(small_config(seed=3))
        image = RNG.uniform(size=(3, 8, 8))
        batch = np.stack([image, image])
        out = m.forward_branch(model, batch)
        for field in ("id_logits", "color_logits", "type_logits",
                      "attr_embedding", "cat_embedding"):
            rows = getattr(out, field)
            assert np.array_equal(rows[0], rows[1]), field
        assert np.array_equal(out.mask.weights[0], out.mask.weights[1])

    def test_output_lengths_match_config(self):
        config = small_config()
        model = m.build_model(config)
        out = m.forward_branch(model, RNG.uniform(size=(3, 8, 8)))
        assert out.color_logits.shape == (config.num_colors,)
        assert out.type_logits.shape == (config.num_types,)
        assert out.attr_embedding.shape == (config.embedding_dim,)

    def test_finite_outputs_on_noise(self):
        model = m.build_model(small_config(seed=11))
        out = m.forward_branch(model, RNG.standard_normal((4, 3, 8, 8)))
        for field in ("id_logits", "color_logits", "type_logits",
                      "attr_embedding", "cat_embedding"):
            assert np.all(np.isfinite(getattr(out, field))), field

    def test_wrong_shape_rejected(self):
        model = m.build_model(small_config())
        with pytest.raises(ShapeError):
            m.forward_branch(model, RNG.uniform(size=(3, 9, 9)))
        with pytest.raises(ShapeError):
            m.forward_branch(model, RNG.uniform(size=(1, 3, 8)))

    def test_deterministic_across_calls(self):
        model = m.build_model(small_config(seed=5))
        image = RNG.uniform(size=(3, 8, 8))
        a = m.forward_branch(model, image)
        b = m.forward_branch(model, image)
        assert np.array_equal(a.id_logits, b.id_logits)
        assert np.array_equal(a.mask.weights, b.mask.weights)


class TestSiameseSymmetry:
    def test_swapping_inputs_preserves_verification_logits(self):
        model = m.build_model(small_config(seed=9))
        im1 = RNG.uniform(size=(3, 8, 8))
        im2 = RNG.uniform(size=(3, 8, 8))
        out1a, out2a, logits_ab = m.forward_pair(model, im1, im2)
        out2b, out1b, logits_ba = m.forward_pair(model, im2, im1)
        # branches swap ...
        assert np.array_equal(out1a.id_logits, out1b.id_logits)
        assert np.array_equal(out2a.id_logits, out2b.id_logits)
        # ... but (f1 - f2)^2 is order-free
        assert np.array_equal(logits_ab, logits_ba)


class TestChannelMaskType:
    def test_rejects_negative_weights(self):
        with pytest.raises(NumericError):
            m.ChannelMask(np.array([0.5, 0.6, -0.1]))

    def test_rejects_bad_sum(self):
        with pytest.raises(NumericError):
            m.ChannelMask(np.array([0.5, 0.6]))

    def test_accepts_batched_rows(self):
        mask = m.ChannelMask(np.full((3, 4), 0.25))
        assert mask.weights.shape == (3, 4)


class TestCheckpoint:
    def test_roundtrip_bit_identical(self, tmp_path):
        model = m.build_model(small_config(seed=13))
        state = {name: RNG.standard_normal(arr.shape).astype(np.float32)
                 for name, arr in model.params.items()}
        path = tmp_path / "model.ckpt"
        m.save_checkpoint(path, model, epoch=4, optimizer_state=state)
        loaded, epoch, loaded_state = m.load_model(path)
        assert epoch == 4
        assert loaded.config == model.config
        for name in model.params:
            assert np.array_equal(loaded.params[name], model.params[name])
            assert np.array_equal(loaded_state[name], state[name])

    def test_config_mismatch_rejected(self, tmp_path):
        model = m.build_model(small_config(seed=1))
        path = tmp_path / "model.ckpt"
        m.save_checkpoint(path, model)
        with pytest.raises(CheckpointError):
            m.load_model(path, expect_config=small_config(num_identities=9))
        # same architecture, different seed: accepted
        m.load_model(path, expect_config=small_config(seed=99))

    def test_garbage_file_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(CheckpointError):
            m.load_model(path)


class TestGradientFlow:
    def test_mask_gradient_reaches_feature_map(self):
        # gradient must flow through GAP -> 1x1 conv -> softmax
        f = ad.Tensor(RNG.standard_normal((1, 4, 3, 3)), requires_grad=True)
        params = m.MaskParams(RNG.standard_normal((4, 4)), np.zeros(4))
        mask = m.attribute_mask(f, params)
        ad.tsum(mask * RNG.standard_normal((1, 4))).backward()
        assert f.grad is not None and np.any(f.grad != 0)
