import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eegrecon.encoder import TripletConfig, train_encoder
from eegrecon.saliency import (GanLossConfig, GanTrainConfig, LatentNoise, SaliencyMap,
                               build_discriminator, build_generator,
                               discriminator_loss, generate_saliency,
                               generator_adv_loss, generator_total_loss, hinge_d_loss,
                               load_gan, mode_seeking_loss, save_gan,
                               train_saliency_gan)


class TestHingeLosses:
    # score-level cases: the discriminator op wraps these
    def test_margins_satisfied(self):
        assert hinge_d_loss(1.0, -1.0) == 0.0

    def test_zero_scores(self):
        assert hinge_d_loss(0.0, 0.0) == 2.0

    def test_both_margins_violated(self):
        assert hinge_d_loss(-1.0, 1.0) == 4.0

    def test_nonnegative_batch(self, rng):
        scores = rng.normal(scale=3.0, size=20)
        assert hinge_d_loss(scores, -scores) >= 0.0

    def test_full_op_with_constant_discriminator(self, rng):
        cfg = GanTrainConfig(map_height=16, map_width=16, disc_hidden=8, z_dim=4)
        d_state = build_discriminator(feature_dim=6, config=cfg)
        for key, value in d_state.disc.params.items():
            value[...] = 0.0  # now D(.) == head_b == 0 everywhere
        real = rng.uniform(0.3, 0.7, size=(16, 16, 3))
        fake = rng.uniform(0.3, 0.7, size=(16, 16, 3))
        feat = rng.normal(size=6)
        # D(real) = D(fake) = 0 -> max(0,1-0) + max(0,1+0) = 2
        assert discriminator_loss(real, fake, feat, d_state, "standard", seed=4) == 2.0
        # adversarial generator loss is -D(fake) = 0
        assert generator_adv_loss(fake, feat, d_state, "standard", seed=4) == 0.0

    def test_shape_mismatch(self, rng):
        cfg = GanTrainConfig(map_height=16, map_width=16, disc_hidden=8, z_dim=4)
        d_state = build_discriminator(feature_dim=6, config=cfg)
        with pytest.raises(ValueError, match="does not match discriminator"):
            discriminator_loss(rng.uniform(size=(8, 8, 3)), rng.uniform(size=(8, 8, 3)),
                               rng.normal(size=6), d_state)


class TestModeSeeking:
    def test_identical_outputs_zero(self, rng):
        out = rng.uniform(size=(6, 6, 3))
        z1, z2 = rng.normal(size=4), rng.normal(size=4)
        assert mode_seeking_loss(out, out.copy(), z1, z2) == 0.0

    def test_direct_evaluation(self):
        out1 = np.zeros(4)
        out2 = np.full(4, 2.0)     # mean |diff| = 2
        z1 = np.zeros(3)
        z2 = np.ones(3)            # mean |diff| = 1
        value = mode_seeking_loss(out1, out2, z1, z2, eps=1e-12)
        assert value == pytest.approx(-2.0, abs=1e-9)

    def test_identical_latents_guarded_by_eps(self, rng):
        out1 = np.zeros(4)
        out2 = np.ones(4)
        z = rng.normal(size=3)
        value = mode_seeking_loss(out1, out2, z, z.copy(), eps=1e-8)
        assert np.isfinite(value)
        assert value == pytest.approx(-1e8, rel=1e-6)

    def test_always_nonpositive(self, rng):
        for _ in range(10):
            value = mode_seeking_loss(rng.uniform(size=8), rng.uniform(size=8),
                                      rng.normal(size=4), rng.normal(size=4))
            assert value <= 0.0

    def test_accepts_latent_wrappers(self):
        value = mode_seeking_loss(np.zeros(2), np.ones(2),
                                  LatentNoise(np.zeros(2)), LatentNoise(np.ones(2)))
        assert value < 0.0

    def test_bad_eps(self):
        with pytest.raises(ValueError, match="eps"):
            mode_seeking_loss(np.zeros(2), np.ones(2), np.zeros(2), np.ones(2), eps=0.0)


class TestTotalLoss:
    def test_direct_sum(self):
        assert generator_total_loss(1.0, -2.0, 0.5, 1.0, 1.0, 1.0) == -0.5

    def test_zero_weights(self, rng):
        terms = rng.normal(size=3)
        assert generator_total_loss(*terms, 0.0, 0.0, 0.0) == 0.0

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError, match="non-negative"):
            generator_total_loss(1.0, 1.0, 1.0, -1.0, 1.0, 1.0)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3),
           st.floats(0, 4), st.floats(0, 4), st.floats(0, 4), st.floats(0.1, 5))
    def test_linear_in_weights(self, adv, ms, sl, w1, w2, w3, scale):
        one = generator_total_loss(adv, ms, sl, w1, w2, w3)
        scaled = generator_total_loss(adv, ms, sl, scale * w1, scale * w2, scale * w3)
        assert scaled == pytest.approx(scale * one, rel=1e-9, abs=1e-9)


@pytest.fixture(scope="module")
def g_state():
    cfg = GanTrainConfig(map_height=16, map_width=16, gen_hidden=32, z_dim=8)
    return build_generator(feature_dim=6, config=cfg)


@pytest.fixture(scope="module")
def trained(tiny_dataset):
    manifest, split = tiny_dataset
    enc_cfg = TripletConfig(feature_dim=8, hidden_dim=8, epochs=6, margin=2.5,
                            classes_per_batch=2, samples_per_class=2,
                            normalize_features=True, seed=3)
    encoder_state, _ = train_encoder(manifest, split, enc_cfg)
    gan_cfg = GanTrainConfig(z_dim=8, gen_hidden=64, disc_hidden=32,
                             map_height=16, map_width=16, epochs=12,
                             batch_size=4, seed=7)
    g_state, d_state, history = train_saliency_gan(manifest, split,
                                                   encoder_state, gan_cfg)
    return manifest, split, encoder_state, gan_cfg, g_state, d_state, history


class TestGenerateSaliency:
    def test_deterministic_and_in_range(self, g_state, rng):
        feat = rng.normal(size=6)
        z = rng.standard_normal(8)
        m1 = generate_saliency(feat, z, g_state)
        m2 = generate_saliency(feat, z, g_state)
        assert isinstance(m1, SaliencyMap)
        np.testing.assert_array_equal(m1.pixels, m2.pixels)
        assert m1.pixels.min() >= 0.0 and m1.pixels.max() <= 1.0
        assert m1.pixels.shape == (16, 16, 3)

    def test_dimension_mismatch(self, g_state, rng):
        with pytest.raises(ValueError, match="feature dim"):
            generate_saliency(rng.normal(size=5), rng.standard_normal(8), g_state)
        with pytest.raises(ValueError, match="latent dim"):
            generate_saliency(rng.normal(size=6), rng.standard_normal(9), g_state)


class TestTraining:
    def test_history_components(self, trained):
        *_, history = trained
        assert len(history) == 12
        for entry in history:
            assert {"d_loss", "g_adv", "g_ms", "g_ssim", "g_total",
                    "ssim_to_target"} <= set(entry)
            assert entry["d_loss"] >= 0.0
            assert entry["g_ms"] <= 0.0

    def test_ssim_to_target_improves(self, trained):
        *_, history = trained
        assert history[-1]["ssim_to_target"] > history[0]["ssim_to_target"]

    def test_zero_epochs_equals_init(self, tiny_dataset, trained):
        manifest, split, encoder_state, gan_cfg, *_ = trained
        import dataclasses
        cfg0 = dataclasses.replace(gan_cfg, epochs=0)
        g0a, d0a, h = train_saliency_gan(manifest, split, encoder_state, cfg0)
        g0b, d0b, _ = train_saliency_gan(manifest, split, encoder_state, cfg0)
        assert h == []
        for key in g0a.net.params:
            np.testing.assert_array_equal(g0a.net.params[key], g0b.net.params[key])
        for key in d0a.disc.params:
            np.testing.assert_array_equal(d0a.disc.params[key], d0b.disc.params[key])

    def test_trained_model_diversity_across_latents(self, trained, rng):
        # mode seeking keeps distinct latents producing distinct maps
        manifest, split, encoder_state, gan_cfg, g_state, *_ = trained
        from eegrecon.encoder import encode_batch, load_training_arrays
        x, _, _, _ = load_training_arrays(manifest, split.train)
        feat = encode_batch(x[:1], encoder_state)[0]
        z1, z2 = rng.standard_normal(8), rng.standard_normal(8)
        m1 = generate_saliency(feat, z1, g_state).pixels
        m2 = generate_saliency(feat, z2, g_state).pixels
        frac = np.mean(np.abs(m1 - m2) > 1e-3)
        assert frac >= 0.01

    def test_ssim_supervision_ablation(self, tiny_dataset, trained):
        # dropping the SSIM term leaves the generator less faithful
        manifest, split, encoder_state, gan_cfg, *_ , history = trained
        import dataclasses
        cfg_no = dataclasses.replace(gan_cfg, loss=GanLossConfig(w_ssim=0.0))
        _, _, hist_no = train_saliency_gan(manifest, split, encoder_state, cfg_no)
        assert history[-1]["ssim_to_target"] > hist_no[-1]["ssim_to_target"]

    def test_checkpoint_roundtrip(self, trained, tmp_path, rng):
        *_, g_state, d_state, _ = trained
        save_gan(g_state, d_state, tmp_path / "gan.npz")
        g2, d2 = load_gan(tmp_path / "gan.npz")
        feat = rng.normal(size=g_state.feature_dim)
        z = rng.standard_normal(g_state.z_dim)
        np.testing.assert_array_equal(generate_saliency(feat, z, g_state).pixels,
                                      generate_saliency(feat, z, g2).pixels)

    def test_unfrozen_encoder_not_supported(self, tiny_dataset, trained):
        manifest, split, encoder_state, gan_cfg, *_ = trained
        import dataclasses
        cfg = dataclasses.replace(gan_cfg, freeze_encoder=False)
        with pytest.raises(NotImplementedError, match="freeze_encoder"):
            train_saliency_gan(manifest, split, encoder_state, cfg)


def test_loss_config_validation():
    with pytest.raises(ValueError, match="non-negative"):
        GanLossConfig(w_adv=-0.1)
    with pytest.raises(ValueError, match="positive"):
        GanLossConfig(c1=0.0)
    with pytest.raises(ValueError, match="epsilon"):
        GanLossConfig(ms_eps=0.0)
