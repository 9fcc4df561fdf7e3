import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eegrecon.data import EegSegment
from eegrecon.encoder import (EegFeature, TripletConfig, encode, encode_batch,
                              load_encoder, load_training_arrays,
                              nearest_class_retrieval, sample_triplets, save_encoder,
                              train_encoder, triplet_loss, triplet_loss_with_grad)

from helpers import directional_derivative, rel_error


class TestTripletLoss:
    def test_anchor_equals_positive(self):
        a = np.zeros(4)
        n = np.array([2.0, 0.0, 0.0, 0.0])  # squared distance 4
        assert triplet_loss(a, a.copy(), n, margin=1.0) == 0.0

    def test_all_equal_gives_margin(self):
        a = np.ones(3)
        assert triplet_loss(a, a.copy(), a.copy(), margin=0.3) == pytest.approx(0.3, abs=1e-12)

    def test_direct_evaluation(self):
        a = np.zeros(2)
        p = np.array([np.sqrt(2.0), 0.0])   # ||a-p||^2 = 2
        n = np.array([0.0, 1.0])            # ||a-n||^2 = 1
        assert triplet_loss(a, p, n, margin=0.5) == pytest.approx(1.5, abs=1e-12)

    def test_accepts_feature_wrappers(self):
        a = EegFeature(vector=np.zeros(3))
        n = EegFeature(vector=np.array([3.0, 0.0, 0.0]))
        assert triplet_loss(a, a, n, margin=1.0) == 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            triplet_loss(np.zeros(3), np.zeros(3), np.zeros(4))

    def test_negative_margin_rejected(self):
        with pytest.raises(ValueError, match="margin"):
            triplet_loss(np.zeros(2), np.zeros(2), np.zeros(2), margin=-0.1)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=3, max_size=3),
           st.lists(st.floats(-5, 5), min_size=3, max_size=3),
           st.lists(st.floats(-5, 5), min_size=3, max_size=3),
           st.floats(0, 3))
    def test_nonnegative(self, a, p, n, margin):
        assert triplet_loss(np.array(a), np.array(p), np.array(n), margin) >= 0.0

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-3, 3), min_size=4, max_size=4),
           st.lists(st.floats(-3, 3), min_size=4, max_size=4),
           st.lists(st.floats(-3, 3), min_size=4, max_size=4),
           st.floats(0, 2), st.floats(0, 2))
    def test_monotone_in_margin(self, a, p, n, m1, m2):
        lo, hi = sorted((m1, m2))
        args = (np.array(a), np.array(p), np.array(n))
        assert triplet_loss(*args, margin=lo) <= triplet_loss(*args, margin=hi) + 1e-12

    def test_zero_margin_collapsed_features_zero_gradients(self):
        f = np.full(5, 0.7)
        value, ga, gp, gn = triplet_loss_with_grad(f, f.copy(), f.copy(), margin=0.0)
        assert value == 0.0
        for g in (ga, gp, gn):
            np.testing.assert_array_equal(g, np.zeros(5))

    def test_gradients_match_fd(self, rng):
        # probe away from the hinge kink
        a = rng.normal(size=6)
        p = a + rng.normal(scale=0.1, size=6)
        n = a + rng.normal(scale=0.1, size=6)
        value, ga, gp, gn = triplet_loss_with_grad(a, p, n, margin=1.0)
        assert value > 0.1
        for x, g, fn in ((a, ga, lambda v: triplet_loss(v, p, n, 1.0)),
                         (p, gp, lambda v: triplet_loss(a, v, n, 1.0)),
                         (n, gn, lambda v: triplet_loss(a, p, v, 1.0))):
            d = rng.normal(size=6)
            num = directional_derivative(fn, x, d)
            assert rel_error(num, float((g * d).sum())) < 1e-8


class TestSampleTriplets:
    def test_two_by_two_batch_yields_four(self, rng):
        feats = rng.normal(size=(4, 3))
        labels = np.array([0, 0, 1, 1])
        triplets = sample_triplets(feats, labels, seed=0)
        assert len(triplets) == 4
        for ia, ip, ineg in triplets:
            assert labels[ia] == labels[ip] and ia != ip
            assert labels[ia] != labels[ineg]

    def test_single_class_errors(self, rng):
        with pytest.raises(ValueError, match="no negative available"):
            sample_triplets(rng.normal(size=(3, 2)), np.zeros(3, dtype=int), seed=0)

    def test_all_singletons_errors(self, rng):
        with pytest.raises(ValueError, match="no positive available"):
            sample_triplets(rng.normal(size=(3, 2)), np.array([0, 1, 2]), seed=0)

    def test_deterministic(self, rng):
        feats = rng.normal(size=(8, 3))
        labels = np.array([0, 0, 0, 1, 1, 2, 2, 2])
        assert sample_triplets(feats, labels, seed=9) == sample_triplets(feats, labels, seed=9)

    def test_hardest_negative_picks_closest(self):
        feats = np.array([[0.0], [0.1], [1.0], [5.0]])
        labels = np.array([0, 0, 1, 1])
        triplets = sample_triplets(feats, labels, seed=1, hardest_negative=True)
        anchor0 = [t for t in triplets if t[0] == 0][0]
        assert anchor0[2] == 2  # index 2 is the nearest other-class sample


class TestEncode:
    def test_shape_contract_conventional_dims(self):
        cfg = TripletConfig(feature_dim=128, hidden_dim=16, epochs=0)
        from eegrecon.encoder import EncoderState
        from eegrecon.nn import RecurrentNet
        state = EncoderState(net=RecurrentNet(128, 16, 128, seed=0), channels=128,
                             samples=440, feature_dim=128)
        seg = EegSegment(data=np.random.default_rng(0).normal(size=(128, 440)),
                         subject_id=0, class_label=0, image_id="img_0000")
        feat = encode(seg, state)
        assert feat.vector.shape == (128,)
        again = encode(seg, state)
        np.testing.assert_array_equal(feat.vector, again.vector)

    def test_shape_mismatch(self, tiny_dataset):
        manifest, split = tiny_dataset
        state, _ = train_encoder(manifest, split,
                                 TripletConfig(feature_dim=8, hidden_dim=8, epochs=0))
        with pytest.raises(ValueError, match="does not match encoder"):
            encode(np.zeros((2, 7)), state)

    def test_nan_input_rejected_before_network(self, tiny_dataset):
        manifest, split = tiny_dataset
        state, _ = train_encoder(manifest, split,
                                 TripletConfig(feature_dim=8, hidden_dim=8, epochs=0))
        bad = np.zeros((manifest.shapes["C"], manifest.shapes["T"]))
        bad[0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            encode(bad, state)


class TestTraining:
    def test_zero_epochs_returns_init_and_empty_history(self, tiny_dataset):
        manifest, split = tiny_dataset
        cfg = TripletConfig(feature_dim=8, hidden_dim=8, epochs=0, seed=3)
        state_a, history = train_encoder(manifest, split, cfg)
        state_b, _ = train_encoder(manifest, split, cfg)
        assert history == []
        for key in state_a.net.params:
            np.testing.assert_array_equal(state_a.net.params[key], state_b.net.params[key])

    def test_loss_decreases_and_history_length(self, tiny_dataset):
        manifest, split = tiny_dataset
        cfg = TripletConfig(feature_dim=8, hidden_dim=8, epochs=10, margin=2.5,
                            classes_per_batch=2, samples_per_class=2,
                            normalize_features=True, learning_rate=3e-3, seed=3)
        state, history = train_encoder(manifest, split, cfg)
        assert len(history) == 10
        assert history[-1] < history[0]

    def test_retrieval_on_separable_data(self, tiny_dataset):
        manifest, split = tiny_dataset
        cfg = TripletConfig(feature_dim=8, hidden_dim=8, epochs=10, margin=2.5,
                            classes_per_batch=2, samples_per_class=2,
                            normalize_features=True, learning_rate=3e-3, seed=3)
        state, _ = train_encoder(manifest, split, cfg)
        xtr, ltr, _, _ = load_training_arrays(manifest, split.train)
        xv, lv, _, _ = load_training_arrays(manifest, split.val)
        acc = nearest_class_retrieval(encode_batch(xtr, state), ltr,
                                      encode_batch(xv, state), lv)
        assert acc >= 0.9

    def test_checkpoint_roundtrip(self, tiny_dataset, tmp_path):
        manifest, split = tiny_dataset
        cfg = TripletConfig(feature_dim=8, hidden_dim=8, epochs=2,
                            classes_per_batch=2, samples_per_class=2, seed=3)
        state, _ = train_encoder(manifest, split, cfg)
        save_encoder(state, tmp_path / "enc.npz")
        loaded = load_encoder(tmp_path / "enc.npz")
        x, _, _, _ = load_training_arrays(manifest, split.val)
        np.testing.assert_array_equal(encode_batch(x, state), encode_batch(x, loaded))


def test_config_validation():
    with pytest.raises(ValueError, match="margin"):
        TripletConfig(margin=-1.0)
    with pytest.raises(ValueError, match="feature_dim"):
        TripletConfig(feature_dim=1)
    assert dataclasses.asdict(TripletConfig())["margin"] == 1.0
