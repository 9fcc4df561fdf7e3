import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eegrecon.data import StimulusImage
from eegrecon.encoder import load_training_arrays
from eegrecon.nn import TrainingDiverged
from eegrecon.semantic import (CaptionRecord, ClientUnavailableError, EmbeddingCache,
                               MockAnnotator, MockTextEmbedder, SemanticConfig,
                               SemanticEmbedding, UnavailableAnnotator,
                               annotate_captions, caption_targets,
                               clip_alignment_loss, clip_alignment_loss_with_grad,
                               embed_caption, label_caption, load_semantic,
                               make_annotator, make_embedder, predict_embedding,
                               save_semantic, train_semantic_decoder)

from helpers import brute_force_sq_error, directional_derivative, rel_error


def _stim(image_id, class_name, rng):
    return StimulusImage(pixels=rng.uniform(size=(16, 16, 3)), image_id=image_id,
                         class_label=0, class_name=class_name)


class TestLabelCaptions:
    def test_plain_class_name(self):
        rec = label_caption("panda")
        assert rec.text == "panda"
        assert rec.source == "label"

    def test_underscores_become_spaces(self):
        assert label_caption("jack_o_lantern").text == "jack o lantern"

    def test_uppercase_lowered(self):
        assert label_caption("Airliner").text == "airliner"

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="non-empty"):
            label_caption("")


class TestAnnotation:
    def test_mock_template(self, rng):
        images = [_stim("img_0000", "crimson_disk", rng)]
        records = annotate_captions(images, MockAnnotator())
        assert records[0].text == "a photo of crimson disk"
        assert records[0].source == "blip"

    def test_cache_hit_skips_annotator(self, rng, tmp_path):
        images = [_stim("img_0000", "panda", rng), _stim("img_0001", "panda", rng)]
        cache = tmp_path / "captions.jsonl"
        first = annotate_captions(images, MockAnnotator(), cache_path=cache)
        payload = cache.read_bytes()

        class Exploding(MockAnnotator):
            def caption(self, image):
                raise AssertionError("annotator must not be called on cache hit")

        second = annotate_captions(images, Exploding(), cache_path=cache)
        assert [r.text for r in first] == [r.text for r in second]
        assert cache.read_bytes() == payload  # byte-stable

    def test_unavailable_lists_image_ids(self, rng):
        images = [_stim("img_0003", "panda", rng), _stim("img_0007", "canoe", rng)]
        with pytest.raises(ClientUnavailableError) as err:
            annotate_captions(images, UnavailableAnnotator())
        assert "img_0003" in str(err.value) and "img_0007" in str(err.value)

    def test_no_silent_fallback_with_partial_cache(self, rng, tmp_path):
        cache = tmp_path / "captions.jsonl"
        annotate_captions([_stim("img_0000", "panda", rng)], MockAnnotator(),
                          cache_path=cache)
        images = [_stim("img_0000", "panda", rng), _stim("img_0001", "canoe", rng)]
        with pytest.raises(ClientUnavailableError, match="img_0001"):
            annotate_captions(images, UnavailableAnnotator(), cache_path=cache)

    def test_factory(self):
        assert isinstance(make_annotator("mock"), MockAnnotator)
        with pytest.raises(ClientUnavailableError, match="not configured"):
            make_annotator("blip").caption(None)
        with pytest.raises(ValueError, match="unknown annotator"):
            make_annotator("gpt")


class TestEmbedding:
    def test_mock_deterministic_and_shaped(self):
        embedder = MockTextEmbedder(seq_len=77, embed_dim=768)
        a = embedder.embed("panda")
        b = embedder.embed("panda")
        c = embedder.embed("canoe")
        assert a.shape == (77, 768)
        np.testing.assert_array_equal(a, b)
        assert np.abs(a - c).max() > 0

    def test_embed_caption_kind_and_cache(self, tmp_path):
        embedder = MockTextEmbedder(seq_len=4, embed_dim=8)
        cache = EmbeddingCache(tmp_path / "emb")
        emb = embed_caption(CaptionRecord("img_0000", "label", "panda"), embedder, cache)
        assert emb.kind == "target"
        files = list((tmp_path / "emb").glob("*.npy"))
        assert len(files) == 1
        payload = files[0].read_bytes()
        again = embed_caption("panda", embedder, cache)
        np.testing.assert_array_equal(emb.matrix, again.matrix)
        assert files[0].read_bytes() == payload

    def test_embedder_failure_names_caption(self):
        with pytest.raises(ClientUnavailableError, match="panda"):
            embed_caption("panda", make_embedder("clip"))

    def test_label_vs_blip_targets_differ(self, tiny_dataset):
        manifest, _ = tiny_dataset
        embedder = MockTextEmbedder(seq_len=4, embed_dim=8)
        label_t = caption_targets(manifest, "label", embedder)
        blip_t = caption_targets(manifest, "blip", embedder, annotator=MockAnnotator())
        assert set(label_t) == set(blip_t)
        some = next(iter(label_t))
        assert np.abs(label_t[some] - blip_t[some]).max() > 0


class TestAlignmentLoss:
    def test_identity_zero(self, rng):
        x = rng.normal(size=(4, 6))
        assert clip_alignment_loss(x, x.copy(), reduction="sum") == 0.0

    def test_unit_difference_sum(self):
        pred = np.zeros((3, 3))
        target = np.zeros((3, 3))
        pred[1, 2] = 1.0
        assert clip_alignment_loss(pred, target, reduction="sum") == 1.0

    def test_matches_brute_force(self, rng):
        pred = rng.normal(size=(5, 7))
        target = rng.normal(size=(5, 7))
        ours = clip_alignment_loss(pred, target, reduction="sum")
        assert abs(ours - brute_force_sq_error(pred, target)) < 1e-9

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError, match="mismatch"):
            clip_alignment_loss(rng.normal(size=(2, 3)), rng.normal(size=(3, 2)))

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=6, max_size=6),
           st.lists(st.floats(-10, 10), min_size=6, max_size=6))
    def test_metric_squared_properties(self, a, b):
        pa = np.array(a).reshape(2, 3)
        pb = np.array(b).reshape(2, 3)
        loss = clip_alignment_loss(pa, pb, reduction="sum")
        assert loss >= 0.0
        assert loss == pytest.approx(clip_alignment_loss(pb, pa, reduction="sum"))
        assert (loss == 0.0) == bool(np.all(pa == pb))

    def test_gradient_sum_reduction_closed_form(self, rng):
        pred = rng.normal(size=(3, 4))
        target = rng.normal(size=(3, 4))
        _, grad = clip_alignment_loss_with_grad(pred, target, reduction="sum")
        np.testing.assert_allclose(grad, 2.0 * (pred - target), atol=1e-12)
        v = rng.normal(size=pred.shape)
        num = directional_derivative(
            lambda p: clip_alignment_loss(p, target, reduction="sum"), pred, v)
        assert rel_error(num, float((grad * v).sum())) < 1e-6

    def test_accepts_embedding_wrappers(self, rng):
        m = rng.normal(size=(2, 2))
        a = SemanticEmbedding(matrix=m, kind="predicted")
        b = SemanticEmbedding(matrix=m.copy(), kind="target")
        assert clip_alignment_loss(a, b) == 0.0


@pytest.fixture(scope="module")
def semantic_setup(tiny_dataset):
    manifest, split = tiny_dataset
    embedder = MockTextEmbedder(seq_len=4, embed_dim=8)
    targets = caption_targets(manifest, "label", embedder)
    config = SemanticConfig(seq_len=4, embed_dim=8, hidden_dim=16, epochs=15,
                            learning_rate=3e-3, batch_size=4, seed=11)
    state, history = train_semantic_decoder(manifest, split, targets, config)
    return manifest, split, targets, config, state, history


class TestDecoder:
    def test_loss_halves(self, semantic_setup):
        *_, history = semantic_setup
        assert len(history) == 15
        assert history[-1] <= 0.5 * history[0]

    def test_predict_shape_and_determinism(self, semantic_setup):
        manifest, split, _, config, state, _ = semantic_setup
        x, _, _, _ = load_training_arrays(manifest, split.val)
        emb1 = predict_embedding(x[0], state)
        emb2 = predict_embedding(x[0], state)
        assert emb1.kind == "predicted"
        assert emb1.matrix.shape == (4, 8)
        np.testing.assert_array_equal(emb1.matrix, emb2.matrix)

    def test_predict_rejects_nan(self, semantic_setup):
        manifest, _, _, _, state, _ = semantic_setup
        bad = np.zeros((manifest.shapes["C"], manifest.shapes["T"]))
        bad[0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            predict_embedding(bad, state)

    def test_predict_shape_mismatch(self, semantic_setup):
        *_, state, _ = semantic_setup
        with pytest.raises(ValueError, match="does not match decoder"):
            predict_embedding(np.zeros((2, 3)), state)

    def test_zero_epochs_is_init(self, semantic_setup):
        manifest, split, targets, config, *_ = semantic_setup
        import dataclasses
        cfg0 = dataclasses.replace(config, epochs=0)
        sa, ha = train_semantic_decoder(manifest, split, targets, cfg0)
        sb, _ = train_semantic_decoder(manifest, split, targets, cfg0)
        assert ha == []
        for key in sa.net.params:
            np.testing.assert_array_equal(sa.net.params[key], sb.net.params[key])

    def test_missing_target_names_image(self, semantic_setup):
        manifest, split, targets, config, *_ = semantic_setup
        broken = dict(targets)
        victim = sorted(split.train)[0]
        del broken[victim]
        with pytest.raises(ValueError, match=victim):
            train_semantic_decoder(manifest, split, broken, config)

    def test_divergence_aborts(self, semantic_setup):
        manifest, split, targets, config, *_ = semantic_setup
        import dataclasses
        cfg = dataclasses.replace(config, learning_rate=1e12, epochs=50,
                                  reduction="sum")
        with pytest.raises(TrainingDiverged):
            train_semantic_decoder(manifest, split, targets, cfg)

    def test_checkpoint_roundtrip(self, semantic_setup, tmp_path):
        manifest, split, _, _, state, _ = semantic_setup
        save_semantic(state, tmp_path / "sem.npz")
        loaded = load_semantic(tmp_path / "sem.npz")
        x, _, _, _ = load_training_arrays(manifest, split.val)
        np.testing.assert_array_equal(predict_embedding(x[0], state).matrix,
                                      predict_embedding(x[0], loaded).matrix)

    def test_caption_source_flag_distinct_checkpoints(self, tiny_dataset):
        manifest, split = tiny_dataset
        embedder = MockTextEmbedder(seq_len=4, embed_dim=8)
        base = SemanticConfig(seq_len=4, embed_dim=8, hidden_dim=8, epochs=3,
                              batch_size=4, seed=2)
        import dataclasses
        label_state, _ = train_semantic_decoder(
            manifest, split, caption_targets(manifest, "label", embedder),
            dataclasses.replace(base, caption_source="label"))
        blip_state, _ = train_semantic_decoder(
            manifest, split,
            caption_targets(manifest, "blip", embedder, annotator=MockAnnotator()),
            dataclasses.replace(base, caption_source="blip"))
        diffs = [np.abs(label_state.net.params[k] - blip_state.net.params[k]).max()
                 for k in label_state.net.params]
        assert max(diffs) > 0
