"""Sample-level semantics: caption targets, text embeddings, and an EEG
regressor that predicts the embedding matrix.

Caption text comes either from the class name ("label" source) or from an
external captioning model ("blip" source) reached through a client
interface; a deterministic mock client stands in for the external model at
desk scale. Caption embeddings are produced by a text-embedder client
(again mockable) and cached on disk. The EEG decoder is a recurrent trunk
with a linear head producing an (L, D) matrix, trained by minimising
``||predicted - target||^2``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import load_training_arrays
from .nn import (FLOAT, Adam, RecurrentNet, TrainingDiverged, derive_seed,
                 load_checkpoint, require_finite, save_checkpoint)

logger = logging.getLogger(__name__)

CAPTION_SOURCES = ("label", "blip")


class ClientUnavailableError(RuntimeError):
    """An external captioner/embedder client cannot serve requests."""


@dataclass
class CaptionRecord:
    image_id: str
    source: str  # "label" | "blip"
    text: str

    def __post_init__(self):
        if self.source not in CAPTION_SOURCES:
            raise ValueError(f"caption source must be one of {CAPTION_SOURCES}")
        if not self.text:
            raise ValueError("caption text must be non-empty")


@dataclass
class SemanticEmbedding:
    matrix: np.ndarray  # (L, D)
    kind: str = "target"  # "target" | "predicted"

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=FLOAT)
        if self.matrix.ndim != 2:
            raise ValueError(f"embedding must be (L, D), got shape {self.matrix.shape}")
        require_finite(self.matrix, "semantic embedding")
        if self.kind not in ("target", "predicted"):
            raise ValueError("kind must be 'target' or 'predicted'")


def label_caption(class_name, image_id=""):
    """Caption text derived from the class name (lower-cased, '_' -> ' ')."""
    if not class_name:
        raise ValueError("class name must be non-empty")
    text = class_name.lower().replace("_", " ")
    return CaptionRecord(image_id=image_id, source="label", text=text)


def label_captions(manifest):
    return [label_caption(manifest.class_names[label], image_id)
            for image_id, label in sorted({(r.image_id, r.class_label) for r in manifest.records})]


# ---------------------------------------------------------------------------
# external clients


class CaptionAnnotator:
    """Interface for caption-generation clients."""

    version = "annotator"

    def caption(self, image):
        raise NotImplementedError


class MockAnnotator(CaptionAnnotator):
    """Deterministic stand-in for the external captioner."""

    version = "mock-annotator-1"

    def caption(self, image):
        return f"a photo of {image.class_name.lower().replace('_', ' ')}"


class UnavailableAnnotator(CaptionAnnotator):
    version = "unavailable"

    def __init__(self, reason="captioner endpoint not configured"):
        self.reason = reason

    def caption(self, image):
        raise ClientUnavailableError(self.reason)


def make_annotator(kind, endpoint=None):
    if kind == "mock":
        return MockAnnotator()
    if kind == "blip":
        if not endpoint:
            return UnavailableAnnotator(
                "captioner endpoint not configured; set EEGRECON_CAPTIONER_ENDPOINT "
                "or use the mock annotator")
        raise ClientUnavailableError(
            f"remote captioner at {endpoint!r} is not supported in this build; use the mock")
    raise ValueError(f"unknown annotator kind {kind!r}")


def annotate_captions(images, annotator, cache_path=None, source="blip"):
    """One caption per image via the client, cached as JSON lines.

    Never falls back to label captions: if any uncached image cannot be
    captioned the call fails listing the affected image ids.
    """
    cached = {}
    cache_path = Path(cache_path) if cache_path else None
    if cache_path and cache_path.is_file():
        with open(cache_path, "r", encoding="utf-8") as fh:
            for line in fh:
                doc = json.loads(line)
                if doc["source"] == source:
                    cached[doc["image_id"]] = CaptionRecord(**doc)

    records, fresh = [], []
    missing = [img.image_id for img in images if img.image_id not in cached]
    for img in sorted(images, key=lambda im: im.image_id):
        if img.image_id in cached:
            records.append(cached[img.image_id])
            continue
        try:
            text = annotator.caption(img)
        except ClientUnavailableError as exc:
            raise ClientUnavailableError(
                f"captioner unavailable ({exc}); uncaptioned image_ids: {sorted(missing)}") from exc
        rec = CaptionRecord(image_id=img.image_id, source=source, text=text)
        records.append(rec)
        fresh.append(rec)

    if cache_path and fresh:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        with open(cache_path, "a", encoding="utf-8") as fh:
            for rec in fresh:
                fh.write(json.dumps({"image_id": rec.image_id, "source": rec.source,
                                     "text": rec.text}, sort_keys=True) + "\n")
    return records


class TextEmbedder:
    """Interface for text-embedding clients producing (L, D) matrices."""

    version = "embedder"
    seq_len = 77
    embed_dim = 768

    def embed(self, text):
        raise NotImplementedError


class MockTextEmbedder(TextEmbedder):
    """Hash-seeded Gaussian embedding; identical text -> identical matrix."""

    version = "mock-embedder-1"

    def __init__(self, seq_len=77, embed_dim=768):
        self.seq_len = int(seq_len)
        self.embed_dim = int(embed_dim)

    def embed(self, text):
        if not text:
            raise ValueError("cannot embed empty text")
        key = f"{self.version}|{self.seq_len}x{self.embed_dim}|{text}"
        seed = int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:4], "little")
        rng = np.random.default_rng(seed)
        return rng.normal(0.0, 1.0 / np.sqrt(self.embed_dim),
                          (self.seq_len, self.embed_dim))


class UnavailableTextEmbedder(TextEmbedder):
    version = "unavailable"

    def __init__(self, reason="text embedder endpoint not configured"):
        self.reason = reason

    def embed(self, text):
        raise ClientUnavailableError(self.reason)


def make_embedder(kind, seq_len=77, embed_dim=768, endpoint=None):
    if kind == "mock":
        return MockTextEmbedder(seq_len=seq_len, embed_dim=embed_dim)
    if kind == "clip":
        if not endpoint:
            return UnavailableTextEmbedder(
                "text embedder endpoint not configured; set EEGRECON_EMBEDDER_ENDPOINT "
                "or use the mock embedder")
        raise ClientUnavailableError(
            f"remote text embedder at {endpoint!r} is not supported in this build; use the mock")
    raise ValueError(f"unknown embedder kind {kind!r}")


class EmbeddingCache:
    """Content-hash keyed .npy store for caption embeddings."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def _path(self, embedder, text):
        key = f"{embedder.version}|{embedder.seq_len}x{embedder.embed_dim}|{text}"
        digest = hashlib.sha256(key.encode("utf-8")).hexdigest()[:24]
        return self.directory / f"{digest}.npy"

    def get_or_compute(self, text, embedder):
        path = self._path(embedder, text)
        if path.is_file():
            return np.load(path)
        matrix = embedder.embed(text)
        self.directory.mkdir(parents=True, exist_ok=True)
        np.save(path, matrix)
        return matrix


def embed_caption(caption, embedder, cache=None):
    """Target embedding for one caption record."""
    text = caption.text if isinstance(caption, CaptionRecord) else str(caption)
    if not text:
        raise ValueError("caption text must be non-empty")
    try:
        matrix = cache.get_or_compute(text, embedder) if cache else embedder.embed(text)
    except ClientUnavailableError as exc:
        raise ClientUnavailableError(f"embedder failed for caption {text!r}: {exc}") from exc
    return SemanticEmbedding(matrix=matrix, kind="target")


def caption_targets(manifest, source, embedder, annotator=None, caption_cache=None,
                    embedding_cache=None, image_ids=None):
    """image_id -> target matrix for the chosen caption source."""
    if source not in CAPTION_SOURCES:
        raise ValueError(f"caption source must be one of {CAPTION_SOURCES}")
    wanted = set(image_ids) if image_ids is not None else set(manifest.image_ids())
    by_image = {(r.image_id): r for r in manifest.records if r.image_id in wanted}
    if source == "label":
        captions = [label_caption(manifest.class_names[r.class_label], r.image_id)
                    for r in by_image.values()]
    else:
        if annotator is None:
            raise ValueError("blip caption source needs an annotator client")
        stims = [manifest.load_image(r) for r in
                 sorted(by_image.values(), key=lambda r: r.image_id)]
        captions = annotate_captions(stims, annotator, cache_path=caption_cache, source="blip")
    return {c.image_id: embed_caption(c, embedder, cache=embedding_cache).matrix
            for c in captions}


# ---------------------------------------------------------------------------
# losses and training


def clip_alignment_loss(pred, target, reduction="mean"):
    """Squared error between embedding matrices; zero iff equal."""
    value, _ = clip_alignment_loss_with_grad(pred, target, reduction)
    return value


def clip_alignment_loss_with_grad(pred, target, reduction="mean"):
    """Return (loss, d loss / d pred)."""
    p = np.asarray(getattr(pred, "matrix", pred), dtype=FLOAT)
    t = np.asarray(getattr(target, "matrix", target), dtype=FLOAT)
    if p.shape != t.shape:
        raise ValueError(f"embedding shape mismatch: {p.shape} vs {t.shape}")
    if reduction not in ("mean", "sum"):
        raise ValueError("reduction must be 'mean' or 'sum'")
    diff = p - t
    if reduction == "sum":
        return float((diff * diff).sum()), 2.0 * diff
    return float((diff * diff).mean()), 2.0 * diff / diff.size


@dataclass
class SemanticConfig:
    seq_len: int = 77
    embed_dim: int = 768
    hidden_dim: int = 64
    layers: int = 1
    epochs: int = 30
    learning_rate: float = 1e-3
    batch_size: int = 16
    reduction: str = "mean"
    caption_source: str = "label"
    seed: int = 0

    def __post_init__(self):
        if self.caption_source not in CAPTION_SOURCES:
            raise ValueError(f"caption_source must be one of {CAPTION_SOURCES}")


@dataclass
class SemanticDecoderState:
    net: RecurrentNet
    channels: int
    samples: int
    seq_len: int
    embed_dim: int


def predict_embedding(eeg, state):
    """Inference-mode (L, D) prediction for one EEG segment."""
    data = np.asarray(getattr(eeg, "data", eeg), dtype=FLOAT)
    require_finite(data, "EEG input")
    if data.shape != (state.channels, state.samples):
        raise ValueError(
            f"EEG shape {data.shape} does not match decoder ({state.channels}, {state.samples})")
    flat = state.net.forward(data[None])[0]
    return SemanticEmbedding(matrix=flat.reshape(state.seq_len, state.embed_dim),
                             kind="predicted")


def predict_embedding_batch(eeg_array, state):
    flat = state.net.forward(np.asarray(eeg_array, dtype=FLOAT))
    return flat.reshape(-1, state.seq_len, state.embed_dim)


def train_semantic_decoder(manifest, split, targets, config, preprocess=None):
    """Fit the EEG -> embedding regressor on the train split.

    ``targets`` maps image_id to the (L, D) target matrix; a missing entry
    for any train image is an error.
    """
    x, _, image_ids, _ = load_training_arrays(manifest, split.train, preprocess)
    missing = sorted({i for i in image_ids if i not in targets})
    if missing:
        raise ValueError(f"missing caption targets for image_ids: {missing}")
    y = np.stack([np.asarray(targets[i], dtype=FLOAT).reshape(-1) for i in image_ids])
    expected = config.seq_len * config.embed_dim
    if y.shape[1] != expected:
        raise ValueError(f"targets have {y.shape[1]} values, config expects "
                         f"{config.seq_len}x{config.embed_dim}")

    net = RecurrentNet(in_dim=x.shape[1], hidden_dim=config.hidden_dim, out_dim=expected,
                       layers=config.layers, seed=derive_seed(config.seed, "semantic-init"))
    state = SemanticDecoderState(net=net, channels=x.shape[1], samples=x.shape[2],
                                 seq_len=config.seq_len, embed_dim=config.embed_dim)
    opt = Adam(net.params, lr=config.learning_rate)
    n = x.shape[0]
    steps = max(1, math.ceil(n / config.batch_size))

    history = []
    for epoch in range(config.epochs):
        rng = np.random.default_rng(derive_seed(config.seed, "sem-epoch", epoch))
        order = rng.permutation(n)
        losses = []
        for step in range(steps):
            idx = order[step * config.batch_size:(step + 1) * config.batch_size]
            if idx.size == 0:
                continue
            cache = {}
            pred = net.forward(x[idx], cache=cache)
            loss, gpred = clip_alignment_loss_with_grad(pred, y[idx], config.reduction)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"semantic loss non-finite at epoch {epoch} step {step}")
            _, grads = net.backward(cache, gpred)
            opt.step(grads)
            losses.append(loss)
        history.append(float(np.mean(losses)))
        logger.debug("semantic epoch %d loss %.6f", epoch, history[-1])
    return state, history


def save_semantic(state, path):
    save_checkpoint(path, kind="semantic-decoder",
                    config={"channels": state.channels, "samples": state.samples,
                            "seq_len": state.seq_len, "embed_dim": state.embed_dim,
                            "hidden_dim": state.net.hidden_dim, "layers": state.net.layers},
                    params=state.net.params)


def load_semantic(path):
    ckpt = load_checkpoint(path)
    if ckpt.kind != "semantic-decoder":
        raise ValueError(f"{path} is a {ckpt.kind!r} checkpoint, expected semantic-decoder")
    cfg = ckpt.config
    net = RecurrentNet(in_dim=cfg["channels"], hidden_dim=cfg["hidden_dim"],
                       out_dim=cfg["seq_len"] * cfg["embed_dim"], layers=cfg["layers"], seed=0)
    net.params.update(ckpt.params)
    return SemanticDecoderState(net=net, channels=cfg["channels"], samples=cfg["samples"],
                                seq_len=cfg["seq_len"], embed_dim=cfg["embed_dim"])
