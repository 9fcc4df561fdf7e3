"""Discriminative EEG feature encoder trained with a triplet margin loss.

The encoder is a stacked tanh recurrence over the EEG time axis whose
final hidden state is projected to a feature vector. Training pulls
same-class features together and pushes different-class features apart:

    loss = max(0, margin + ||f(a) - f(p)||^2 - ||f(a) - f(n)||^2)

with the subgradient at the hinge kink defined as zero.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .data import PreprocessConfig, preprocess_eeg
from .nn import (FLOAT, Adam, RecurrentNet, TrainingDiverged, derive_seed,
                 load_checkpoint, require_finite, save_checkpoint)

logger = logging.getLogger(__name__)


@dataclass
class EegFeature:
    vector: np.ndarray
    source_image_id: str = ""
    class_label: int = -1

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=FLOAT)
        require_finite(self.vector, "feature vector")


@dataclass
class TripletConfig:
    margin: float = 1.0
    feature_dim: int = 128
    hidden_dim: int = 64
    layers: int = 1
    classes_per_batch: int = 4
    samples_per_class: int = 4
    epochs: int = 20
    learning_rate: float = 1e-3
    lr_decay: float = 1.0  # multiplicative per-epoch factor
    hardest_negative: bool = False
    normalize_features: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be >= 2")


@dataclass
class EncoderState:
    net: RecurrentNet
    channels: int
    samples: int
    feature_dim: int
    normalize: bool = False


def _as_vector(feature):
    return feature.vector if isinstance(feature, EegFeature) else np.asarray(feature, dtype=FLOAT)


def triplet_loss(anchor, positive, negative, margin=1.0):
    """Hinge margin loss on squared distances; always >= 0."""
    value, _, _, _ = triplet_loss_with_grad(anchor, positive, negative, margin)
    return value


def triplet_loss_with_grad(anchor, positive, negative, margin=1.0):
    """Return (loss, d/da, d/dp, d/dn)."""
    if margin < 0:
        raise ValueError("margin must be >= 0")
    a, p, n = (_as_vector(v) for v in (anchor, positive, negative))
    if not (a.shape == p.shape == n.shape):
        raise ValueError(f"feature shape mismatch: {a.shape}, {p.shape}, {n.shape}")
    d_ap = a - p
    d_an = a - n
    pre = margin + float(d_ap @ d_ap) - float(d_an @ d_an)
    if pre > 0.0:
        return pre, 2.0 * (d_ap - d_an), -2.0 * d_ap, 2.0 * d_an
    zero = np.zeros_like(a)
    return 0.0, zero, zero.copy(), zero.copy()


def sample_triplets(batch, labels, seed, hardest_negative=False):
    """Index triples (anchor, positive, negative) over one batch.

    Every sample with at least one same-class partner anchors exactly one
    triplet; positives are drawn uniformly among same-class partners and
    negatives uniformly among other classes (or the closest other-class
    sample when ``hardest_negative``). Deterministic for a fixed seed.
    """
    feats = np.asarray(batch, dtype=FLOAT)
    labels = np.asarray(labels)
    if feats.shape[0] != labels.shape[0]:
        raise ValueError("batch and labels disagree in length")
    if len(np.unique(labels)) < 2:
        raise ValueError("no negative available: batch holds a single class")
    rng = np.random.default_rng(seed)
    triplets = []
    for ia in range(len(labels)):
        same = np.flatnonzero(labels == labels[ia])
        same = same[same != ia]
        if same.size == 0:
            continue
        other = np.flatnonzero(labels != labels[ia])
        ip = int(rng.choice(same))
        if hardest_negative:
            dists = ((feats[other] - feats[ia]) ** 2).sum(axis=1)
            ineg = int(other[int(np.argmin(dists))])
        else:
            ineg = int(rng.choice(other))
        triplets.append((ia, ip, ineg))
    if not triplets:
        raise ValueError("no positive available: every class is a singleton")
    return triplets


def _normalize_rows(feats):
    norms = np.sqrt((feats * feats).sum(axis=1, keepdims=True)) + 1e-12
    return feats / norms, norms


def encode(eeg, state):
    """Deterministic inference-mode feature for one EEG segment."""
    data = np.asarray(getattr(eeg, "data", eeg), dtype=FLOAT)
    require_finite(data, "EEG input")
    if data.shape != (state.channels, state.samples):
        raise ValueError(
            f"EEG shape {data.shape} does not match encoder ({state.channels}, {state.samples})")
    feats = state.net.forward(data[None])
    if state.normalize:
        feats, _ = _normalize_rows(feats)
    return EegFeature(vector=feats[0],
                      source_image_id=getattr(eeg, "image_id", ""),
                      class_label=getattr(eeg, "class_label", -1))


def encode_batch(eeg_array, state):
    """(B, C, T) -> (B, F) without constructing EegFeature wrappers."""
    feats = state.net.forward(np.asarray(eeg_array, dtype=FLOAT))
    if state.normalize:
        feats, _ = _normalize_rows(feats)
    return feats


def load_training_arrays(manifest, image_ids, preprocess=None):
    """Stack preprocessed EEG segments for the given images.

    Returns (X (N, C, T), labels (N,), image_ids (N,), subject_ids (N,)).
    """
    preprocess = preprocess or PreprocessConfig()
    records = sorted(manifest.records_for(image_ids),
                     key=lambda r: (r.image_id, r.subject_id))
    if not records:
        raise ValueError("no records for the requested split")
    segs = [preprocess_eeg(manifest.load_eeg(r), preprocess) for r in records]
    x = np.stack([s.data for s in segs])
    labels = np.array([r.class_label for r in records])
    ids = [r.image_id for r in records]
    subjects = np.array([r.subject_id for r in records])
    return x, labels, ids, subjects


def train_encoder(manifest, split, config, preprocess=None):
    """Train on the split's train images; returns (state, per-epoch losses)."""
    x, labels, _, _ = load_training_arrays(manifest, split.train, preprocess)
    n = x.shape[0]
    net = RecurrentNet(in_dim=x.shape[1], hidden_dim=config.hidden_dim,
                       out_dim=config.feature_dim, layers=config.layers,
                       seed=derive_seed(config.seed, "encoder-init"))
    state = EncoderState(net=net, channels=x.shape[1], samples=x.shape[2],
                         feature_dim=config.feature_dim, normalize=config.normalize_features)
    opt = Adam(net.params, lr=config.learning_rate)
    batch_size = config.classes_per_batch * config.samples_per_class
    steps = max(1, math.ceil(n / batch_size))
    classes = np.unique(labels)

    history = []
    for epoch in range(config.epochs):
        opt.lr = config.learning_rate * (config.lr_decay ** epoch)
        rng = np.random.default_rng(derive_seed(config.seed, "epoch", epoch))
        epoch_losses = []
        for step in range(steps):
            picked = rng.choice(classes, size=min(config.classes_per_batch, classes.size),
                                replace=False)
            idx = []
            for c in picked:
                pool = np.flatnonzero(labels == c)
                idx.extend(rng.choice(pool, size=config.samples_per_class,
                                      replace=pool.size < config.samples_per_class))
            idx = np.array(idx)
            cache = {}
            feats = net.forward(x[idx], cache=cache)
            norms = None
            if config.normalize_features:
                feats, norms = _normalize_rows(feats)
            triplets = sample_triplets(feats, labels[idx],
                                       seed=derive_seed(config.seed, "triplets", epoch, step),
                                       hardest_negative=config.hardest_negative)
            gfeats = np.zeros_like(feats)
            total = 0.0
            for ia, ip, inng in triplets:
                value, ga, gp, gn = triplet_loss_with_grad(feats[ia], feats[ip], feats[inng],
                                                           config.margin)
                total += value
                gfeats[ia] += ga
                gfeats[ip] += gp
                gfeats[inng] += gn
            loss = total / len(triplets)
            gfeats /= len(triplets)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"triplet loss non-finite at epoch {epoch} step {step}")
            if config.normalize_features:
                # back through f = v / ||v||: g <- (g - f (f.g)) / ||v||
                inner = (gfeats * feats).sum(axis=1, keepdims=True)
                gfeats = (gfeats - feats * inner) / norms
            _, grads = net.backward(cache, gfeats)
            opt.step(grads)
            epoch_losses.append(loss)
        history.append(float(np.mean(epoch_losses)))
        logger.debug("encoder epoch %d mean triplet loss %.5f", epoch, history[-1])
    return state, history


def nearest_class_retrieval(train_feats, train_labels, query_feats, query_labels):
    """1-nearest-neighbour class retrieval accuracy in feature space."""
    train_feats = np.asarray(train_feats, dtype=FLOAT)
    query_feats = np.asarray(query_feats, dtype=FLOAT)
    d2 = ((query_feats[:, None, :] - train_feats[None, :, :]) ** 2).sum(axis=2)
    nearest = np.argmin(d2, axis=1)
    return float(np.mean(np.asarray(train_labels)[nearest] == np.asarray(query_labels)))


def save_encoder(state, path):
    save_checkpoint(path, kind="eeg-encoder",
                    config={"channels": state.channels, "samples": state.samples,
                            "feature_dim": state.feature_dim,
                            "hidden_dim": state.net.hidden_dim,
                            "layers": state.net.layers,
                            "normalize": state.normalize},
                    params=state.net.params)


def load_encoder(path):
    ckpt = load_checkpoint(path)
    if ckpt.kind != "eeg-encoder":
        raise ValueError(f"{path} is a {ckpt.kind!r} checkpoint, expected eeg-encoder")
    cfg = ckpt.config
    net = RecurrentNet(in_dim=cfg["channels"], hidden_dim=cfg["hidden_dim"],
                       out_dim=cfg["feature_dim"], layers=cfg["layers"], seed=0)
    net.params.update(ckpt.params)
    return EncoderState(net=net, channels=cfg["channels"], samples=cfg["samples"],
                        feature_dim=cfg["feature_dim"], normalize=cfg["normalize"])
