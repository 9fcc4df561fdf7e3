"""Evaluation metrics: N-way top-k accuracy, Inception Score, SSIM, and
report assembly.

The classifier is a client with ``class_count`` and a ``probabilities``
method returning one normalised row per image. Rankings break ties
uniformly at random (seeded), so a uniform classifier scores at chance
k/N instead of favouring low class indices.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ssim as ssim_mod
from .images import load_png, resize_bilinear
from .nn import FLOAT, derive_seed

logger = logging.getLogger(__name__)

# Full-scale reference results (require the complete six-subject recording
# set plus pretrained captioning/embedding/diffusion stacks and GPU
# training); desk-scale runs are not expected to approach them.
REFERENCE_FULL_SCALE = {"acc_percent": 85.6, "is_mean": 33.50, "ssim": 0.249}
REFERENCE_NOTE = "full-scale reference; not desk-reproducible"


class ClassifierClient:
    """Interface for image classifiers used by the metrics."""

    kind = "stub"
    class_count = 0

    def probabilities(self, images):
        """(n, H, W, 3) images -> (n, class_count) normalised rows."""
        raise NotImplementedError


class UniformClassifier(ClassifierClient):
    """Maximum-entropy stub; useful for chance-level checks."""

    kind = "uniform-stub"

    def __init__(self, class_count):
        self.class_count = int(class_count)

    def probabilities(self, images):
        n = len(images)
        return np.full((n, self.class_count), 1.0 / self.class_count, dtype=FLOAT)


class PrototypeClassifier(ClassifierClient):
    """Nearest-class-prototype stub fitted on ground-truth images.

    Images are pooled to a small fixed resolution and scored by softmax of
    negative mean squared distance to each class prototype.
    """

    kind = "prototype-stub"

    def __init__(self, prototypes, resolution=16, sharpness=200.0):
        self.prototypes = np.asarray(prototypes, dtype=FLOAT)  # (K, r, r, 3)
        self.class_count = self.prototypes.shape[0]
        self.resolution = int(resolution)
        self.sharpness = float(sharpness)

    @classmethod
    def fit(cls, images, labels, class_count, resolution=16, sharpness=200.0):
        pooled = np.stack([resize_bilinear(img, (resolution, resolution)) for img in images])
        labels = np.asarray(labels)
        protos = np.stack([pooled[labels == c].mean(axis=0) for c in range(class_count)])
        return cls(protos, resolution=resolution, sharpness=sharpness)

    @classmethod
    def fit_manifest(cls, manifest, resolution=16, sharpness=200.0):
        seen = {}
        for rec in manifest.records:
            if rec.image_id not in seen:
                seen[rec.image_id] = (manifest.load_image(rec).pixels, rec.class_label)
        images = [v[0] for v in seen.values()]
        labels = [v[1] for v in seen.values()]
        return cls.fit(images, labels, class_count=len(manifest.class_names),
                       resolution=resolution, sharpness=sharpness)

    def probabilities(self, images):
        pooled = np.stack([resize_bilinear(img, (self.resolution, self.resolution))
                           for img in images])
        d2 = ((pooled[:, None] - self.prototypes[None]) ** 2).mean(axis=(2, 3, 4))
        logits = -self.sharpness * d2
        logits -= logits.max(axis=1, keepdims=True)
        expd = np.exp(logits)
        return expd / expd.sum(axis=1, keepdims=True)


def make_classifier(kind, manifest=None, class_count=None):
    if kind == "stub":
        if manifest is None:
            raise ValueError("the stub classifier is fitted from a manifest")
        return PrototypeClassifier.fit_manifest(manifest)
    if kind == "uniform":
        if class_count is None:
            raise ValueError("the uniform classifier needs class_count")
        return UniformClassifier(class_count)
    if kind == "pretrained":
        raise RuntimeError("pretrained classifier weights are not bundled; "
                           "use the stub classifier for desk-scale evaluation")
    raise ValueError(f"unknown classifier kind {kind!r}")


def validate_probabilities(probs, class_count):
    probs = np.asarray(probs, dtype=FLOAT)
    if probs.ndim != 2 or probs.shape[1] != class_count:
        raise ValueError(f"probabilities must be (n, {class_count}), got {probs.shape}")
    if probs.min() < 0:
        raise ValueError("probabilities must be non-negative")
    sums = probs.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ValueError("probability rows must sum to 1 within 1e-6")
    return probs


def _ranked_first(scores, tie):
    """Index of the best score; ties broken by the random vector."""
    order = np.lexsort((tie, -scores))
    return order


def n_way_top_k_accuracy(gt_images, recon_images, classifier, n_way, top_k,
                         trials=20, seed=0):
    """Mean success rate of the ground-truth class landing in the top-k.

    Per pair and trial, n_way - 1 distractor classes are drawn uniformly
    without replacement (excluding the ground-truth class, itself taken as
    the classifier's top-1 on the ground-truth image), and the
    reconstruction's probabilities restricted to those classes are ranked.
    """
    if len(gt_images) != len(recon_images) or len(gt_images) == 0:
        raise ValueError("need equally many (>=1) ground-truth and reconstructed images")
    k_classes = classifier.class_count
    if n_way > k_classes:
        raise ValueError(f"n_way {n_way} exceeds classifier class count {k_classes}")
    if not (1 <= top_k <= n_way):
        raise ValueError("top_k must lie in [1, n_way]")
    probs_gt = validate_probabilities(classifier.probabilities(gt_images), k_classes)
    probs_recon = validate_probabilities(classifier.probabilities(recon_images), k_classes)

    rng = np.random.default_rng(derive_seed(seed, "n-way"))
    successes = 0
    for i in range(len(gt_images)):
        gt_class = int(_ranked_first(probs_gt[i], rng.random(k_classes))[0])
        others = np.array([c for c in range(k_classes) if c != gt_class])
        for _ in range(trials):
            distractors = rng.choice(others, size=n_way - 1, replace=False)
            candidates = np.concatenate(([gt_class], distractors))
            order = _ranked_first(probs_recon[i][candidates], rng.random(n_way))
            if np.flatnonzero(order == 0)[0] < top_k:
                successes += 1
    return successes / (len(gt_images) * trials)


def inception_score(images, classifier, n_splits=10):
    """exp(mean KL(p(y|x) || p(y))) per split; returns (mean, std).

    1 <= score <= class_count on each split; uniform predictions give
    exactly 1 and one-hot predictions uniformly covering K classes give K.
    """
    if len(images) == 0:
        raise ValueError("inception score needs at least one image")
    if n_splits < 1 or len(images) < n_splits:
        raise ValueError(f"cannot make {n_splits} splits from {len(images)} images")
    probs = validate_probabilities(classifier.probabilities(images), classifier.class_count)
    scores = []
    for chunk in np.array_split(np.arange(len(images)), n_splits):
        p = probs[chunk]
        marginal = p.mean(axis=0)
        mask = p > 0
        logs = np.zeros_like(p)
        logs[mask] = np.log(p[mask]) - np.log(np.broadcast_to(marginal, p.shape)[mask])
        kl = (p * logs).sum(axis=1)
        scores.append(np.exp(kl.mean()))
    return float(np.mean(scores)), float(np.std(scores))


def ssim_metric(gt, recon):
    """Mean SSIM over evaluation pairs with the metric defaults."""
    gt = np.asarray(gt, dtype=FLOAT)
    recon = np.asarray(recon, dtype=FLOAT)
    if gt.shape != recon.shape:
        raise ValueError(f"shape mismatch: {gt.shape} vs {recon.shape}")
    if gt.ndim == 3:
        gt, recon = gt[None], recon[None]
    return float(np.mean([ssim_mod.ssim(gt[i], recon[i]) for i in range(len(gt))]))


# ---------------------------------------------------------------------------
# run evaluation


@dataclass
class EvalConfig:
    n_way: int = 50
    top_k: int = 1
    trials: int = 20
    is_splits: int = 10
    n_samples: int = 1
    eval_sample_index: int = 0  # sample used for ACC/SSIM; IS pools all samples
    classifier: str = "stub"
    seed: int = 0


@dataclass
class MetricsReport:
    per_subject: dict
    aggregate: dict
    provenance: dict
    reference: dict = field(default_factory=lambda: dict(REFERENCE_FULL_SCALE, note=REFERENCE_NOTE))

    def to_json(self):
        return {
            "per_subject": {str(k): v for k, v in sorted(self.per_subject.items())},
            "aggregate": self.aggregate,
            "provenance": self.provenance,
            "reference": self.reference,
        }

    @classmethod
    def from_json(cls, doc):
        return cls(per_subject={int(k): v for k, v in doc["per_subject"].items()},
                   aggregate=doc["aggregate"], provenance=doc["provenance"],
                   reference=doc["reference"])

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def render_text(self):
        lines = ["subject    ACC     IS (mean+-std)   SSIM    pairs"]
        for subject, row in sorted(self.per_subject.items()):
            lines.append(f"subj {subject:02d}   {row['acc']:.3f}   "
                         f"{row['is_mean']:6.3f} +- {row['is_std']:.3f}   "
                         f"{row['ssim']:.3f}   {row['n_pairs']}")
        agg = self.aggregate
        lines.append(f"all       {agg['acc']:.3f}   {agg['is_mean']:6.3f} +- "
                     f"{agg['is_std']:.3f}   {agg['ssim']:.3f}   {agg['n_pairs']}")
        ref = self.reference
        lines.append(f"reference: ACC {ref['acc_percent']}% IS {ref['is_mean']} "
                     f"SSIM {ref['ssim']} ({ref['note']})")
        return "\n".join(lines) + "\n"


def recon_filename(image_id, subject_id, sample_index):
    return f"{image_id}_s{subject_id:02d}_k{sample_index}.png"


def evaluate_run(recon_dir, manifest, split, classifier, config):
    """Compute ACC/IS/SSIM per subject and aggregate over the test split.

    ACC and SSIM use the configured primary sample; IS pools every sample
    of every segment. Aggregate ACC/SSIM are pair-count-weighted means of
    the per-subject values; aggregate IS is computed over the pooled
    reconstructions of all subjects.
    """
    recon_dir = Path(recon_dir)
    records = sorted(manifest.records_for(split.test), key=lambda r: (r.subject_id, r.image_id))
    if not records:
        raise ValueError("test split is empty")
    missing = sorted({r.image_id for r in records
                      for k in range(config.n_samples)
                      if not (recon_dir / recon_filename(r.image_id, r.subject_id, k)).is_file()})
    if missing:
        raise FileNotFoundError(f"missing reconstructions for image_ids: {missing}")

    per_subject = {}
    all_primary_gt, all_primary_recon, all_samples = [], [], []
    all_acc, all_ssim, weights = [], [], []
    for subject in sorted({r.subject_id for r in records}):
        recs = [r for r in records if r.subject_id == subject]
        gt = [manifest.load_image(r).pixels for r in recs]
        primary = [load_png(recon_dir / recon_filename(r.image_id, r.subject_id,
                                                       config.eval_sample_index))
                   for r in recs]
        samples = [load_png(recon_dir / recon_filename(r.image_id, r.subject_id, k))
                   for r in recs for k in range(config.n_samples)]
        acc = n_way_top_k_accuracy(gt, primary, classifier,
                                   n_way=min(config.n_way, classifier.class_count),
                                   top_k=config.top_k, trials=config.trials,
                                   seed=derive_seed(config.seed, "acc", subject))
        is_mean, is_std = inception_score(samples, classifier, n_splits=config.is_splits)
        ssim_val = float(np.mean([ssim_mod.ssim(g, r) for g, r in zip(gt, primary)]))
        per_subject[subject] = {"acc": acc, "is_mean": is_mean, "is_std": is_std,
                                "ssim": ssim_val, "n_pairs": len(recs)}
        all_primary_gt.extend(gt)
        all_primary_recon.extend(primary)
        all_samples.extend(samples)
        all_acc.append(acc)
        all_ssim.append(ssim_val)
        weights.append(len(recs))

    weights = np.asarray(weights, dtype=FLOAT)
    agg_is_mean, agg_is_std = inception_score(all_samples, classifier, n_splits=config.is_splits)
    aggregate = {
        "acc": float(np.average(all_acc, weights=weights)),
        "is_mean": agg_is_mean,
        "is_std": agg_is_std,
        "ssim": float(np.average(all_ssim, weights=weights)),
        "n_pairs": int(weights.sum()),
    }
    provenance = {
        "classifier": classifier.kind,
        "class_count": classifier.class_count,
        "n_way": min(config.n_way, classifier.class_count),
        "top_k": config.top_k,
        "trials": config.trials,
        "is_splits": config.is_splits,
        "n_samples": config.n_samples,
        "eval_sample_index": config.eval_sample_index,
        "seed": config.seed,
    }
    return MetricsReport(per_subject=per_subject, aggregate=aggregate, provenance=provenance)
