"""Experiment orchestration: declarative config, stage graph with
content-hash caching, the ablation matrix, and report rendering.

Stages run in dependency order; each stage's cache key hashes its config
sections plus the keys of everything upstream, so changing any upstream
knob forces a re-run while unrelated edits never do. Stages declare which
artifact kinds they read, which makes the split between training-time
supervision (ground-truth pixels, caption targets) and the inference path
auditable: the reconstruct stage only ever reads test EEG and checkpoints.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import diffusion as diff_mod
from . import metrics as metrics_mod
from .data import (PreprocessConfig, SyntheticSpec, generate_synthetic_dataset,
                   load_manifest, load_split, preprocess_eeg, save_split,
                   split_dataset)
from .encoder import TripletConfig, encode, load_encoder, save_encoder, train_encoder
from .images import load_png, resize_bilinear, save_png
from .metrics import EvalConfig, MetricsReport, make_classifier, recon_filename
from .nn import derive_seed
from .saliency import (GanLossConfig, GanTrainConfig, generate_saliency, load_gan,
                       save_gan, train_saliency_gan)
from .semantic import (SemanticConfig, caption_targets, load_semantic, make_annotator,
                       make_embedder, predict_embedding, save_semantic,
                       train_semantic_decoder, EmbeddingCache)

logger = logging.getLogger(__name__)

CAPTION_CHOICES = ("none", "label", "blip")

# Ablation rows in the conventional layout: B = captions from the external
# captioner, L = label captions, I = the pixel/saliency branch.
ABLATION_ROWS = (
    ("I", True, "none"),
    ("L", False, "label"),
    ("B", False, "blip"),
    ("B+I", True, "blip"),
    ("L+I", True, "label"),
)

# Full-scale reference numbers for each ablation row (not reproducible at
# desk scale; attached to reports purely as comparison targets).
REFERENCE_ABLATION = {
    "I": {"acc_percent": 4.5, "is_mean": 16.31, "ssim": 0.234},
    "L": {"acc_percent": 85.9, "is_mean": 34.12, "ssim": 0.180},
    "B": {"acc_percent": 74.1, "is_mean": 29.87, "ssim": 0.157},
    "B+I": {"acc_percent": 65.3, "is_mean": 25.86, "ssim": 0.235},
    "L+I": {"acc_percent": 85.6, "is_mean": 33.50, "ssim": 0.249},
}

SUPERVISION_ARTIFACTS = frozenset({
    "gt_images:train", "gt_images:test", "caption_targets", "train_labels",
})


class ConfigError(Exception):
    """Invalid experiment configuration."""


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage, message):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


@dataclass
class ExperimentConfig:
    """Declarative description of one end-to-end run.

    ``out_root`` locates artifacts and is deliberately excluded from the
    config hash, so identical experiments in different directories share
    one identity.
    """

    seed: int = 0
    out_root: str = "runs"
    dataset: dict = field(default_factory=dict)   # {"synthetic": {...}} or {"manifest": path}
    ratios: tuple = (0.8, 0.1, 0.1)
    preprocess: dict = field(default_factory=dict)
    encoder: dict = field(default_factory=dict)
    saliency: dict = field(default_factory=dict)
    semantic: dict = field(default_factory=dict)
    diffusion: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    clients: dict = field(default_factory=dict)   # annotator/embedder kinds
    ablation: dict = field(default_factory=dict)  # use_pixel, caption_source

    def __post_init__(self):
        self.ablation = {"use_pixel": True, "caption_source": "label", **self.ablation}
        self.clients = {"annotator": "mock", "embedder": "mock", **self.clients}
        self.diffusion = {"backend": "mock", "strength": 0.75, "steps": 50,
                          "guidance_scale": 7.5, "n_samples": 3, **self.diffusion}
        if self.ablation["caption_source"] not in CAPTION_CHOICES:
            raise ConfigError(f"caption_source must be one of {CAPTION_CHOICES}")
        if not self.ablation["use_pixel"] and self.ablation["caption_source"] == "none":
            raise ConfigError("at least one of the pixel branch or a caption source "
                              "must be enabled")
        if not self.dataset:
            raise ConfigError("dataset section is required "
                              "({'synthetic': {...}} or {'manifest': path})")
        if ("synthetic" in self.dataset) == ("manifest" in self.dataset):
            raise ConfigError("dataset must define exactly one of 'synthetic' or 'manifest'")

    # --- typed section views -------------------------------------------------

    def synthetic_spec(self):
        return SyntheticSpec(**self.dataset["synthetic"])

    def preprocess_config(self):
        return PreprocessConfig(**self.preprocess)

    def encoder_config(self):
        return TripletConfig(**{"seed": derive_seed(self.seed, "encoder"), **self.encoder})

    def saliency_config(self):
        section = dict(self.saliency)
        loss = GanLossConfig(**section.pop("loss", {}))
        return GanTrainConfig(loss=loss, **{"seed": derive_seed(self.seed, "saliency"), **section})

    def semantic_config(self):
        return SemanticConfig(**{"seed": derive_seed(self.seed, "semantic"),
                                 "caption_source": self.ablation["caption_source"]
                                 if self.ablation["caption_source"] != "none" else "label",
                                 **self.semantic})

    def eval_config(self):
        return EvalConfig(**{"seed": derive_seed(self.seed, "metrics"),
                             "n_samples": self.diffusion["n_samples"], **self.metrics})

    def diffusion_params(self, seed):
        return diff_mod.DiffusionParams(strength=self.diffusion["strength"],
                                        steps=self.diffusion["steps"],
                                        guidance_scale=self.diffusion["guidance_scale"],
                                        seed=seed)

    # --- identity ------------------------------------------------------------

    def resolved(self):
        """Canonical JSON-able view of everything that defines the run."""
        doc = {
            "seed": self.seed,
            "dataset": self.dataset,
            "ratios": list(self.ratios),
            "preprocess": dataclasses.asdict(self.preprocess_config()),
            "encoder": dataclasses.asdict(self.encoder_config()),
            "saliency": dataclasses.asdict(self.saliency_config()),
            "semantic": dataclasses.asdict(self.semantic_config()),
            "diffusion": self.diffusion,
            "metrics": dataclasses.asdict(self.eval_config()),
            "clients": self.clients,
            "ablation": self.ablation,
        }
        return doc

    def config_hash(self):
        text = json.dumps(self.resolved(), sort_keys=True)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        doc = dict(doc)
        if "ratios" in doc:
            doc["ratios"] = tuple(doc["ratios"])
        try:
            return cls(**doc)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path, env=None):
        try:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        doc = apply_env_overrides(doc, env if env is not None else os.environ)
        return cls.from_dict(doc)


def apply_env_overrides(doc, env):
    """EEGRECON_CFG__section__key=value overrides (values parsed as JSON
    when possible, kept as strings otherwise)."""
    doc = json.loads(json.dumps(doc))  # deep copy
    prefix = "EEGRECON_CFG__"
    for name, raw in sorted(env.items()):
        if not name.startswith(prefix):
            continue
        path = name[len(prefix):].split("__")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = value
    return doc


def default_synthetic_config(out_root, seed=0, **overrides):
    """Desk-scale configuration used by tests, demos and the docs."""
    doc = {
        "seed": seed,
        "out_root": str(out_root),
        "dataset": {"synthetic": {"n_classes": 4, "images_per_class": 10, "subjects": 2,
                                  "channels": 16, "samples": 128, "height": 64,
                                  "width": 64, "snr": 8.0}},
        "ratios": [0.8, 0.1, 0.1],
        "encoder": {"feature_dim": 32, "hidden_dim": 32, "epochs": 15, "margin": 2.5,
                    "learning_rate": 3e-3, "classes_per_batch": 4, "samples_per_class": 4,
                    "normalize_features": True},
        "saliency": {"z_dim": 16, "gen_hidden": 128, "disc_hidden": 64,
                     "map_height": 32, "map_width": 32, "epochs": 20,
                     "batch_size": 8, "lr_g": 2e-3, "lr_d": 1e-3},
        "semantic": {"seq_len": 8, "embed_dim": 64, "hidden_dim": 32, "epochs": 25,
                     "learning_rate": 3e-3, "batch_size": 16},
        "diffusion": {"backend": "mock", "strength": 0.75, "steps": 50,
                      "guidance_scale": 7.5, "n_samples": 3},
        "metrics": {"n_way": 4, "top_k": 1, "trials": 20, "is_splits": 2,
                    "classifier": "stub"},
        "ablation": {"use_pixel": True, "caption_source": "label"},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(doc.get(key), dict):
            doc[key] = {**doc[key], **value}
        else:
            doc[key] = value
    return ExperimentConfig.from_dict(doc)


# ---------------------------------------------------------------------------
# stage graph


@dataclass
class Stage:
    name: str
    upstream: tuple
    reads: tuple  # artifact kinds consumed, for the supervision audit
    config_fn: object  # config -> JSON-able dict hashed into the cache key
    run_fn: object  # (config, ctx, stage_dir) -> dict of artifact paths


class RunContext:
    """Artifact registry shared by the stages of one run."""

    def __init__(self):
        self.artifacts = {}
        self.hashes = {}

    def path(self, name):
        return Path(self.artifacts[name])


def _stage_dataset_cfg(config):
    return {"dataset": config.dataset, "ratios": list(config.ratios), "seed": config.seed}


def _stage_dataset_run(config, ctx, stage_dir):
    if "synthetic" in config.dataset:
        manifest = generate_synthetic_dataset(config.synthetic_spec(),
                                              derive_seed(config.seed, "dataset"),
                                              stage_dir / "data")
        manifest_path = stage_dir / "data" / "manifest.json"
    else:
        manifest_path = Path(config.dataset["manifest"])
        manifest = load_manifest(manifest_path)
    split = split_dataset(manifest, config.ratios, derive_seed(config.seed, "split"))
    save_split(split, stage_dir / "split.json")
    return {"manifest": str(manifest_path), "split": str(stage_dir / "split.json")}


def _stage_encoder_cfg(config):
    return {"preprocess": dataclasses.asdict(config.preprocess_config()),
            "encoder": dataclasses.asdict(config.encoder_config())}


def _stage_encoder_run(config, ctx, stage_dir):
    manifest = load_manifest(ctx.path("manifest"))
    split = load_split(ctx.path("split"))
    state, history = train_encoder(manifest, split, config.encoder_config(),
                                   config.preprocess_config())
    save_encoder(state, stage_dir / "encoder.npz")
    _dump_json(stage_dir / "history.json", history)
    return {"encoder_ckpt": str(stage_dir / "encoder.npz"),
            "encoder_history": str(stage_dir / "history.json")}


def _stage_saliency_cfg(config):
    return {"preprocess": dataclasses.asdict(config.preprocess_config()),
            "saliency": dataclasses.asdict(config.saliency_config())}


def _stage_saliency_run(config, ctx, stage_dir):
    manifest = load_manifest(ctx.path("manifest"))
    split = load_split(ctx.path("split"))
    encoder_state = load_encoder(ctx.path("encoder_ckpt"))
    g_state, d_state, history = train_saliency_gan(manifest, split, encoder_state,
                                                   config.saliency_config(),
                                                   config.preprocess_config())
    save_gan(g_state, d_state, stage_dir / "saliency.npz")
    _dump_json(stage_dir / "history.json", history)
    return {"saliency_ckpt": str(stage_dir / "saliency.npz"),
            "saliency_history": str(stage_dir / "history.json")}


def _stage_targets_cfg(config):
    sem = config.semantic_config()
    return {"caption_source": config.ablation["caption_source"],
            "seq_len": sem.seq_len, "embed_dim": sem.embed_dim,
            "clients": config.clients}


def _stage_targets_run(config, ctx, stage_dir):
    manifest = load_manifest(ctx.path("manifest"))
    sem = config.semantic_config()
    source = config.ablation["caption_source"]
    embedder = make_embedder(config.clients["embedder"], seq_len=sem.seq_len,
                             embed_dim=sem.embed_dim)
    annotator = make_annotator(config.clients["annotator"]) if source == "blip" else None
    targets = caption_targets(manifest, source, embedder, annotator=annotator,
                              caption_cache=stage_dir / "captions.jsonl",
                              embedding_cache=EmbeddingCache(stage_dir / "embeddings"))
    np.savez(stage_dir / "targets.npz", **targets)
    return {"caption_targets": str(stage_dir / "targets.npz")}


def _stage_backend_cfg(config):
    return {"backend": config.diffusion["backend"],
            "caption_source": config.ablation["caption_source"]}


def _stage_backend_run(config, ctx, stage_dir):
    """Assemble the mock backend's "pretrained knowledge": one anchor per
    class pairing the class caption embedding with a flat canvas of the
    class's mean colour. The flat canvas carries class semantics without
    per-image structure, like a text-conditioned generation whose layout
    is unrelated to the particular stimulus."""
    manifest = load_manifest(ctx.path("manifest"))
    split = load_split(ctx.path("split"))
    with np.load(ctx.path("caption_targets")) as data:
        targets = {key: data[key] for key in data.files}
    shape = (manifest.shapes["H"], manifest.shapes["W"], 3)
    by_class = {}
    for rec in sorted(manifest.records_for(split.train), key=lambda r: r.image_id):
        by_class.setdefault(rec.class_label, []).append(rec)
    payload = {}
    for label, recs in sorted(by_class.items()):
        image_ids = sorted({r.image_id for r in recs})
        payload[f"emb:{label}"] = np.mean([targets[i] for i in image_ids], axis=0)
        colors = []
        seen = set()
        for rec in recs:
            if rec.image_id in seen:
                continue
            seen.add(rec.image_id)
            colors.append(manifest.load_image(rec).pixels.mean(axis=(0, 1)))
        payload[f"canvas:{label}"] = np.broadcast_to(np.mean(colors, axis=0), shape).copy()
    np.savez(stage_dir / "backend.npz", **payload)
    return {"backend_model": str(stage_dir / "backend.npz")}


def load_backend_palette(path):
    with np.load(path) as data:
        labels = sorted(int(k.split(":", 1)[1]) for k in data.files if k.startswith("emb:"))
        return [(data[f"emb:{label}"], data[f"canvas:{label}"]) for label in labels]


def _stage_semantic_cfg(config):
    return {"preprocess": dataclasses.asdict(config.preprocess_config()),
            "semantic": dataclasses.asdict(config.semantic_config())}


def _stage_semantic_run(config, ctx, stage_dir):
    manifest = load_manifest(ctx.path("manifest"))
    split = load_split(ctx.path("split"))
    with np.load(ctx.path("caption_targets")) as data:
        targets = {key: data[key] for key in data.files}
    state, history = train_semantic_decoder(manifest, split, targets,
                                            config.semantic_config(),
                                            config.preprocess_config())
    save_semantic(state, stage_dir / "semantic.npz")
    _dump_json(stage_dir / "history.json", history)
    return {"semantic_ckpt": str(stage_dir / "semantic.npz"),
            "semantic_history": str(stage_dir / "history.json")}


def _stage_reconstruct_cfg(config):
    return {"diffusion": config.diffusion, "ablation": config.ablation,
            "preprocess": dataclasses.asdict(config.preprocess_config())}


def _stage_reconstruct_run(config, ctx, stage_dir):
    """Inference path: test EEG and checkpoints in, images out. Never reads
    ground-truth pixels or caption targets."""
    manifest = load_manifest(ctx.path("manifest"))
    split = load_split(ctx.path("split"))
    preprocess = config.preprocess_config()
    use_pixel = config.ablation["use_pixel"]
    captions_on = config.ablation["caption_source"] != "none"
    sem = config.semantic_config()

    encoder_state = load_encoder(ctx.path("encoder_ckpt")) if use_pixel else None
    g_state = load_gan(ctx.path("saliency_ckpt"))[0] if use_pixel else None
    sem_state = load_semantic(ctx.path("semantic_ckpt")) if captions_on else None

    palette = load_backend_palette(ctx.path("backend_model")) if captions_on else None
    backend = diff_mod.make_backend(config.diffusion["backend"],
                                    model_ref=config.diffusion.get("model"),
                                    height=manifest.shapes["H"], width=manifest.shapes["W"],
                                    cond_shape=(sem.seq_len, sem.embed_dim),
                                    palette=palette)
    recon_dir = stage_dir / "recon"
    saliency_dir = stage_dir / "saliency"
    recon_dir.mkdir(parents=True, exist_ok=True)
    saliency_dir.mkdir(parents=True, exist_ok=True)

    records = sorted(manifest.records_for(split.test), key=lambda r: (r.image_id, r.subject_id))
    if not records:
        raise ValueError("test split is empty")
    n_samples = int(config.diffusion["n_samples"])
    for rec in records:
        eeg = preprocess_eeg(manifest.load_eeg(rec), preprocess)
        if use_pixel:
            feature = encode(eeg, encoder_state)
            z_rng = np.random.default_rng(derive_seed(config.seed, "recon-z",
                                                      rec.image_id, rec.subject_id))
            saliency_map = generate_saliency(feature, z_rng.standard_normal(g_state.z_dim),
                                             g_state)
            initial = saliency_map.pixels
        else:
            # caption-only rows start from a neutral mid-grey canvas
            initial = np.full((8, 8, 3), 0.5)
        save_png(saliency_dir / f"{rec.image_id}_s{rec.subject_id:02d}.png", initial)

        if captions_on:
            embedding = predict_embedding(eeg, sem_state).matrix
        else:
            embedding = np.zeros((sem.seq_len, sem.embed_dim))

        params = config.diffusion_params(derive_seed(config.seed, "diffusion",
                                                     rec.image_id, rec.subject_id))
        samples = diff_mod.reconstruct(initial, embedding, backend, params, n_samples)
        for sample in samples:
            save_png(recon_dir / recon_filename(rec.image_id, rec.subject_id,
                                                sample.sample_index),
                     sample.pixels)
    return {"recon_dir": str(recon_dir), "saliency_dir": str(saliency_dir)}


def _stage_evaluate_cfg(config):
    return {"metrics": dataclasses.asdict(config.eval_config()),
            "n_samples": config.diffusion["n_samples"],
            "backend": config.diffusion["backend"]}


def _stage_evaluate_run(config, ctx, stage_dir):
    manifest = load_manifest(ctx.path("manifest"))
    split = load_split(ctx.path("split"))
    eval_cfg = config.eval_config()
    classifier = make_classifier(eval_cfg.classifier, manifest=manifest)
    report = metrics_mod.evaluate_run(ctx.path("recon_dir"), manifest, split,
                                      classifier, eval_cfg)
    sem = config.semantic_config()
    backend = diff_mod.make_backend(config.diffusion["backend"],
                                    model_ref=config.diffusion.get("model"),
                                    height=manifest.shapes["H"], width=manifest.shapes["W"],
                                    cond_shape=(sem.seq_len, sem.embed_dim))
    descriptor = diff_mod.describe_backend(backend)
    report.provenance.update({
        "config_hash": config.config_hash(),
        "global_seed": config.seed,
        "ablation": config.ablation,
        "backend": {"kind": descriptor.kind, "version": descriptor.version,
                    "latent_shape": list(descriptor.latent_shape)
                    if descriptor.latent_shape else None},
        "diffusion": {k: config.diffusion[k]
                      for k in ("strength", "steps", "guidance_scale", "n_samples")},
    })
    report.save(stage_dir / "report.json")
    (stage_dir / "report.txt").write_text(report.render_text(), encoding="utf-8")
    return {"metrics_report": str(stage_dir / "report.json"),
            "metrics_report_text": str(stage_dir / "report.txt")}


STAGES = {
    "dataset": Stage("dataset", (), (), _stage_dataset_cfg, _stage_dataset_run),
    "encoder": Stage("encoder", ("dataset",), ("eeg:train", "train_labels"),
                     _stage_encoder_cfg, _stage_encoder_run),
    "saliency": Stage("saliency", ("dataset", "encoder"),
                      ("eeg:train", "train_labels", "gt_images:train", "encoder_ckpt"),
                      _stage_saliency_cfg, _stage_saliency_run),
    "targets": Stage("targets", ("dataset",), ("class_names", "gt_images:train"),
                     _stage_targets_cfg, _stage_targets_run),
    "semantic": Stage("semantic", ("dataset", "targets"),
                      ("eeg:train", "caption_targets"),
                      _stage_semantic_cfg, _stage_semantic_run),
    "backend_model": Stage("backend_model", ("dataset", "targets"),
                           ("gt_images:train", "caption_targets", "class_names"),
                           _stage_backend_cfg, _stage_backend_run),
    "reconstruct": Stage("reconstruct", (),  # upstream filled per-plan
                         ("eeg:test", "encoder_ckpt", "saliency_ckpt", "semantic_ckpt",
                          "backend_model"),
                         _stage_reconstruct_cfg, _stage_reconstruct_run),
    "evaluate": Stage("evaluate", ("dataset", "reconstruct"),
                      ("gt_images:test", "recon_dir"),
                      _stage_evaluate_cfg, _stage_evaluate_run),
}


def plan_stages(config):
    """Stage execution order for this config's ablation flags."""
    use_pixel = config.ablation["use_pixel"]
    captions = config.ablation["caption_source"] != "none"
    names = ["dataset"]
    recon_upstream = ["dataset"]
    if use_pixel:
        names += ["encoder", "saliency"]
        recon_upstream += ["encoder", "saliency"]
    if captions:
        names += ["targets", "semantic", "backend_model"]
        recon_upstream += ["targets", "semantic", "backend_model"]
    names += ["reconstruct", "evaluate"]
    stages = []
    for name in names:
        stage = STAGES[name]
        if name == "reconstruct":
            stage = dataclasses.replace(stage, upstream=tuple(recon_upstream))
        stages.append(stage)
    return stages


@dataclass
class RunRecord:
    config_hash: str
    ablation: dict
    stage_hashes: dict
    stage_timings: dict
    artifacts: dict
    report: MetricsReport
    out_root: str

    def report_doc(self):
        """Location-independent document for rendered reports."""
        return {"config_hash": self.config_hash, "ablation": self.ablation,
                "metrics": self.report.to_json()}

    def to_json(self):
        return {"config_hash": self.config_hash, "ablation": self.ablation,
                "stage_hashes": self.stage_hashes, "stage_timings": self.stage_timings,
                "artifacts": self.artifacts, "out_root": self.out_root,
                "metrics_report": self.artifacts.get("metrics_report")}


def _dump_json(path, doc):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _stage_hash(stage, config, upstream_hashes):
    payload = {"stage": stage.name, "config": stage.config_fn(config),
               "upstream": [upstream_hashes[u] for u in stage.upstream]}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def run_pipeline(config, observer=None):
    """Execute all configured stages, reusing fresh cached results.

    ``observer(stage_name, executed)`` is called per stage (used by tests to
    assert cache hits). Returns a RunRecord referencing every artifact.
    """
    out_root = Path(config.out_root)
    ctx = RunContext()
    timings = {}
    for stage in plan_stages(config):
        digest = _stage_hash(stage, config, ctx.hashes)
        ctx.hashes[stage.name] = digest
        stage_dir = out_root / "cache" / stage.name / digest
        marker = stage_dir / "___done.json"
        if marker.is_file():
            with open(marker, "r", encoding="utf-8") as fh:
                outputs = json.load(fh)
            ctx.artifacts.update(outputs)
            timings[stage.name] = 0.0
            if observer:
                observer(stage.name, False)
            logger.info("stage %s: cached (%s)", stage.name, digest)
            continue
        stage_dir.mkdir(parents=True, exist_ok=True)
        start = time.perf_counter()
        try:
            outputs = stage.run_fn(config, ctx, stage_dir)
        except Exception as exc:
            raise StageError(stage.name, str(exc)) from exc
        timings[stage.name] = time.perf_counter() - start
        ctx.artifacts.update(outputs)
        _dump_json(marker, outputs)
        if observer:
            observer(stage.name, True)
        logger.info("stage %s: ran in %.2fs (%s)", stage.name, timings[stage.name], digest)

    record = RunRecord(config_hash=config.config_hash(), ablation=dict(config.ablation),
                       stage_hashes=dict(ctx.hashes), stage_timings=timings,
                       artifacts=dict(ctx.artifacts),
                       report=MetricsReport.load(ctx.path("metrics_report")),
                       out_root=str(out_root))
    run_dir = out_root / "runs" / record.config_hash
    run_dir.mkdir(parents=True, exist_ok=True)
    run_path = run_dir / "run.json"
    if not run_path.is_file():  # run records are immutable once written
        _dump_json(run_path, record.to_json())
    return record


def ablation_row_id(ablation):
    src = ablation["caption_source"]
    parts = [] if src == "none" else [{"label": "L", "blip": "B"}[src]]
    if ablation["use_pixel"]:
        parts.append("I")
    return "+".join(parts)


def run_ablation_matrix(base_config, observer=None):
    """Run the five ablation rows, sharing cached upstream stages."""
    records = []
    base = base_config.resolved()
    for row_id, use_pixel, caption_source in ABLATION_ROWS:
        doc = json.loads(json.dumps(base))
        doc["ablation"] = {"use_pixel": use_pixel, "caption_source": caption_source}
        # the semantic section's caption_source follows the row's ablation
        doc.get("semantic", {}).pop("caption_source", None)
        doc["out_root"] = base_config.out_root
        config = ExperimentConfig.from_dict(doc)
        try:
            records.append(run_pipeline(config, observer=observer))
        except StageError as exc:
            raise StageError(exc.stage, f"ablation row {row_id!r}: {exc}") from exc
    return records


# ---------------------------------------------------------------------------
# rendering


def _ablation_table(records):
    lines = ["row    B  L  I    ACC     IS      SSIM   | reference ACC%  IS     SSIM"]
    for record in records:
        row_id = ablation_row_id(record.ablation)
        src = record.ablation["caption_source"]
        flags = "  ".join("x" if v else "." for v in
                          (src == "blip", src == "label", record.ablation["use_pixel"]))
        agg = record.report.aggregate
        ref = REFERENCE_ABLATION.get(row_id, {})
        lines.append(f"{row_id:<5}  {flags}    {agg['acc']:.3f}  {agg['is_mean']:6.3f}  "
                     f"{agg['ssim']:.3f}  | {ref.get('acc_percent', float('nan')):5.1f}  "
                     f"{ref.get('is_mean', float('nan')):6.2f}  {ref.get('ssim', float('nan')):.3f}")
    lines.append(f"(reference columns: {metrics_mod.REFERENCE_NOTE})")
    return "\n".join(lines) + "\n"


def render_report(records, out_dir, manifest=None, grid_limit=8):
    """Deterministic text + JSON report, plus image grids per record.

    Grids show ground truth, the decoded saliency map, and every
    reconstruction sample side by side for up to ``grid_limit`` test
    segments. Output bytes depend only on the records' metrics and the
    rendered images, never on paths or timings.
    """
    if not records:
        raise ValueError("render_report needs at least one record")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = sorted(records, key=lambda r: (ablation_row_id(r.ablation), r.config_hash))

    doc = [record.report_doc() for record in records]
    _dump_json(out_dir / "report.json", doc)

    blocks = []
    for record in records:
        header = (f"run {record.config_hash} "
                  f"[pixel={'on' if record.ablation['use_pixel'] else 'off'}, "
                  f"captions={record.ablation['caption_source']}]")
        blocks.append(header + "\n" + record.report.render_text())
    if len(records) > 1:
        blocks.append("ablation matrix\n" + _ablation_table(records))
    text = "\n".join(blocks)
    (out_dir / "report.txt").write_text(text, encoding="utf-8")

    for record in records:
        _render_grids(record, out_dir / "grids" / ablation_row_id(record.ablation),
                      manifest, grid_limit)
    return text


def _render_grids(record, grid_dir, manifest, grid_limit):
    recon_dir = Path(record.artifacts.get("recon_dir", ""))
    saliency_dir = Path(record.artifacts.get("saliency_dir", ""))
    manifest = manifest or load_manifest(Path(record.artifacts["manifest"]))
    split = load_split(Path(record.artifacts["split"]))
    n_samples = record.report.provenance.get("n_samples", 1)
    grid_dir.mkdir(parents=True, exist_ok=True)
    recs = sorted(manifest.records_for(split.test), key=lambda r: (r.image_id, r.subject_id))
    for rec in recs[:grid_limit]:
        tiles = [manifest.load_image(rec).pixels]
        sal_path = saliency_dir / f"{rec.image_id}_s{rec.subject_id:02d}.png"
        if sal_path.is_file():
            tiles.append(load_png(sal_path))
        tiles += [load_png(recon_dir / recon_filename(rec.image_id, rec.subject_id, k))
                  for k in range(n_samples)]
        _save_grid(tiles, grid_dir / f"{rec.image_id}_s{rec.subject_id:02d}.png",
                   tile_size=(manifest.shapes["H"], manifest.shapes["W"]))


def _save_grid(tiles, path, tile_size, pad=2):
    h, w = tile_size
    canvas = np.ones((h, len(tiles) * (w + pad) - pad, 3))
    for i, tile in enumerate(tiles):
        if tile.shape[:2] != (h, w):
            tile = resize_bilinear(tile, (h, w))
        canvas[:, i * (w + pad):i * (w + pad) + w, :] = tile
    data = np.clip(np.round(canvas * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")
