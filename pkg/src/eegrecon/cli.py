"""Command-line entry points.

Exit codes: 0 on success, 2 for configuration/usage errors, 3 for stage
failures (training divergence, missing files, unavailable backends).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import diffusion as diff_mod
from .data import (DatasetError, PreprocessConfig, SyntheticSpec,
                   generate_synthetic_dataset, load_manifest, load_split,
                   preprocess_eeg, save_split, split_dataset)
from .encoder import TripletConfig, encode, load_encoder, save_encoder, train_encoder
from .images import save_png
from .metrics import (EvalConfig, MetricsReport, evaluate_run, make_classifier,
                      recon_filename)
from .nn import TrainingDiverged, derive_seed
from .pipeline import (ConfigError, ExperimentConfig, RunRecord, StageError,
                       ablation_row_id, render_report, run_ablation_matrix,
                       run_pipeline)
from .saliency import (GanLossConfig, GanTrainConfig, generate_saliency, load_gan,
                       save_gan, train_saliency_gan)
from .semantic import (ClientUnavailableError, EmbeddingCache, SemanticConfig,
                       annotate_captions, caption_targets, label_captions,
                       load_semantic, make_annotator, make_embedder,
                       predict_embedding, save_semantic, train_semantic_decoder)

logger = logging.getLogger(__name__)

STAGE_FAILURES = (StageError, TrainingDiverged, DatasetError, ClientUnavailableError,
                  diff_mod.BackendUnavailableError, FileNotFoundError, ValueError,
                  RuntimeError, OSError)


def _load_section(path, cls):
    if not path:
        return cls()
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if cls is GanTrainConfig and "loss" in doc:
        doc = dict(doc, loss=GanLossConfig(**doc["loss"]))
    return cls(**doc)


def _parse_ratios(text):
    parts = tuple(float(p) for p in text.split(","))
    if len(parts) != 3:
        raise ConfigError("--ratios must be three comma-separated numbers")
    return parts


def cmd_dataset(args):
    if args.dataset_cmd == "validate":
        manifest = load_manifest(args.manifest)
        print(f"ok: {len(manifest.records)} records, {len(manifest.image_ids())} images, "
              f"{len(manifest.class_names)} classes, shapes {manifest.shapes}")
        return 0
    if args.dataset_cmd == "split":
        manifest = load_manifest(args.manifest)
        split = split_dataset(manifest, _parse_ratios(args.ratios), args.seed)
        out = args.out or (Path(args.manifest).parent / "split.json")
        save_split(split, out)
        print(f"split written to {out}: train={len(split.train)} val={len(split.val)} "
              f"test={len(split.test)}")
        return 0
    if args.dataset_cmd == "synth":
        spec = SyntheticSpec(n_classes=args.classes, images_per_class=args.per_class,
                             subjects=args.subjects, channels=args.channels,
                             samples=args.samples, height=args.height, width=args.width,
                             snr=args.snr)
        manifest = generate_synthetic_dataset(spec, args.seed, args.out)
        print(f"synthetic dataset written to {args.out}: {len(manifest.records)} records")
        return 0
    raise ConfigError(f"unknown dataset subcommand {args.dataset_cmd!r}")


def cmd_train_encoder(args):
    manifest = load_manifest(args.manifest)
    split = load_split(args.split)
    config = _load_section(args.config, TripletConfig)
    state, history = train_encoder(manifest, split, config)
    save_encoder(state, args.out)
    print(f"encoder saved to {args.out}; epochs={len(history)} "
          f"first_loss={history[0] if history else None} "
          f"last_loss={history[-1] if history else None}")
    return 0


def cmd_train_saliency(args):
    manifest = load_manifest(args.manifest)
    split = load_split(args.split)
    encoder_state = load_encoder(args.encoder)
    config = _load_section(args.config, GanTrainConfig)
    g_state, d_state, history = train_saliency_gan(manifest, split, encoder_state, config)
    save_gan(g_state, d_state, args.out)
    last = history[-1] if history else {}
    print(f"saliency GAN saved to {args.out}; epochs={len(history)} "
          f"ssim_to_target={last.get('ssim_to_target')}")
    return 0


def cmd_train_semantic(args):
    manifest = load_manifest(args.manifest)
    split = load_split(args.split)
    config = _load_section(args.config, SemanticConfig)
    config.caption_source = args.caption_source
    embedder = make_embedder(args.embedder, seq_len=config.seq_len,
                             embed_dim=config.embed_dim)
    annotator = make_annotator(args.annotator) if args.caption_source == "blip" else None
    cache = EmbeddingCache(args.embedding_cache) if args.embedding_cache else None
    targets = caption_targets(manifest, args.caption_source, embedder, annotator=annotator,
                              caption_cache=args.caption_cache, embedding_cache=cache)
    state, history = train_semantic_decoder(manifest, split, targets, config)
    save_semantic(state, args.out)
    print(f"semantic decoder saved to {args.out}; epochs={len(history)} "
          f"first_loss={history[0] if history else None} "
          f"last_loss={history[-1] if history else None}")
    return 0


def cmd_captions(args):
    manifest = load_manifest(args.manifest)
    if args.source == "label":
        records = label_captions(manifest)
        with open(args.out, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps({"image_id": rec.image_id, "source": rec.source,
                                     "text": rec.text}, sort_keys=True) + "\n")
    else:
        annotator = make_annotator(args.annotator)
        seen = {}
        for rec in manifest.records:
            seen.setdefault(rec.image_id, rec)
        stims = [manifest.load_image(r) for r in
                 sorted(seen.values(), key=lambda r: r.image_id)]
        records = annotate_captions(stims, annotator, cache_path=args.out, source="blip")
    print(f"{len(records)} captions written to {args.out}")
    return 0


def cmd_reconstruct(args):
    manifest = load_manifest(args.manifest)
    split = load_split(args.split)
    if not args.saliency and not args.semantic:
        raise ConfigError("reconstruct needs --saliency and/or --semantic")
    if args.saliency and not args.encoder:
        raise ConfigError("--saliency requires --encoder")
    encoder_state = load_encoder(args.encoder) if args.saliency else None
    g_state = load_gan(args.saliency)[0] if args.saliency else None
    sem_state = load_semantic(args.semantic) if args.semantic else None
    cond_shape = (sem_state.seq_len, sem_state.embed_dim) if sem_state else None
    backend = diff_mod.backend_from_env(os.environ, height=manifest.shapes["H"],
                                        width=manifest.shapes["W"], cond_shape=cond_shape)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    preprocess = PreprocessConfig()
    records = sorted(manifest.records_for(split.test),
                     key=lambda r: (r.image_id, r.subject_id))
    for rec in records:
        eeg = preprocess_eeg(manifest.load_eeg(rec), preprocess)
        if g_state is not None:
            feature = encode(eeg, encoder_state)
            z_rng = np.random.default_rng(derive_seed(args.seed, "recon-z",
                                                      rec.image_id, rec.subject_id))
            initial = generate_saliency(feature, z_rng.standard_normal(g_state.z_dim),
                                        g_state).pixels
        else:
            initial = np.full((8, 8, 3), 0.5)
        if sem_state is not None:
            embedding = predict_embedding(eeg, sem_state).matrix
        else:
            embedding = np.zeros(cond_shape or (77, 768))
        params = diff_mod.DiffusionParams(strength=args.strength, steps=args.steps,
                                          guidance_scale=args.guidance,
                                          seed=derive_seed(args.seed, "diffusion",
                                                           rec.image_id, rec.subject_id))
        for sample in diff_mod.reconstruct(initial, embedding, backend, params, args.samples):
            save_png(out / recon_filename(rec.image_id, rec.subject_id, sample.sample_index),
                     sample.pixels)
    print(f"{len(records) * args.samples} reconstructions written to {out}")
    return 0


def cmd_evaluate(args):
    manifest = load_manifest(args.manifest)
    split = load_split(args.split)
    classifier = make_classifier(args.classifier, manifest=manifest)
    config = EvalConfig(n_way=args.n_way, top_k=args.top_k, trials=args.trials,
                        is_splits=args.is_splits, n_samples=args.samples,
                        classifier=args.classifier, seed=args.seed)
    report = evaluate_run(args.recon, manifest, split, classifier, config)
    report.save(args.out)
    print(report.render_text())
    print(f"report written to {args.out}")
    return 0


def cmd_run(args):
    config = ExperimentConfig.from_file(args.config)
    record = run_pipeline(config)
    print(f"run {record.config_hash} complete; report: "
          f"{record.artifacts['metrics_report']}")
    print(record.report.render_text())
    return 0


def cmd_ablate(args):
    config = ExperimentConfig.from_file(args.config)
    records = run_ablation_matrix(config)
    out_dir = args.report_dir or (Path(config.out_root) / "ablation")
    text = render_report(records, out_dir)
    print(text)
    print(f"ablation report written to {out_dir}")
    return 0


def cmd_report(args):
    records = []
    for run_path in args.runs:
        with open(run_path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        records.append(RunRecord(
            config_hash=doc["config_hash"], ablation=doc["ablation"],
            stage_hashes=doc["stage_hashes"], stage_timings=doc["stage_timings"],
            artifacts=doc["artifacts"], out_root=doc["out_root"],
            report=MetricsReport.load(doc["metrics_report"])))
    text = render_report(records, args.out)
    print(text)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="eegrecon",
                                     description="EEG-to-image decoding pipeline")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset", help="dataset utilities")
    dsub = p.add_subparsers(dest="dataset_cmd", required=True)
    v = dsub.add_parser("validate")
    v.add_argument("manifest")
    s = dsub.add_parser("split")
    s.add_argument("manifest")
    s.add_argument("--ratios", default="0.8,0.1,0.1")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    g = dsub.add_parser("synth")
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--per-class", type=int, default=10)
    g.add_argument("--subjects", type=int, default=2)
    g.add_argument("--channels", type=int, default=16)
    g.add_argument("--samples", type=int, default=128)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--snr", type=float, default=8.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_dataset)

    p = sub.add_parser("train-encoder", help="triplet-train the EEG feature encoder")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_encoder)

    p = sub.add_parser("train-saliency", help="train the saliency-map GAN")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_saliency)

    p = sub.add_parser("train-semantic", help="train the caption-embedding decoder")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--caption-source", choices=("label", "blip"), default="label")
    p.add_argument("--annotator", default="mock")
    p.add_argument("--embedder", default="mock")
    p.add_argument("--caption-cache")
    p.add_argument("--embedding-cache")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_semantic)

    p = sub.add_parser("captions", help="caption utilities")
    csub = p.add_subparsers(dest="captions_cmd", required=True)
    c = csub.add_parser("generate")
    c.add_argument("--manifest", required=True)
    c.add_argument("--source", choices=("label", "blip"), required=True)
    c.add_argument("--annotator", default="mock")
    c.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_captions)

    p = sub.add_parser("reconstruct", help="reconstruct test images")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--encoder")
    p.add_argument("--saliency")
    p.add_argument("--semantic")
    p.add_argument("--samples", type=int, default=3)
    p.add_argument("--strength", type=float, default=0.75)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--guidance", type=float, default=7.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="score reconstructions")
    p.add_argument("--recon", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--classifier", choices=("stub", "pretrained"), default="stub")
    p.add_argument("--n-way", type=int, default=50)
    p.add_argument("--top-k", type=int, default=1)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--is-splits", type=int, default=10)
    p.add_argument("--samples", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("run", help="run the full pipeline from a config file")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("ablate", help="run the five-row ablation matrix")
    p.add_argument("--config", required=True)
    p.add_argument("--report-dir")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("report", help="render reports from run records")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except STAGE_FAILURES as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
