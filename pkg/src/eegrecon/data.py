"""Paired EEG/image dataset handling: manifests, splits, preprocessing,
and a deterministic synthetic generator for desk-scale experiments.

A dataset lives in a directory with a ``manifest.json`` describing tensor
shapes, the class-name table, and one record per (image, subject) EEG
segment. EEG tensors are raw little-endian float32 (C, T); stimulus images
are PNG or raw float32 (H, W, 3). Splits are made by image so that every
subject's response to one image lands in exactly one split.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import images as imgio
from .nn import FLOAT, derive_seed, require_finite

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1


class DatasetError(Exception):
    """Manifest, file or shape problem in a dataset."""


@dataclass
class EegSegment:
    """One EEG recording window paired with a stimulus image."""

    data: np.ndarray  # (C, T)
    subject_id: int
    class_label: int
    image_id: str

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=FLOAT)
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ValueError(f"EEG data must be (C, T) with C,T >= 1, got {self.data.shape}")
        require_finite(self.data, f"EEG segment {self.image_id}/s{self.subject_id}")
        if not self.image_id:
            raise ValueError("image_id must be non-empty")

    @property
    def channel_count(self):
        return self.data.shape[0]

    @property
    def sample_count(self):
        return self.data.shape[1]


@dataclass
class StimulusImage:
    """Viewed image, float pixels in [0, 1]."""

    pixels: np.ndarray  # (H, W, 3)
    image_id: str
    class_label: int
    class_name: str

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=FLOAT)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"pixels must be (H, W, 3), got {self.pixels.shape}")
        if self.pixels.shape[0] < 8 or self.pixels.shape[1] < 8:
            raise ValueError("images must be at least 8x8")
        require_finite(self.pixels, f"image {self.image_id}")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError(f"image {self.image_id} has values outside [0, 1]")


@dataclass(frozen=True)
class ManifestRecord:
    eeg_path: str
    image_path: str
    subject_id: int
    class_label: int
    image_id: str


@dataclass
class DatasetManifest:
    root: Path
    shapes: dict  # keys C, T, H, W
    class_names: dict  # label -> name
    records: list
    version: int = MANIFEST_VERSION

    def image_ids(self):
        return sorted({r.image_id for r in self.records})

    def subjects(self):
        return sorted({r.subject_id for r in self.records})

    def records_for(self, image_ids):
        wanted = set(image_ids)
        return [r for r in self.records if r.image_id in wanted]

    def load_eeg(self, record):
        path = self.root / record.eeg_path
        shape = (self.shapes["C"], self.shapes["T"])
        try:
            data = imgio.read_f32(path, shape)
        except (OSError, ValueError) as exc:
            raise DatasetError(f"EEG tensor for {record.image_id}: {exc}") from exc
        return EegSegment(data=data, subject_id=record.subject_id,
                          class_label=record.class_label, image_id=record.image_id)

    def load_image(self, record):
        path = self.root / record.image_path
        try:
            if path.suffix.lower() == ".png":
                pixels = imgio.load_png(path)
            else:
                pixels = imgio.read_f32(path, (self.shapes["H"], self.shapes["W"], 3))
        except (OSError, ValueError) as exc:
            raise DatasetError(f"image for {record.image_id}: {exc}") from exc
        return StimulusImage(pixels=pixels, image_id=record.image_id,
                             class_label=record.class_label,
                             class_name=self.class_names[record.class_label])

    def to_json(self):
        return {
            "version": self.version,
            "shapes": {k: int(self.shapes[k]) for k in ("C", "T", "H", "W")},
            "class_names": {str(k): v for k, v in sorted(self.class_names.items())},
            "records": [dataclasses.asdict(r) for r in self.records],
        }


def save_manifest(manifest, path):
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest.to_json(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_manifest(path):
    """Parse and validate a manifest; every referenced file must exist and
    match the declared shapes."""
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"manifest not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"manifest {path} is not valid JSON: {exc}") from exc

    for key in ("version", "shapes", "class_names", "records"):
        if key not in doc:
            raise DatasetError(f"manifest missing required field {key!r}")
    if doc["version"] != MANIFEST_VERSION:
        raise DatasetError(f"unsupported manifest version {doc['version']!r}")
    shapes = doc["shapes"]
    for key in ("C", "T", "H", "W"):
        if key not in shapes or int(shapes[key]) < 1:
            raise DatasetError(f"manifest shapes must define positive {key}")
    shapes = {k: int(shapes[k]) for k in ("C", "T", "H", "W")}
    try:
        class_names = {int(k): str(v) for k, v in doc["class_names"].items()}
    except (TypeError, ValueError) as exc:
        raise DatasetError(f"class_names keys must be integer labels: {exc}") from exc

    if not doc["records"]:
        raise DatasetError("empty dataset: manifest has no records")

    root = path.parent
    records = []
    seen = set()
    for i, rec in enumerate(doc["records"]):
        try:
            record = ManifestRecord(
                eeg_path=str(rec["eeg_path"]),
                image_path=str(rec["image_path"]),
                subject_id=int(rec["subject_id"]),
                class_label=int(rec["class_label"]),
                image_id=str(rec["image_id"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"record {i} malformed: {exc}") from exc
        if record.class_label not in class_names:
            raise DatasetError(f"record {record.image_id}: class_label {record.class_label} not in class_names")
        key = (record.subject_id, record.image_id)
        if key in seen:
            raise DatasetError(f"duplicate (subject_id, image_id) pair {key}")
        seen.add(key)
        _validate_record_files(root, shapes, record)
        records.append(record)

    return DatasetManifest(root=root, shapes=shapes, class_names=class_names, records=records)


def _validate_record_files(root, shapes, record):
    eeg_path = root / record.eeg_path
    if not eeg_path.is_file():
        raise DatasetError(f"missing EEG file for image_id {record.image_id}: {eeg_path}")
    expected = shapes["C"] * shapes["T"] * 4
    actual = os.path.getsize(eeg_path)
    if actual != expected:
        raise DatasetError(
            f"EEG tensor for image_id {record.image_id} holds {actual} bytes, "
            f"expected {expected} for shape ({shapes['C']}, {shapes['T']})")
    image_path = root / record.image_path
    if not image_path.is_file():
        raise DatasetError(f"missing image file for image_id {record.image_id}: {image_path}")
    if image_path.suffix.lower() == ".png":
        try:
            h, w = imgio.png_size(image_path)
        except OSError as exc:
            raise DatasetError(f"unreadable image for image_id {record.image_id}: {exc}") from exc
        if (h, w) != (shapes["H"], shapes["W"]):
            raise DatasetError(
                f"image for image_id {record.image_id} is {h}x{w}, "
                f"manifest declares {shapes['H']}x{shapes['W']}")
    else:
        expected = shapes["H"] * shapes["W"] * 3 * 4
        actual = os.path.getsize(image_path)
        if actual != expected:
            raise DatasetError(
                f"image tensor for image_id {record.image_id} holds {actual} bytes, expected {expected}")


# ---------------------------------------------------------------------------
# splits


@dataclass
class SplitManifest:
    """Disjoint by-image train/val/test assignment."""

    train: frozenset
    val: frozenset
    test: frozenset
    seed: int

    def __post_init__(self):
        self.train = frozenset(self.train)
        self.val = frozenset(self.val)
        self.test = frozenset(self.test)
        if self.train & self.val or self.train & self.test or self.val & self.test:
            raise ValueError("split parts must be pairwise disjoint")

    def part(self, name):
        return getattr(self, name)

    def to_json(self):
        return {
            "seed": self.seed,
            "train": sorted(self.train),
            "val": sorted(self.val),
            "test": sorted(self.test),
        }


def save_split(split, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(split.to_json(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_split(path):
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return SplitManifest(train=doc["train"], val=doc["val"], test=doc["test"], seed=int(doc["seed"]))


def split_dataset(manifest, ratios, seed):
    """Deterministic by-image split.

    A pure function of the image-id set, the ratios and the seed: sizes are
    floor(n * ratio) per part with the remainder assigned to train, and the
    shuffle happens on the sorted id list.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3:
        raise ValueError("ratios must be (train, val, test)")
    if any(r < 0 for r in ratios):
        raise ValueError("ratios must be non-negative")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")

    ids = manifest.image_ids() if hasattr(manifest, "image_ids") else sorted(set(manifest))
    n = len(ids)
    parts_needed = sum(1 for r in ratios if r > 0)
    if n < parts_needed:
        raise ValueError(f"only {n} images for {parts_needed} split parts")

    sizes = [math.floor(n * r + 1e-9) for r in ratios]
    sizes[0] += n - sum(sizes)
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(n)]
    train = order[:sizes[0]]
    val = order[sizes[0]:sizes[0] + sizes[1]]
    test = order[sizes[0] + sizes[1]:]
    return SplitManifest(train=train, val=val, test=test, seed=int(seed))


# ---------------------------------------------------------------------------
# preprocessing


@dataclass
class PreprocessConfig:
    """Per-channel z-score plus an optional fixed-offset crop in time."""

    target_samples: int | None = None
    crop_offset: int = 0
    normalize: bool = True
    zero_variance: str = "zero"  # "zero" -> replace channel, "error" -> raise

    def __post_init__(self):
        if self.zero_variance not in ("zero", "error"):
            raise ValueError("zero_variance must be 'zero' or 'error'")


def preprocess_eeg(raw, config=None):
    """Crop then z-score an EEG segment; preserves channel count."""
    config = config or PreprocessConfig()
    data = raw.data
    if config.target_samples is not None:
        t = int(config.target_samples)
        start = int(config.crop_offset)
        if t < 1 or start < 0 or start + t > raw.sample_count:
            raise ValueError(
                f"cannot crop {t} samples at offset {start} from {raw.sample_count}")
        data = data[:, start:start + t]
    if config.normalize:
        mean = data.mean(axis=1, keepdims=True)
        std = data.std(axis=1, keepdims=True)
        flat = std[:, 0] == 0.0
        if np.any(flat):
            if config.zero_variance == "error":
                raise DatasetError(
                    f"zero-variance channel(s) {np.flatnonzero(flat).tolist()} in {raw.image_id}")
            logger.warning("zero-variance channel(s) %s in %s replaced by zeros",
                           np.flatnonzero(flat).tolist(), raw.image_id)
        safe = np.where(std == 0.0, 1.0, std)
        data = (data - mean) / safe
        data[flat, :] = 0.0
    else:
        data = data.copy()
    return EegSegment(data=data, subject_id=raw.subject_id,
                      class_label=raw.class_label, image_id=raw.image_id)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticSpec:
    """Desk-scale stand-in dataset: class-keyed sinusoid EEG plus
    procedural class-shaped images."""

    n_classes: int = 4
    images_per_class: int = 10
    subjects: int = 2
    channels: int = 16
    samples: int = 128
    height: int = 64
    width: int = 64
    snr: float = 8.0  # signal-to-noise amplitude ratio; inf turns noise off

    def __post_init__(self):
        for name in ("n_classes", "images_per_class", "subjects", "channels", "samples", "height", "width"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not (self.snr > 0):
            raise ValueError("snr must be positive (use inf to disable noise)")


_COLORS = {
    "crimson": (0.86, 0.08, 0.24),
    "teal": (0.0, 0.5, 0.5),
    "amber": (1.0, 0.75, 0.0),
    "violet": (0.56, 0.0, 1.0),
    "olive": (0.5, 0.5, 0.0),
    "navy": (0.0, 0.0, 0.5),
    "coral": (1.0, 0.5, 0.31),
    "slate": (0.44, 0.5, 0.56),
}
_SHAPES = ("disk", "square", "stripes", "triangle")


def _class_name(index):
    colors = list(_COLORS)
    name = f"{colors[index % len(colors)]}_{_SHAPES[index % len(_SHAPES)]}"
    if index >= len(colors):
        name = f"{name}_{index:02d}"
    return name


def _grating_params(class_index, seed):
    rng = np.random.default_rng(derive_seed(seed, "grating", class_index))
    return {"theta": rng.uniform(0.0, np.pi),
            "cycles": rng.uniform(3.0, 6.0),
            "phase": rng.uniform(0.0, 2.0 * np.pi),
            "amplitude": 0.08}


def _render_class_image(class_index, height, width, rng, grating):
    """Class-colored, class-textured background plus a jittered class shape.

    The background grating is fixed per class (only the foreground shape
    jitters per image), so class-conditional models can reproduce it while
    structure-free reconstructions cannot match its local contrast.
    """
    color = np.array(_COLORS[list(_COLORS)[class_index % len(_COLORS)]], dtype=FLOAT)
    background = 0.12 + 0.25 * color
    img = np.tile(background, (height, width, 1))
    gy, gx = np.mgrid[0:height, 0:width]
    axis = (np.cos(grating["theta"]) * gx + np.sin(grating["theta"]) * gy)
    wave = np.sin(2.0 * np.pi * grating["cycles"] * axis / min(height, width)
                  + grating["phase"])
    img += grating["amplitude"] * wave[:, :, None]
    cy = height / 2 + rng.uniform(-0.06, 0.06) * height
    cx = width / 2 + rng.uniform(-0.06, 0.06) * width
    radius = (0.28 + rng.uniform(-0.03, 0.03)) * min(height, width)
    ys, xs = np.mgrid[0:height, 0:width]
    shape = _SHAPES[class_index % len(_SHAPES)]
    if shape == "disk":
        mask = (ys - cy) ** 2 + (xs - cx) ** 2 <= radius ** 2
    elif shape == "square":
        mask = (np.abs(ys - cy) <= radius * 0.85) & (np.abs(xs - cx) <= radius * 0.85)
    elif shape == "stripes":
        period = max(4, int(radius / 2))
        mask = ((ys + xs) // period) % 2 == 0
    else:  # triangle
        mask = (ys - cy >= -radius) & (np.abs(xs - cx) <= (ys - cy + radius) * 0.6)
        mask &= ys - cy <= radius
    foreground = np.clip(0.55 + 0.45 * color + rng.uniform(-0.04, 0.04, size=3), 0.0, 1.0)
    img[mask] = foreground
    return np.clip(img, 0.0, 1.0)


def _class_eeg_signal(class_index, channels, samples, seed):
    rng = np.random.default_rng(derive_seed(seed, "class-eeg", class_index))
    freqs = rng.uniform(1.0, 8.0, size=channels)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=channels)
    amps = rng.uniform(0.5, 1.5, size=channels)
    t = np.linspace(0.0, 1.0, samples, endpoint=False)
    return amps[:, None] * np.sin(2.0 * np.pi * freqs[:, None] * t[None, :] + phases[:, None])


def generate_synthetic_dataset(spec, seed, out_dir):
    """Write a synthetic dataset to ``out_dir`` and return its manifest.

    Same-class EEG segments share one class signal and differ only by the
    per-segment noise draw, so with snr=inf they are identical. All
    randomness derives from ``seed``; two runs produce byte-identical files.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "eeg").mkdir(parents=True, exist_ok=True)

    class_names = {c: _class_name(c) for c in range(spec.n_classes)}
    class_signals = {c: _class_eeg_signal(c, spec.channels, spec.samples, seed)
                     for c in range(spec.n_classes)}
    gratings = {c: _grating_params(c, seed) for c in range(spec.n_classes)}

    records = []
    image_index = 0
    for c in range(spec.n_classes):
        for _ in range(spec.images_per_class):
            image_id = f"img_{image_index:04d}"
            img_rng = np.random.default_rng(derive_seed(seed, "image", image_index))
            pixels = _render_class_image(c, spec.height, spec.width, img_rng, gratings[c])
            image_rel = f"images/{image_id}.png"
            imgio.save_png(out_dir / image_rel, pixels)

            signal = class_signals[c]
            rms = np.sqrt((signal ** 2).mean(axis=1, keepdims=True))
            for s in range(spec.subjects):
                seg = signal
                if np.isfinite(spec.snr):
                    noise_rng = np.random.default_rng(derive_seed(seed, "noise", image_index, s))
                    seg = signal + noise_rng.normal(0.0, 1.0, size=signal.shape) * (rms / spec.snr)
                eeg_rel = f"eeg/{image_id}_s{s:02d}.f32"
                imgio.write_f32(out_dir / eeg_rel, seg)
                records.append(ManifestRecord(eeg_path=eeg_rel, image_path=image_rel,
                                              subject_id=s, class_label=c, image_id=image_id))
            image_index += 1

    manifest = DatasetManifest(
        root=out_dir,
        shapes={"C": spec.channels, "T": spec.samples, "H": spec.height, "W": spec.width},
        class_names=class_names,
        records=records,
    )
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
