"""Image reconstruction through a pluggable latent-diffusion backend.

The reconstruction procedure is fixed: resize the saliency map to the
output resolution, encode it to a latent, forward-noise it by ``strength``,
denoise conditioned on the semantic embedding, and decode back to pixels.
Backends implement encode/noise/denoise/decode; the deterministic mock
backend ships with every build and its contract is normative for tests:

    strength=0   -> the resized saliency map, bit-exactly
    strength=1   -> the embedding-keyed canvas, bit-exactly
    in between   -> a blend plus a small seeded per-sample perturbation

The canvas stands in for what a pretrained text-conditioned model renders
from the embedding. With a palette (anchor embedding -> class canvas
pairs, the mock's "pretrained knowledge") the canvas of the nearest
anchor is used; without one it falls back to a continuous function of the
embedding (pooled matrix through a fixed random projection to a base
colour and a vertical tilt), which maps the zero embedding to mid-grey.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .images import resize_bilinear
from .nn import FLOAT, derive_seed, require_finite

CANVAS_PROJECTION_SEED = 714025
DIVERSITY_SCALE = 0.1


class BackendUnavailableError(RuntimeError):
    """The requested diffusion backend cannot run in this environment."""


@dataclass
class DiffusionParams:
    strength: float = 0.75  # fraction of the noise schedule applied
    steps: int = 50
    guidance_scale: float = 7.5
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.strength <= 1.0):
            raise ValueError("strength must lie in [0, 1]")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be >= 0")


@dataclass
class ReconstructedImage:
    pixels: np.ndarray  # (H, W, 3) in [0, 1]
    image_id: str
    sample_index: int

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=FLOAT)
        require_finite(self.pixels, "reconstructed image")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError("reconstructed image values must lie in [0, 1]")


@dataclass
class DiffusionBackendDescriptor:
    kind: str  # "pretrained-latent-diffusion" | "mock"
    latent_shape: tuple | None
    version: str


class DiffusionBackend:
    """Adapter interface around an image-to-image diffusion stack."""

    def output_size(self):
        raise NotImplementedError

    def encode(self, image):
        raise NotImplementedError

    def noise(self, latent, strength, seed):
        raise NotImplementedError

    def denoise(self, latent, embedding, steps, guidance, seed):
        raise NotImplementedError

    def decode(self, latent):
        raise NotImplementedError

    def describe(self):
        raise NotImplementedError


@dataclass
class MockLatent:
    array: np.ndarray
    strength: float


class MockDiffusionBackend(DiffusionBackend):
    """Identity autoencoder; denoising blends toward the embedding canvas."""

    version = "mock-diffusion-1"

    def __init__(self, height=64, width=64, cond_shape=None, palette=None):
        self.height = int(height)
        self.width = int(width)
        self.cond_shape = tuple(cond_shape) if cond_shape else None
        self.palette = None
        if palette:
            self.palette = [(np.asarray(emb, dtype=FLOAT), np.asarray(img, dtype=FLOAT))
                            for emb, img in palette]
            for _, img in self.palette:
                if img.shape != (self.height, self.width, 3):
                    raise ValueError(f"palette canvas shape {img.shape} does not match "
                                     f"backend ({self.height}, {self.width}, 3)")

    def output_size(self):
        return self.height, self.width

    def encode(self, image):
        arr = np.asarray(image, dtype=FLOAT)
        if arr.shape != (self.height, self.width, 3):
            raise ValueError(f"backend expects ({self.height}, {self.width}, 3) images, "
                             f"got {arr.shape}")
        return MockLatent(array=arr.copy(), strength=0.0)

    def _noise_field(self, seed):
        rng = np.random.default_rng(derive_seed(seed, "noise-field"))
        return rng.standard_normal((self.height, self.width, 3))

    def noise(self, latent, strength, seed):
        if not (0.0 <= strength <= 1.0):
            raise ValueError("strength must lie in [0, 1]")
        eta = self._noise_field(seed)
        arr = (1.0 - strength) * latent.array + strength * eta
        return MockLatent(array=arr, strength=float(strength))

    def canvas(self, embedding):
        """Class-coloured canvas keyed by the embedding."""
        matrix = np.asarray(getattr(embedding, "matrix", embedding), dtype=FLOAT)
        if matrix.ndim != 2:
            raise ValueError(f"conditioning embedding must be (L, D), got {matrix.shape}")
        if self.cond_shape and matrix.shape != self.cond_shape:
            raise ValueError(f"conditioning shape {matrix.shape} does not match backend "
                             f"contract {self.cond_shape}")
        if self.palette is not None:
            dists = [float(((matrix - emb) ** 2).mean()) for emb, _ in self.palette]
            return self.palette[int(np.argmin(dists))][1].copy()
        pooled = matrix.mean(axis=0)
        proj_rng = np.random.default_rng(derive_seed(CANVAS_PROJECTION_SEED, "canvas", pooled.size))
        projection = proj_rng.standard_normal((pooled.size, 6))
        vals = 4.0 * np.sqrt(matrix.shape[0]) * (pooled @ projection)
        base = 1.0 / (1.0 + np.exp(-vals[:3]))
        tilt = 0.3 * np.tanh(vals[3:])
        ramp = np.linspace(-0.5, 0.5, self.height)
        canvas = base[None, None, :] + ramp[:, None, None] * tilt[None, None, :]
        return np.clip(np.broadcast_to(canvas, (self.height, self.width, 3)), 0.05, 0.95)

    def denoise(self, latent, embedding, steps, guidance, seed):
        s = latent.strength
        eta = self._noise_field(seed)
        xi_rng = np.random.default_rng(derive_seed(seed, "diversity"))
        xi = xi_rng.standard_normal((self.height, self.width, 3))
        arr = latent.array - s * eta + s * self.canvas(embedding) \
            + (s * (1.0 - s) * DIVERSITY_SCALE) * xi
        return MockLatent(array=arr, strength=0.0)

    def decode(self, latent):
        return np.clip(latent.array, 0.0, 1.0)

    def describe(self):
        return DiffusionBackendDescriptor(kind="mock",
                                          latent_shape=(self.height, self.width, 3),
                                          version=self.version)


class PretrainedDiffusionAdapter(DiffusionBackend):
    """Placeholder adapter for an external pretrained latent-diffusion stack.

    The weights are never bundled; the adapter only reports its identity and
    fails loudly when asked to run.
    """

    def __init__(self, model_ref):
        self.model_ref = str(model_ref)

    def output_size(self):
        self._unavailable()

    def encode(self, image):
        self._unavailable()

    def noise(self, latent, strength, seed):
        self._unavailable()

    def denoise(self, latent, embedding, steps, guidance, seed):
        self._unavailable()

    def decode(self, latent):
        self._unavailable()

    def _unavailable(self):
        raise BackendUnavailableError(
            f"pretrained latent-diffusion backend {self.model_ref!r} is not runnable in "
            "this build; point EEGRECON_DIFFUSION_MODEL at a served model or use the "
            "mock backend")

    def describe(self):
        return DiffusionBackendDescriptor(kind="pretrained-latent-diffusion",
                                          latent_shape=None, version=self.model_ref)


def make_backend(kind, model_ref=None, height=64, width=64, cond_shape=None, palette=None):
    if kind == "mock":
        return MockDiffusionBackend(height=height, width=width, cond_shape=cond_shape,
                                    palette=palette)
    if kind == "pretrained-latent-diffusion":
        if not model_ref:
            raise BackendUnavailableError(
                "pretrained latent-diffusion backend requested but no model is configured; "
                "set EEGRECON_DIFFUSION_MODEL or use the mock backend")
        return PretrainedDiffusionAdapter(model_ref)
    raise ValueError(f"unknown diffusion backend kind {kind!r}")


def backend_from_env(env, height=64, width=64, cond_shape=None):
    kind = env.get("EEGRECON_DIFFUSION_BACKEND", "mock")
    model = env.get("EEGRECON_DIFFUSION_MODEL")
    return make_backend(kind, model_ref=model, height=height, width=width, cond_shape=cond_shape)


def describe_backend(backend):
    return backend.describe()


def resize_saliency(saliency_map, target):
    """Bilinear resize of a saliency map to the stimulus resolution."""
    pixels = np.asarray(getattr(saliency_map, "pixels", saliency_map), dtype=FLOAT)
    return resize_bilinear(pixels, target)


def reconstruct(saliency_map, embedding, backend, params, n_samples=1):
    """Run the four-step reconstruction; one entry per sample index.

    Each sample is deterministic in (saliency, embedding, params.seed,
    sample_index) and independent of ``n_samples``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    image_id = getattr(saliency_map, "source_image_id", "")
    resized = resize_saliency(saliency_map, backend.output_size())
    outputs = []
    for k in range(n_samples):
        seed_k = derive_seed(params.seed, "sample", k)
        latent = backend.encode(resized)
        latent = backend.noise(latent, params.strength, seed_k)
        latent = backend.denoise(latent, embedding, params.steps, params.guidance_scale, seed_k)
        pixels = backend.decode(latent)
        outputs.append(ReconstructedImage(pixels=pixels, image_id=image_id, sample_index=k))
    return outputs
