"""Pixel-level saliency decoding with a conditional GAN.

The generator maps (latent noise, EEG feature) to a low-resolution map in
[0, 1] through a tanh MLP with a sigmoid head. The discriminator scores
augmented images with a projection head on the conditioning feature. The
generator objective is the weighted sum

    total = w_adv * (-D(A(G(z, f)), f)) + w_ms * ms + w_ssim * (1 - SSIM)

where ms is the mode-seeking ratio -d_img(G(z1,f), G(z2,f)) / (d_z(z1,z2)
+ eps) and the discriminator minimises the two-sided hinge
max(0, 1 - D(A(y), f)) + max(0, 1 + D(A(G(z, f)), f)). All losses come
with closed-form gradients so each can be checked against central finite
differences.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import ssim as ssim_mod
from .augment import augment_batch_with_grad
from .encoder import encode_batch, load_training_arrays
from .images import resize_bilinear
from .nn import (FLOAT, Adam, Mlp, TrainingDiverged, derive_seed,
                 load_checkpoint, require_finite, save_checkpoint)

logger = logging.getLogger(__name__)


@dataclass
class SaliencyMap:
    pixels: np.ndarray  # (H_p, W_p, 3) in [0, 1]
    source_image_id: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=FLOAT)
        require_finite(self.pixels, "saliency map")
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"saliency map must be (H, W, 3), got {self.pixels.shape}")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError("saliency map values must lie in [0, 1]")


@dataclass
class LatentNoise:
    z: np.ndarray

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=FLOAT)
        require_finite(self.z, "latent noise")

    @classmethod
    def sample(cls, dim, rng):
        return cls(z=rng.standard_normal(dim))


@dataclass
class GanLossConfig:
    w_adv: float = 1.0
    w_ms: float = 1.0
    w_ssim: float = 1.0
    c1: float = ssim_mod.DEFAULT_C1
    c2: float = ssim_mod.DEFAULT_C2
    ssim_window: int = ssim_mod.DEFAULT_WINDOW
    ms_eps: float = 1e-8
    policy: str = "standard"

    def __post_init__(self):
        if min(self.w_adv, self.w_ms, self.w_ssim) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("SSIM constants must be positive")
        if self.ms_eps <= 0:
            raise ValueError("mode-seeking epsilon must be positive")


@dataclass
class GanTrainConfig:
    z_dim: int = 32
    gen_hidden: int = 256
    disc_hidden: int = 128
    map_height: int = 64
    map_width: int = 64
    epochs: int = 30
    batch_size: int = 8
    lr_g: float = 2e-3
    lr_d: float = 1e-3
    freeze_encoder: bool = True
    seed: int = 0
    loss: GanLossConfig = field(default_factory=GanLossConfig)


@dataclass
class GeneratorState:
    net: Mlp
    z_dim: int
    feature_dim: int
    map_height: int
    map_width: int


class Discriminator:
    """Tanh MLP trunk with a linear + feature-projection score head."""

    def __init__(self, pixel_dim, feature_dim, hidden, seed=0):
        self.pixel_dim = int(pixel_dim)
        self.feature_dim = int(feature_dim)
        self.trunk = Mlp((pixel_dim, hidden, hidden), out="tanh", seed=derive_seed(seed, "trunk"))
        rng = np.random.default_rng(derive_seed(seed, "head"))
        self.params = dict(self.trunk.params)
        self.params["head_w"] = rng.normal(0.0, 1.0 / np.sqrt(hidden), hidden).astype(FLOAT)
        self.params["head_b"] = np.zeros(1, dtype=FLOAT)
        self.params["proj"] = rng.normal(0.0, 1.0 / np.sqrt(feature_dim), (feature_dim, hidden)).astype(FLOAT)
        self.trunk.params = self.params  # trunk shares the flat dict

    def forward(self, images_flat, feats, cache=None):
        """Score a batch: (B, pixel_dim), (B, F) -> (B,)."""
        trunk_cache = {} if cache is not None else None
        phi = self.trunk.forward(images_flat, cache=trunk_cache)
        cond = feats @ self.params["proj"]
        scores = phi @ self.params["head_w"] + self.params["head_b"][0] + (phi * cond).sum(axis=1)
        if cache is not None:
            cache.update(trunk=trunk_cache, phi=phi, cond=cond, feats=feats)
        return scores

    def backward(self, cache, gscores):
        """Return (grad wrt flat images, grad wrt feats, param grads)."""
        g = np.asarray(gscores, dtype=FLOAT)[:, None]
        phi, cond, feats = cache["phi"], cache["cond"], cache["feats"]
        gphi = g * (self.params["head_w"][None, :] + cond)
        grads = {
            "head_w": (g * phi).sum(axis=0),
            "head_b": np.array([float(g.sum())]),
            "proj": feats.T @ (g * phi),
        }
        gfeats = (g * phi) @ self.params["proj"].T
        gimages, trunk_grads = self.trunk.backward(cache["trunk"], gphi)
        grads.update(trunk_grads)
        return gimages, gfeats, grads


@dataclass
class DiscriminatorState:
    disc: Discriminator
    feature_dim: int
    map_height: int
    map_width: int


def build_generator(feature_dim, config):
    net = Mlp((config.z_dim + feature_dim, config.gen_hidden,
               config.map_height * config.map_width * 3),
              out="sigmoid", seed=derive_seed(config.seed, "generator"))
    return GeneratorState(net=net, z_dim=config.z_dim, feature_dim=feature_dim,
                          map_height=config.map_height, map_width=config.map_width)


def build_discriminator(feature_dim, config):
    disc = Discriminator(pixel_dim=config.map_height * config.map_width * 3,
                         feature_dim=feature_dim, hidden=config.disc_hidden,
                         seed=derive_seed(config.seed, "discriminator"))
    return DiscriminatorState(disc=disc, feature_dim=feature_dim,
                              map_height=config.map_height, map_width=config.map_width)


def _gen_forward(g_state, z_batch, feat_batch, cache=None):
    if feat_batch.shape[1] != g_state.feature_dim:
        raise ValueError(f"feature dim {feat_batch.shape[1]} does not match generator "
                         f"({g_state.feature_dim})")
    if z_batch.shape[1] != g_state.z_dim:
        raise ValueError(f"latent dim {z_batch.shape[1]} does not match generator ({g_state.z_dim})")
    flat = g_state.net.forward(np.concatenate([z_batch, feat_batch], axis=1), cache=cache)
    return flat.reshape(-1, g_state.map_height, g_state.map_width, 3)


def generate_saliency(feature, z, generator_state):
    """M(x) = G(z, f): one saliency map in [0, 1], deterministic."""
    fvec = np.asarray(getattr(feature, "vector", feature), dtype=FLOAT)
    zvec = np.asarray(getattr(z, "z", z), dtype=FLOAT)
    maps = _gen_forward(generator_state, zvec[None], fvec[None])
    return SaliencyMap(pixels=maps[0], source_image_id=getattr(feature, "source_image_id", ""))


# ---------------------------------------------------------------------------
# losses


def hinge_d_loss(real_scores, fake_scores):
    """Two-sided hinge on discriminator scores, averaged over the batch."""
    value, _, _ = hinge_d_loss_with_grad(real_scores, fake_scores)
    return value


def hinge_d_loss_with_grad(real_scores, fake_scores):
    sr = np.atleast_1d(np.asarray(real_scores, dtype=FLOAT))
    sf = np.atleast_1d(np.asarray(fake_scores, dtype=FLOAT))
    n = sr.shape[0]
    real_term = np.maximum(0.0, 1.0 - sr)
    fake_term = np.maximum(0.0, 1.0 + sf)
    value = float(real_term.mean() + fake_term.mean())
    g_real = np.where(real_term > 0.0, -1.0, 0.0) / n
    g_fake = np.where(fake_term > 0.0, 1.0, 0.0) / n
    return value, g_real, g_fake


def discriminator_loss(real, fake, feature, d_state, policy="standard", seed=0):
    """Hinge loss with the same augmentation applied to both branches."""
    value, _, _, _ = discriminator_loss_with_grad(real, fake, feature, d_state, policy, seed)
    return value


def discriminator_loss_with_grad(real, fake, feature, d_state, policy="standard", seed=0):
    """Return (value, d/d real, d/d fake, d/d feature)."""
    real_b, fake_b, feats = _as_batches(real, fake, feature, d_state)
    aug_real, back_real = augment_batch_with_grad(real_b, policy, seed)
    aug_fake, back_fake = augment_batch_with_grad(fake_b, policy, seed)
    cache_r, cache_f = {}, {}
    sr = d_state.disc.forward(aug_real.reshape(len(aug_real), -1), feats, cache=cache_r)
    sf = d_state.disc.forward(aug_fake.reshape(len(aug_fake), -1), feats, cache=cache_f)
    value, gsr, gsf = hinge_d_loss_with_grad(sr, sf)
    gr_flat, gfeat_r, _ = d_state.disc.backward(cache_r, gsr)
    gf_flat, gfeat_f, _ = d_state.disc.backward(cache_f, gsf)
    g_real = back_real(gr_flat.reshape(aug_real.shape))
    g_fake = back_fake(gf_flat.reshape(aug_fake.shape))
    g_feat = gfeat_r + gfeat_f
    if np.asarray(getattr(real, "pixels", real)).ndim == 3:
        return value, g_real[0], g_fake[0], g_feat[0]
    return value, g_real, g_fake, g_feat


def generator_adv_loss(fake, feature, d_state, policy="standard", seed=0):
    """-D(A(fake), feature), averaged over the batch."""
    value, _, _ = generator_adv_loss_with_grad(fake, feature, d_state, policy, seed)
    return value


def generator_adv_loss_with_grad(fake, feature, d_state, policy="standard", seed=0):
    fake_b, feats = _as_fake_batch(fake, feature, d_state)
    aug_fake, back_fake = augment_batch_with_grad(fake_b, policy, seed)
    cache = {}
    sf = d_state.disc.forward(aug_fake.reshape(len(aug_fake), -1), feats, cache=cache)
    value = -float(sf.mean())
    gs = np.full(sf.shape, -1.0 / sf.shape[0])
    gflat, gfeat, _ = d_state.disc.backward(cache, gs)
    g_fake = back_fake(gflat.reshape(aug_fake.shape))
    if np.asarray(getattr(fake, "pixels", fake)).ndim == 3:
        return value, g_fake[0], gfeat[0]
    return value, g_fake, gfeat


def l1_distance(a, b):
    """Mean absolute difference; the default image/latent metric."""
    return float(np.mean(np.abs(np.asarray(a, dtype=FLOAT) - np.asarray(b, dtype=FLOAT))))


def mode_seeking_loss(out1, out2, z1, z2, dist_x=None, dist_z=None, eps=1e-8):
    """-d_x(out1, out2) / (d_z(z1, z2) + eps); always <= 0."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    dist_x = dist_x or l1_distance
    dist_z = dist_z or l1_distance
    z1 = np.asarray(getattr(z1, "z", z1), dtype=FLOAT)
    z2 = np.asarray(getattr(z2, "z", z2), dtype=FLOAT)
    return -dist_x(out1, out2) / (dist_z(z1, z2) + eps)


def mode_seeking_loss_with_grad(out1, out2, z1, z2, eps=1e-8):
    """Gradients of the mean-absolute-distance form wrt both outputs."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    o1 = np.asarray(out1, dtype=FLOAT)
    o2 = np.asarray(out2, dtype=FLOAT)
    z1 = np.asarray(getattr(z1, "z", z1), dtype=FLOAT)
    z2 = np.asarray(getattr(z2, "z", z2), dtype=FLOAT)
    dx = np.mean(np.abs(o1 - o2))
    dz = np.mean(np.abs(z1 - z2)) + eps
    value = float(-dx / dz)
    scale = -1.0 / (dz * o1.size)
    g1 = scale * np.sign(o1 - o2)
    return value, g1, -g1


def generator_total_loss(adv, ms, ssim_loss_value, w_adv=1.0, w_ms=1.0, w_ssim=1.0):
    """Weighted sum of the three generator loss components."""
    if min(w_adv, w_ms, w_ssim) < 0:
        raise ValueError("loss weights must be non-negative")
    return w_adv * adv + w_ms * ms + w_ssim * ssim_loss_value


# expose the shared SSIM entry points under the trainer's namespace
ssim = ssim_mod.ssim
ssim_loss = ssim_mod.ssim_loss


def _as_batches(real, fake, feature, d_state):
    real_b = _pix(real)
    fake_b = _pix(fake)
    feats = np.asarray(getattr(feature, "vector", feature), dtype=FLOAT)
    if real_b.ndim == 3:
        real_b = real_b[None]
    if fake_b.ndim == 3:
        fake_b = fake_b[None]
    if feats.ndim == 1:
        feats = feats[None]
    if real_b.shape != fake_b.shape:
        raise ValueError(f"real {real_b.shape} and fake {fake_b.shape} shapes differ")
    _check_map_shape(real_b, d_state)
    return real_b, fake_b, feats


def _as_fake_batch(fake, feature, d_state):
    fake_b = _pix(fake)
    feats = np.asarray(getattr(feature, "vector", feature), dtype=FLOAT)
    if fake_b.ndim == 3:
        fake_b = fake_b[None]
    if feats.ndim == 1:
        feats = feats[None]
    _check_map_shape(fake_b, d_state)
    return fake_b, feats


def _pix(x):
    return np.asarray(getattr(x, "pixels", x), dtype=FLOAT)


def _check_map_shape(batch, d_state):
    if batch.shape[1:] != (d_state.map_height, d_state.map_width, 3):
        raise ValueError(f"image batch {batch.shape[1:]} does not match discriminator "
                         f"({d_state.map_height}, {d_state.map_width}, 3)")


# ---------------------------------------------------------------------------
# training


def saliency_targets(manifest, image_ids, map_size):
    """Ground-truth images downsampled to the saliency resolution,
    ordered like :func:`eegrecon.encoder.load_training_arrays`."""
    records = sorted(manifest.records_for(image_ids), key=lambda r: (r.image_id, r.subject_id))
    cache = {}
    targets = []
    for rec in records:
        if rec.image_id not in cache:
            img = manifest.load_image(rec)
            cache[rec.image_id] = np.clip(resize_bilinear(img.pixels, map_size), 0.0, 1.0)
        targets.append(cache[rec.image_id])
    return np.stack(targets)


def mean_ssim_to_targets(g_state, feats, targets, loss_config, seed=0):
    """SSIM between generated maps (fixed seeded z) and their targets."""
    rng = np.random.default_rng(derive_seed(seed, "ssim-eval"))
    z = rng.standard_normal((feats.shape[0], g_state.z_dim))
    maps = _gen_forward(g_state, z, feats)
    vals = [ssim_mod.ssim(maps[i], targets[i], c1=loss_config.c1, c2=loss_config.c2,
                          window=loss_config.ssim_window)
            for i in range(len(maps))]
    return float(np.mean(vals))


def train_saliency_gan(manifest, split, encoder_state, config, preprocess=None):
    """Alternating hinge-D / weighted-G optimisation on the train split.

    Returns (generator_state, discriminator_state, history) where history
    holds one dict of loss components per epoch.
    """
    x, _, _, _ = load_training_arrays(manifest, split.train, preprocess)
    feats = encode_batch(x, encoder_state)
    targets = saliency_targets(manifest, split.train, (config.map_height, config.map_width))
    if not config.freeze_encoder:
        raise NotImplementedError("joint encoder fine-tuning is not supported; "
                                  "train with freeze_encoder=True")

    n = feats.shape[0]
    g_state = build_generator(encoder_state.feature_dim, config)
    d_state = build_discriminator(encoder_state.feature_dim, config)
    opt_g = Adam(g_state.net.params, lr=config.lr_g)
    opt_d = Adam(d_state.disc.params, lr=config.lr_d)
    lc = config.loss
    steps = max(1, math.ceil(n / config.batch_size))

    history = []
    for epoch in range(config.epochs):
        rng = np.random.default_rng(derive_seed(config.seed, "gan-epoch", epoch))
        order = rng.permutation(n)
        comps = {"d_loss": [], "g_adv": [], "g_ms": [], "g_ssim": [], "g_total": []}
        ssim_vals = []
        for step in range(steps):
            idx = order[step * config.batch_size:(step + 1) * config.batch_size]
            if idx.size == 0:
                continue
            fb = feats[idx]
            tb = targets[idx]
            bsz = idx.size

            # --- discriminator step
            z = rng.standard_normal((bsz, config.z_dim))
            fake = _gen_forward(g_state, z, fb)
            aug_seed = derive_seed(config.seed, "aug", epoch, step)
            aug_real, _ = augment_batch_with_grad(tb, lc.policy, aug_seed)
            aug_fake, _ = augment_batch_with_grad(fake, lc.policy, aug_seed)
            cache_r, cache_f = {}, {}
            sr = d_state.disc.forward(aug_real.reshape(bsz, -1), fb, cache=cache_r)
            sf = d_state.disc.forward(aug_fake.reshape(bsz, -1), fb, cache=cache_f)
            d_loss, gsr, gsf = hinge_d_loss_with_grad(sr, sf)
            _, _, grads_r = d_state.disc.backward(cache_r, gsr)
            _, _, grads_f = d_state.disc.backward(cache_f, gsf)
            opt_d.step({k: grads_r[k] + grads_f[k] for k in grads_r})

            # --- generator step
            z1 = rng.standard_normal((bsz, config.z_dim))
            z2 = rng.standard_normal((bsz, config.z_dim))
            cache1, cache2 = {}, {}
            out1 = _gen_forward(g_state, z1, fb, cache=cache1)
            out2 = _gen_forward(g_state, z2, fb, cache=cache2)

            adv_seed = derive_seed(config.seed, "aug-g", epoch, step)
            aug1, back1 = augment_batch_with_grad(out1, lc.policy, adv_seed)
            cache_adv = {}
            s_adv = d_state.disc.forward(aug1.reshape(bsz, -1), fb, cache=cache_adv)
            g_adv = -float(s_adv.mean())
            gflat, _, _ = d_state.disc.backward(cache_adv, np.full(bsz, -1.0 / bsz))
            grad1 = lc.w_adv * back1(gflat.reshape(aug1.shape))

            g_ms, gm1, gm2 = mode_seeking_loss_with_grad(out1, out2, z1, z2, eps=lc.ms_eps)
            grad1 = grad1 + lc.w_ms * gm1
            grad2 = lc.w_ms * gm2

            ssim_losses = []
            for i in range(bsz):
                val, ga, _ = ssim_mod.ssim_with_grad(out1[i], tb[i], c1=lc.c1, c2=lc.c2,
                                                     window=lc.ssim_window)
                ssim_losses.append(1.0 - val)
                ssim_vals.append(val)
                grad1[i] += lc.w_ssim * (-ga) / bsz
            g_ssim = float(np.mean(ssim_losses))
            g_total = generator_total_loss(g_adv, g_ms, g_ssim, lc.w_adv, lc.w_ms, lc.w_ssim)
            if not np.isfinite(g_total) or not np.isfinite(d_loss):
                raise TrainingDiverged(f"GAN loss non-finite at epoch {epoch} step {step}")

            _, grads1 = g_state.net.backward(cache1, grad1.reshape(bsz, -1))
            _, grads2 = g_state.net.backward(cache2, grad2.reshape(bsz, -1))
            opt_g.step({k: grads1[k] + grads2[k] for k in grads1})

            comps["d_loss"].append(d_loss)
            comps["g_adv"].append(g_adv)
            comps["g_ms"].append(g_ms)
            comps["g_ssim"].append(g_ssim)
            comps["g_total"].append(g_total)
        entry = {k: float(np.mean(v)) for k, v in comps.items()}
        entry["epoch"] = epoch
        entry["ssim_to_target"] = float(np.mean(ssim_vals))
        history.append(entry)
        logger.debug("gan epoch %d: %s", epoch, entry)
    return g_state, d_state, history


def save_gan(g_state, d_state, path):
    params = {f"g.{k}": v for k, v in g_state.net.params.items()}
    params.update({f"d.{k}": v for k, v in d_state.disc.params.items()})
    save_checkpoint(path, kind="saliency-gan",
                    config={"z_dim": g_state.z_dim, "feature_dim": g_state.feature_dim,
                            "map_height": g_state.map_height, "map_width": g_state.map_width,
                            "gen_hidden": g_state.net.sizes[1],
                            "disc_hidden": d_state.disc.trunk.sizes[1]},
                    params=params)


def load_gan(path):
    ckpt = load_checkpoint(path)
    if ckpt.kind != "saliency-gan":
        raise ValueError(f"{path} is a {ckpt.kind!r} checkpoint, expected saliency-gan")
    cfg = ckpt.config
    train_cfg = GanTrainConfig(z_dim=cfg["z_dim"], gen_hidden=cfg["gen_hidden"],
                               disc_hidden=cfg["disc_hidden"], map_height=cfg["map_height"],
                               map_width=cfg["map_width"])
    g_state = build_generator(cfg["feature_dim"], train_cfg)
    d_state = build_discriminator(cfg["feature_dim"], train_cfg)
    for key, value in ckpt.params.items():
        kind, name = key.split(".", 1)
        target = g_state.net.params if kind == "g" else d_state.disc.params
        target[name] = value
    return g_state, d_state
