"""Losses, prior training across identities and few-shot adaptation.

The prior shares one renderer between identities and gives each identity its
own randomly initialised neural texture.  Adapting to a new actor starts a
fresh texture and either freezes the renderer (``texture_only``) or fine-tunes
it (``full``), optionally interleaving generic data one-to-one.
"""
from __future__ import annotations

import copy
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio import FPS, SAMPLE_RATE, log_mel_frames
from .evaluation import psnr
from .face_model import ConfigurationError, FaceModelAssets, compute_vertices, rasterize
from .neural_rendering import (
    Discriminator, FrameWindow, Generator, NeuralTexture, RendererConfig, window_tensors,
)
from .preprocessing import CropSpec, build_region_weights, crop_frames, jaw_sweep_bbox, rasterize_region_masks

log = logging.getLogger(__name__)

IDENTITY_FORMAT = "priordub.identity/1"


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossWeights:
    l1: float = 1.0
    vgg: float = 0.1
    reg: float = 0.1
    adv: float = 0.01

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not np.isfinite(v) or v < 0:
                raise ConfigurationError(f"loss weight {k} must be finite and >= 0, got {v}")


def weighted_l1(pred, target, weights) -> torch.Tensor:
    """Mean over frames of ``sum(w |pred - target|) / sum(w)``.

    ``pred``/``target`` are ``... x 3 x H x W`` (one frame per leading index),
    ``weights`` ``... x H x W``; weights broadcast over channels.
    """
    pred, target = torch.as_tensor(pred), torch.as_tensor(target)
    w = torch.as_tensor(weights, dtype=pred.dtype)[..., None, :, :].expand_as(pred)
    num = (w * (pred - target).abs()).flatten(-3).sum(-1)
    den = w.flatten(-3).sum(-1).clamp_min(1e-12)
    return (num / den).mean()


def texture_reg(sampled, coverage, target) -> torch.Tensor:
    """Mean ``|sampled[..., :3] - target|`` over covered pixels and channels."""
    sampled = torch.as_tensor(sampled)
    target = torch.as_tensor(target, dtype=sampled.dtype)
    cov = torch.as_tensor(coverage, dtype=torch.bool)
    n = int(cov.sum())
    if n == 0:
        return sampled.sum() * 0.0
    return (sampled[..., :3] - target).abs()[cov].mean()


def lsgan_losses(real_scores, fake_scores) -> dict:
    """Least-squares GAN objectives for the discriminator and generator."""
    real, fake = torch.as_tensor(real_scores), torch.as_tensor(fake_scores)
    return {
        "disc_loss": 0.5 * ((real - 1) ** 2).mean() + 0.5 * (fake ** 2).mean(),
        "gen_loss": 0.5 * ((fake - 1) ** 2).mean(),
    }


def total_loss(parts: dict, weights: LossWeights) -> torch.Tensor:
    return (weights.l1 * parts["l1"] + weights.vgg * parts["vgg"] + weights.reg * parts["reg"]
            + weights.adv * parts["adv"])


class IdentityFeatures:
    """Feature backend that returns the image itself (oracle for tests)."""

    name = "identity"

    def __call__(self, x):
        return [x]


class RandomConvFeatures(nn.Module):
    """Fixed random-weight convolutional pyramid standing in for VGG."""

    name = "random_conv"

    def __init__(self, widths=(16, 32, 32), seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.convs = nn.ModuleList()
        c = 3
        for w in widths:
            conv = nn.Conv2d(c, w, 3, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) / np.sqrt(9 * c))
                conv.bias.zero_()
            conv.requires_grad_(False)
            self.convs.append(conv)
            c = w

    def forward(self, x):
        feats = []
        for i, conv in enumerate(self.convs):
            x = F.leaky_relu(conv(x), 0.2)
            feats.append(x)
            if i < len(self.convs) - 1:
                x = F.avg_pool2d(x, 2)
        return feats


class VGGFeatures(nn.Module):
    """ImageNet VGG-19 relu features; needs torchvision with cached weights."""

    name = "vgg19"
    LAYERS = (3, 8, 17, 26)

    def __init__(self):
        super().__init__()
        from torchvision.models import VGG19_Weights, vgg19

        self.net = vgg19(weights=VGG19_Weights.IMAGENET1K_V1).features[: max(self.LAYERS) + 1].eval()
        self.net.requires_grad_(False)
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406])[:, None, None])
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225])[:, None, None])

    def forward(self, x):
        x = ((x + 1) / 2 - self.mean) / self.std
        feats = []
        for i, layer in enumerate(self.net):
            x = layer(x)
            if i in self.LAYERS:
                feats.append(x)
        return feats


def make_feature_backend(name: str):
    """``random_conv``, ``identity`` or ``vgg19``; returns None (with a warning)
    when the requested backend cannot be built."""
    if name in ("", "none"):
        return None
    if name == "identity":
        return IdentityFeatures()
    if name == "random_conv":
        return RandomConvFeatures()
    if name == "vgg19":
        try:
            return VGGFeatures()
        except Exception as exc:  # no torchvision or no cached weights
            warnings.warn(f"VGG backend unavailable ({exc}); perceptual loss disabled", RuntimeWarning, stacklevel=2)
            return None
    raise ConfigurationError(f"unknown feature backend {name!r}")


def perceptual_loss(pred, target, backend) -> torch.Tensor:
    """Mean over frames of the summed per-layer mean absolute feature distance.

    ``pred``/``target`` are ``... x 3 x H x W``.  A missing backend disables
    the term (returns 0 with a warning).
    """
    pred, target = torch.as_tensor(pred), torch.as_tensor(target)
    if backend is None:
        warnings.warn("no perceptual feature backend; term disabled", RuntimeWarning, stacklevel=2)
        return pred.sum() * 0.0
    p = pred.reshape(-1, *pred.shape[-3:])
    t = target.reshape(-1, *target.shape[-3:])
    per_frame = 0.0
    for fp, ft in zip(backend(p), backend(t)):
        per_frame = per_frame + (fp - ft).abs().flatten(1).mean(1)
    return per_frame.mean()


# ---------------------------------------------------------------------------
# Per-identity training data
# ---------------------------------------------------------------------------


@dataclass
class IdentityData:
    """Crops and rasterisations of one actor, all at crop resolution."""

    identity_id: str
    frames: np.ndarray  # N x H x W x 3 float32 in [0, 1]
    uv: np.ndarray  # N x H x W x 2
    coverage: np.ndarray  # N x H x W bool
    mouth: np.ndarray
    lower: np.ndarray
    audio: np.ndarray  # N x A
    crop: CropSpec | None = None

    def __len__(self):
        return len(self.frames)

    @property
    def weights(self) -> np.ndarray:
        from .preprocessing import RegionMasks

        return build_region_weights(RegionMasks(self.mouth, self.lower, self.coverage))

    def subset(self, idx) -> "IdentityData":
        idx = np.asarray(idx)
        return IdentityData(self.identity_id, self.frames[idx], self.uv[idx], self.coverage[idx], self.mouth[idx],
                            self.lower[idx], self.audio[idx], self.crop)

    def window(self, start: int, T: int, ref_indices) -> FrameWindow:
        if not 0 <= start <= len(self) - T:
            raise ConfigurationError(f"window start {start} out of range for {len(self)} frames, T={T}")
        sl = slice(start, start + T)
        refs = np.asarray(ref_indices, dtype=np.int64)
        w = self.weights
        return FrameWindow(self.frames[sl], self.uv[sl], self.coverage[sl], self.mouth[sl], w[sl],
                           self.frames[refs], self.audio[sl], np.arange(start, start + T), self.identity_id, refs)

    def save(self, path):
        crop = json.dumps(self.crop.to_dict() if self.crop else None)
        np.savez_compressed(path, identity_id=self.identity_id, frames=self.frames, uv=self.uv.astype(np.float32),
                            coverage=self.coverage, mouth=self.mouth, lower=self.lower, audio=self.audio, crop=crop)

    @classmethod
    def load(cls, path) -> "IdentityData":
        with np.load(path) as d:
            crop = json.loads(str(d["crop"]))
            return cls(str(d["identity_id"]), d["frames"], d["uv"].astype(np.float64), d["coverage"], d["mouth"],
                       d["lower"], d["audio"], CropSpec.from_dict(crop) if crop else None)


def rasterize_crops(params_list, assets: FaceModelAssets, spec: CropSpec):
    """Per-frame ``(uv, coverage, mouth, lower)`` at crop resolution."""
    uvs, covs, mouths, lowers = [], [], [], []
    for p in params_list:
        cam = spec.camera(p.camera)
        with torch.no_grad():
            ras = rasterize(compute_vertices(p.replace(camera=cam), assets), cam, None, spec.resolution)
        m = rasterize_region_masks(p, assets, spec.resolution, cam)
        uvs.append(ras.uv.numpy())
        covs.append(m.coverage)
        mouths.append(m.mouth)
        lowers.append(m.lower)
    return np.stack(uvs), np.stack(covs), np.stack(mouths), np.stack(lowers)


def build_identity_data(frames, params_list, assets: FaceModelAssets, audio, identity_id: str,
                        resolution: int = 32, spec: CropSpec | None = None, sr: int = SAMPLE_RATE,
                        n_mels: int = 16, margin: float = 0.1) -> IdentityData:
    """Crop ``frames`` with the jaw-sweep box and rasterise the tracked geometry."""
    frames = np.asarray(frames, dtype=np.float32)
    if spec is None:
        spec = jaw_sweep_bbox(params_list, assets, frames.shape[1:3], margin=margin, resolution=resolution)
    crops = crop_frames(frames, spec).astype(np.float32)
    uv, cov, mouth, lower = rasterize_crops(params_list, assets, spec)
    feats = log_mel_frames(audio, sr, len(frames), FPS, n_mels=n_mels)
    return IdentityData(identity_id, crops, uv, cov, mouth, lower, feats, spec)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WindowRef:
    identity_id: str
    start: int


@dataclass
class TrainBatch:
    items: list  # WindowRef
    provenance: list  # "specific" / "generic" per item


def window_refs(data: IdentityData, T: int, stride: int = 1) -> list[WindowRef]:
    return [WindowRef(data.identity_id, s) for s in range(0, len(data) - T + 1, stride)]


def mixed_batch_sampler(specific: list, generic: list, batch_size: int, seed: int = 0) -> Iterator[TrainBatch]:
    """Endless stream of batches, half person-specific and half generic.

    Each pool is reshuffled (seeded) whenever it runs out, so small pools
    cycle.  An empty generic pool degrades to specific-only batches.
    """
    if not specific:
        raise ConfigurationError("specific pool is empty")
    rng = np.random.default_rng(seed)
    if not generic:
        warnings.warn("generic pool empty; sampling person-specific windows only", RuntimeWarning, stacklevel=2)
        n_spec, n_gen = batch_size, 0
    else:
        if batch_size % 2:
            raise ConfigurationError("a 1:1 mix needs an even batch size")
        n_spec = n_gen = batch_size // 2

    def cycle(pool):
        while True:
            for i in rng.permutation(len(pool)):
                yield pool[i]

    spec_it = cycle(specific)
    gen_it = cycle(generic) if generic else None
    while True:
        items = [next(spec_it) for _ in range(n_spec)] + [next(gen_it) for _ in range(n_gen)]
        yield TrainBatch(items, ["specific"] * n_spec + ["generic"] * n_gen)


def uniform_sampler(pool: list, batch_size: int, seed: int = 0) -> Iterator[TrainBatch]:
    rng = np.random.default_rng(seed)
    while True:
        idx = rng.integers(0, len(pool), size=batch_size)
        yield TrainBatch([pool[i] for i in idx], ["specific"] * batch_size)


def reference_indices(n_frames: int, start: int, T: int, R: int, rng) -> np.ndarray:
    outside = np.concatenate([np.arange(0, start), np.arange(start + T, n_frames)])
    if R == 0:
        return np.zeros(0, dtype=np.int64)
    if outside.size == 0:
        raise ConfigurationError("no frames outside the window to draw references from")
    return rng.choice(outside, size=R, replace=outside.size < R)


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 4
    lr_renderer: float = 1e-3
    lr_texture: float = 1e-2
    lr_disc: float = 1e-3
    betas: tuple = (0.9, 0.999)
    weights: LossWeights = field(default_factory=LossWeights)
    feature_backend: str = "random_conv"
    val_every: int = 1
    val_windows: int = 4
    checkpoint_every: int = 0  # 0: only at the end
    seed: int = 0
    use_audio: bool = True
    use_gan: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class TrainResult:
    generator: Generator
    discriminator: Discriminator | None
    textures: dict  # identity_id -> NeuralTexture
    log: list  # metric records
    halted: bool = False


class MetricLog:
    """In-memory list of records, mirrored to a JSON-lines file when given."""

    def __init__(self, path=None):
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def append(self, rec: dict):
        self.records.append(rec)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")


def read_metric_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def _to_batch(batch: TrainBatch, datasets: dict, T: int, R: int, rng) -> list[FrameWindow]:
    out = []
    for ref in batch.items:
        d = datasets[ref.identity_id]
        out.append(d.window(ref.start, T, reference_indices(len(d), ref.start, T, R, rng)))
    return out


def fixed_windows(data: IdentityData, T: int, R: int, n: int, ref_pool: IdentityData | None = None,
                  seed: int = 1234) -> list[FrameWindow]:
    """Evenly spaced evaluation windows of ``data``.  References come from
    ``ref_pool`` (e.g. the training split) when given."""
    rng = np.random.default_rng(seed)
    starts = np.unique(np.linspace(0, len(data) - T, num=max(n, 1)).round().astype(int))
    wins = []
    for s in starts:
        if ref_pool is None:
            wins.append(data.window(s, T, reference_indices(len(data), s, T, R, rng)))
        else:
            w = data.window(s, T, np.zeros(0, dtype=np.int64))
            refs = rng.choice(len(ref_pool), size=R)
            wins.append(FrameWindow(w.targets, w.uv, w.coverage, w.mouth, w.weights, ref_pool.frames[refs],
                                    w.audio, w.indices, w.identity_id, np.zeros(0, dtype=np.int64)))
    return wins


def evaluate_windows(generator: Generator, textures: dict, windows: list[FrameWindow], use_audio: bool = True):
    """``(weighted_l1, psnr_db)`` over ``windows``; images compared in [0, 1]."""
    if not windows:
        return float("nan"), float("nan")
    with torch.no_grad():
        stack, audio, target, weights, _, _ = window_tensors(windows, textures)
        pred = generator(stack, audio if use_audio else None)
        l1 = weighted_l1((pred + 1) / 2, (target + 1) / 2, weights).item()
        p = psnr(((pred + 1) / 2).clamp(0, 1).numpy(), ((target + 1) / 2).numpy())
    return l1, p


def window_loss(generator, discriminator, textures, windows, cfg: TrainConfig, backend, dtype=torch.float32):
    """Generator objective on a batch of windows: ``(loss, parts, pred, target)``."""
    stack, audio, target, weights, sampled, cov = window_tensors(windows, textures, dtype)
    pred = generator(stack, audio if cfg.use_audio else None)
    crops = torch.as_tensor(np.stack([w.targets for w in windows]), dtype=sampled.dtype)
    parts = {
        "l1": weighted_l1(pred, target, weights),
        "vgg": perceptual_loss(pred, target, backend) if backend is not None else pred.sum() * 0.0,
        "reg": texture_reg(sampled, cov, crops),
        "adv": pred.sum() * 0.0,
    }
    if cfg.use_gan and discriminator is not None and cfg.weights.adv > 0:
        parts["adv"] = lsgan_losses(torch.ones(1), discriminator(pred))["gen_loss"]
    return total_loss(parts, cfg.weights), parts, pred, target


def _step(generator, discriminator, textures, windows, cfg: TrainConfig, backend, opt_g, opt_d):
    loss, parts, pred, target = window_loss(generator, discriminator, textures, windows, cfg, backend)
    if not torch.isfinite(loss):
        return None
    opt_g.zero_grad()
    loss.backward()
    opt_g.step()
    rec = {k: float(v.detach()) for k, v in parts.items()}
    rec["total"] = float(loss.detach())
    if cfg.use_gan and discriminator is not None and cfg.weights.adv > 0 and opt_d is not None:
        d = lsgan_losses(discriminator(target), discriminator(pred.detach()))["disc_loss"]
        opt_d.zero_grad()
        d.backward()
        opt_d.step()
        rec["disc"] = float(d.detach())
    return rec


def _optimizer(groups, cfg: TrainConfig):
    groups = [g for g in groups if g["params"]]
    return torch.optim.Adam(groups, betas=tuple(cfg.betas)) if groups else None


def _checkpoint(ckpt_dir, generator, discriminator, textures, meta):
    from .neural_rendering import save_renderer

    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    save_renderer(ckpt_dir / "renderer.pt", generator, discriminator, meta)
    tex_dir = ckpt_dir / "textures"
    tex_dir.mkdir(exist_ok=True)
    for ident, tex in textures.items():
        tex.save(tex_dir / f"{ident}.pt")


def train_prior(datasets: dict, renderer_cfg: RendererConfig, cfg: TrainConfig = TrainConfig(),
                val_data: dict | None = None, log_path=None, ckpt_dir=None) -> TrainResult:
    """Train the shared renderer and one texture per identity.

    ``datasets`` maps identity id to :class:`IdentityData`; ``val_data``
    (same keys, optional) supplies held-out frames for per-iteration
    validation.  A non-finite loss halts training and keeps the last
    checkpoint.
    """
    if len(datasets) < 2:
        raise ConfigurationError("the prior needs at least two identities")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    T, R = renderer_cfg.window, renderer_cfg.n_refs
    generator = Generator(renderer_cfg)
    discriminator = Discriminator(renderer_cfg) if cfg.use_gan else None
    textures = {ident: NeuralTexture(renderer_cfg.texture_size, renderer_cfg.channels, ident, seed=cfg.seed + 1 + k)
                for k, ident in enumerate(sorted(datasets))}
    opt_g = _optimizer([{"params": list(generator.parameters()), "lr": cfg.lr_renderer},
                        {"params": [t.data for t in textures.values()], "lr": cfg.lr_texture}], cfg)
    opt_d = _optimizer([{"params": list(discriminator.parameters()), "lr": cfg.lr_disc}], cfg) if discriminator else None
    backend = make_feature_backend(cfg.feature_backend) if cfg.weights.vgg > 0 else None
    pool = [r for d in datasets.values() for r in window_refs(d, T)]
    if not pool:
        raise ConfigurationError(f"no identity has {T} frames for a window")
    sampler = uniform_sampler(pool, cfg.batch_size, cfg.seed)
    val = []
    if val_data:
        for ident, vd in val_data.items():
            val += fixed_windows(vd, T, R, max(1, cfg.val_windows // len(val_data)), ref_pool=datasets[ident])
    metrics = MetricLog(log_path)
    meta = {"train": cfg.to_dict(), "identities": sorted(datasets)}
    halted = False
    for it in range(1, cfg.iterations + 1):
        windows = _to_batch(next(sampler), datasets, T, R, rng)
        rec = _step(generator, discriminator, textures, windows, cfg, backend, opt_g, opt_d)
        if rec is None:
            log.error("non-finite loss at iteration %d; halting", it)
            halted = True
            break
        rec["iteration"] = it
        if val and (it % cfg.val_every == 0 or it == cfg.iterations):
            rec["val_l1"], rec["val_psnr"] = evaluate_windows(generator, textures, val, cfg.use_audio)
        metrics.append(rec)
        if ckpt_dir and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            _checkpoint(Path(ckpt_dir) / f"step_{it:06d}", generator, discriminator, textures,
                        {**meta, "iteration": it})
    if ckpt_dir and not halted:
        _checkpoint(ckpt_dir, generator, discriminator, textures, {**meta, "iteration": cfg.iterations})
    return TrainResult(generator, discriminator, textures, metrics.records, halted)


# ---------------------------------------------------------------------------
# Adaptation
# ---------------------------------------------------------------------------


@dataclass
class IdentityRecord:
    """Everything person-specific.  Deleting it removes the actor."""

    identity_id: str
    texture: NeuralTexture
    mode: str  # "full" or "texture_only"
    renderer_delta: dict | None = None  # fine-tuned minus prior generator weights
    calibration: dict | None = None
    crop: CropSpec | None = None
    meta: dict = field(default_factory=dict)
    renderer_state: dict | None = None  # whole renderer, for models trained without a prior

    def __post_init__(self):
        if self.mode not in ("full", "texture_only"):
            raise ConfigurationError(f"unknown adaptation mode {self.mode!r}")
        if self.mode == "texture_only" and (self.renderer_delta is not None or self.renderer_state is not None):
            raise ConfigurationError("texture_only records carry no renderer weights")

    def generator(self, prior: Generator | None) -> Generator:
        """The renderer this identity renders with."""
        if self.renderer_state is not None:
            g = Generator(RendererConfig.from_dict(self.meta["renderer"]))
            g.load_state_dict(self.renderer_state)
            return g
        if prior is None:
            raise ConfigurationError(f"identity {self.identity_id} needs the prior renderer")
        if self.renderer_delta is None:
            return prior
        g = copy.deepcopy(prior)
        with torch.no_grad():
            for name, p in g.state_dict().items():
                p.add_(self.renderer_delta[name])
        return g

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.texture.save(d / "texture.pt")
        for name in ("renderer_delta", "renderer_state"):
            path = d / f"{name}.pt"
            if getattr(self, name) is not None:
                torch.save(getattr(self, name), path)
            elif path.exists():
                path.unlink()
        rec = {"format": IDENTITY_FORMAT, "identity_id": self.identity_id, "mode": self.mode,
               "calibration": self.calibration, "crop": self.crop.to_dict() if self.crop else None,
               "meta": self.meta}
        (d / "record.json").write_text(json.dumps(rec, indent=1))

    @classmethod
    def load(cls, directory) -> "IdentityRecord":
        d = Path(directory)
        if not (d / "record.json").exists():
            raise ConfigurationError(f"no identity record in {d}")
        rec = json.loads((d / "record.json").read_text())
        if rec.get("format") != IDENTITY_FORMAT:
            raise ConfigurationError(f"{d} holds an unknown identity format")
        weights = {}
        for name in ("renderer_delta", "renderer_state"):
            path = d / f"{name}.pt"
            weights[name] = torch.load(path, weights_only=True) if path.exists() else None
        crop = CropSpec.from_dict(rec["crop"]) if rec.get("crop") else None
        return cls(rec["identity_id"], NeuralTexture.load(d / "texture.pt"), rec["mode"], weights["renderer_delta"],
                   rec.get("calibration"), crop, rec.get("meta", {}), weights["renderer_state"])


@dataclass
class AdaptResult:
    record: IdentityRecord
    generator: Generator
    log: list
    halted: bool = False


def initial_state(prior: Generator | None, identity_id: str, seed: int = 0,
                  renderer_cfg: RendererConfig | None = None) -> tuple[Generator, NeuralTexture]:
    """Renderer and fresh texture an adaptation run starts from (the untrained
    baseline).  Seeds the global torch generator like the run itself."""
    torch.manual_seed(seed)
    if prior is None:
        if renderer_cfg is None:
            raise ConfigurationError("scratch training needs a renderer config")
        generator = Generator(renderer_cfg)
    else:
        generator = copy.deepcopy(prior)
    rcfg = generator.cfg
    return generator, NeuralTexture(rcfg.texture_size, rcfg.channels, identity_id, seed=seed + 10_007)


def adapt_identity(prior: Generator | None, actor: IdentityData, mode: str = "full",
                   cfg: TrainConfig = TrainConfig(), mixed_pool: dict | None = None,
                   prior_textures: dict | None = None, prior_disc: Discriminator | None = None,
                   renderer_cfg: RendererConfig | None = None, val_data: IdentityData | None = None,
                   log_path=None) -> AdaptResult:
    """Fit a fresh texture for ``actor`` starting from ``prior``.

    ``prior=None`` trains a randomly initialised renderer instead (the
    from-scratch baseline; needs ``renderer_cfg``).  ``mixed_pool`` maps
    generic identity ids to :class:`IdentityData` whose frozen textures are
    in ``prior_textures``; batches then mix 1:1.
    """
    if len(actor) == 0:
        raise ConfigurationError("no actor frames to adapt on")
    if mode not in ("full", "texture_only"):
        raise ConfigurationError(f"unknown adaptation mode {mode!r}")
    if prior is None and mode == "texture_only":
        raise ConfigurationError("texture_only needs a prior renderer")
    generator, texture = initial_state(prior, actor.identity_id, cfg.seed, renderer_cfg)
    rng = np.random.default_rng(cfg.seed)
    rcfg = generator.cfg
    T, R = rcfg.window, rcfg.n_refs
    if len(actor) < T:
        raise ConfigurationError(f"actor has {len(actor)} frames, fewer than the window length {T}")
    generator.requires_grad_(mode == "full")
    disc = None
    if cfg.use_gan and mode == "full":
        disc = copy.deepcopy(prior_disc) if prior_disc is not None else Discriminator(rcfg)
    textures = {actor.identity_id: texture}
    datasets = {actor.identity_id: actor}
    generic = []
    if mixed_pool:
        if not prior_textures:
            raise ConfigurationError("mixed training needs the prior's textures for the generic pool")
        for ident, d in mixed_pool.items():
            tex = copy.deepcopy(prior_textures[ident])
            tex.requires_grad_(False)
            textures[ident] = tex
            datasets[ident] = d
            generic += window_refs(d, T)
    specific = window_refs(actor, T)
    sampler = mixed_batch_sampler(specific, generic, cfg.batch_size, cfg.seed) if mixed_pool else \
        uniform_sampler(specific, cfg.batch_size, cfg.seed)
    params = [{"params": [texture.data], "lr": cfg.lr_texture}]
    if mode == "full":
        params.append({"params": list(generator.parameters()), "lr": cfg.lr_renderer})
    opt_g = _optimizer(params, cfg)
    opt_d = _optimizer([{"params": list(disc.parameters()), "lr": cfg.lr_disc}], cfg) if disc else None
    backend = make_feature_backend(cfg.feature_backend) if cfg.weights.vgg > 0 else None
    val = fixed_windows(val_data, T, R, cfg.val_windows, ref_pool=actor) if val_data is not None else []
    metrics = MetricLog(log_path)
    halted = False
    step_cfg = cfg if mode == "full" else TrainConfig(**{**cfg.__dict__, "use_gan": False})
    for it in range(1, cfg.iterations + 1):
        windows = _to_batch(next(sampler), datasets, T, R, rng)
        rec = _step(generator, disc, textures, windows, step_cfg, backend, opt_g, opt_d)
        if rec is None:
            log.error("non-finite loss at iteration %d; halting adaptation", it)
            halted = True
            break
        rec["iteration"] = it
        if val and (it % cfg.val_every == 0 or it == cfg.iterations):
            rec["val_l1"], rec["val_psnr"] = evaluate_windows(generator, textures, val, cfg.use_audio)
        metrics.append(rec)
    delta = state = None
    if mode == "full" and prior is not None:
        ref = prior.state_dict()
        delta = {k: (v.detach() - ref[k]).clone() for k, v in generator.state_dict().items()}
    elif mode == "full":
        state = {k: v.detach().clone() for k, v in generator.state_dict().items()}
    texture.requires_grad_(False)
    generator.requires_grad_(False)
    record = IdentityRecord(actor.identity_id, texture, mode, delta, crop=actor.crop,
                            meta={"train": cfg.to_dict(), "from_prior": prior is not None,
                                  "renderer": rcfg.to_dict()}, renderer_state=state)
    return AdaptResult(record, generator, metrics.records, halted)


def train_from_scratch(actor: IdentityData, renderer_cfg: RendererConfig, cfg: TrainConfig = TrainConfig(),
                       val_data: IdentityData | None = None, log_path=None) -> AdaptResult:
    """Baseline: renderer and texture both randomly initialised."""
    return adapt_identity(None, actor, "full", cfg, renderer_cfg=renderer_cfg, val_data=val_data, log_path=log_path)
