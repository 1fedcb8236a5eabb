"""Neural textures and the windowed deferred renderer.

A window of ``T`` consecutive crops is turned into one channel stack: each
frame contributes its target crop with the mouth blanked out followed by the
neural-texture features rasterised into that hole, and ``R`` reference crops
of the same actor are appended.  Channel order::

    [rgb_0, feat_0, rgb_1, feat_1, ..., rgb_{T-1}, feat_{T-1}, ref_0, ..., ref_{R-1}]

with ``rgb`` 3 channels, ``feat`` C channels and ``ref`` 3 channels each.
The generator is a style-modulated convolutional U-Net whose styles come from
a per-window audio embedding; it predicts all ``T`` frames at once.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .face_model import ConfigurationError

CHECKPOINT_FORMAT = "priordub.renderer/1"
TEXTURE_FORMAT = "priordub.texture/1"


@dataclass(frozen=True)
class RendererConfig:
    window: int = 5  # T
    n_refs: int = 1  # R
    channels: int = 16  # C, neural-texture depth
    texture_size: int = 256
    resolution: int = 256
    widths: tuple = (32, 64, 128, 256, 256)
    disc_widths: tuple = (32, 64, 128, 256)
    audio_dim: int = 16
    style_dim: int = 64
    mode: str = "stacked"  # or "shared": one set of weights applied per frame

    def __post_init__(self):
        if self.window < 1 or self.n_refs < 0:
            raise ConfigurationError("window must be >= 1 and n_refs >= 0")
        if self.channels < 3:
            raise ConfigurationError("neural textures need at least 3 channels")
        if self.mode not in ("stacked", "shared"):
            raise ConfigurationError(f"unknown generator mode {self.mode!r}")
        if self.resolution % (2 ** (len(self.widths) - 1)):
            raise ConfigurationError("resolution must be divisible by 2**(len(widths) - 1)")

    @property
    def frame_channels(self) -> int:
        return 3 + self.channels

    @property
    def in_channels(self) -> int:
        return self.window * self.frame_channels + 3 * self.n_refs

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"], d["disc_widths"] = list(self.widths), list(self.disc_widths)
        return d

    @classmethod
    def from_dict(cls, d) -> "RendererConfig":
        d = dict(d)
        d["widths"], d["disc_widths"] = tuple(d["widths"]), tuple(d["disc_widths"])
        return cls(**d)


PRESETS = {
    "default": RendererConfig(),
    # under 2M generator parameters; runs at 64x64 on a laptop CPU
    "reduced": RendererConfig(resolution=64, texture_size=128, widths=(32, 64, 96, 128),
                              disc_widths=(32, 64, 96), style_dim=32),
    "tiny": RendererConfig(window=3, channels=8, resolution=32, texture_size=64, widths=(16, 32, 48),
                           disc_widths=(16, 32), style_dim=16),
}


def preset(name: str, **overrides) -> RendererConfig:
    try:
        return replace(PRESETS[name], **overrides)
    except KeyError:
        raise ConfigurationError(f"unknown renderer preset {name!r}; choose from {sorted(PRESETS)}") from None


# ---------------------------------------------------------------------------
# Neural texture
# ---------------------------------------------------------------------------


class NeuralTexture(nn.Module):
    """Learnable ``Ht x Wt x C`` feature grid; channels 0-2 are tied to RGB."""

    def __init__(self, size: int = 256, channels: int = 16, identity_id: str = "", seed: int = 0,
                 init_scale: float = 0.05):
        super().__init__()
        if channels < 3:
            raise ConfigurationError("neural textures need at least 3 channels")
        g = torch.Generator().manual_seed(seed)
        data = (torch.rand(size, size, channels, generator=g) * 2 - 1) * init_scale
        self.data = nn.Parameter(data)
        self.identity_id = identity_id

    @property
    def channels(self) -> int:
        return self.data.shape[-1]

    @property
    def size(self) -> int:
        return self.data.shape[0]

    def forward(self, uv, coverage):
        return sample_texture(self.data, uv, coverage)

    def save(self, path):
        torch.save({"format": TEXTURE_FORMAT, "identity_id": self.identity_id,
                    "data": self.data.detach().cpu()}, path)

    @classmethod
    def load(cls, path) -> "NeuralTexture":
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"texture file not found: {path}")
        blob = torch.load(path, weights_only=True)
        if blob.get("format") != TEXTURE_FORMAT:
            raise ConfigurationError(f"{path} is not a neural texture file")
        tex = cls(blob["data"].shape[0], blob["data"].shape[-1], blob["identity_id"])
        with torch.no_grad():
            tex.data.copy_(blob["data"])
        if not torch.isfinite(tex.data).all():
            raise ConfigurationError(f"{path} holds non-finite texels")
        return tex


def sample_texture(texture: torch.Tensor, uv, coverage) -> torch.Tensor:
    """Bilinear texture lookup at ``uv`` (``... x H x W x 2``).

    Texel ``(i, j)`` is centred at ``((j + 0.5) / Wt, (i + 0.5) / Ht)``; lookups
    past the outer texel centres clamp to the edge.  Uncovered pixels are
    zero.  Returns ``... x H x W x C``.
    """
    uv = torch.as_tensor(uv, dtype=texture.dtype)
    cov = torch.as_tensor(coverage, dtype=torch.bool)
    lead = uv.shape[:-3]
    h, w = uv.shape[-3:-1]
    grid = (uv.reshape(-1, h, w, 2) * 2.0 - 1.0)
    tex = texture.permute(2, 0, 1)[None].expand(grid.shape[0], -1, -1, -1)
    out = F.grid_sample(tex, grid, mode="bilinear", padding_mode="border", align_corners=False)
    out = out.permute(0, 2, 3, 1).reshape(*lead, h, w, texture.shape[-1])
    return out * cov[..., None].to(out.dtype)


# ---------------------------------------------------------------------------
# Windows and input composition
# ---------------------------------------------------------------------------


@dataclass
class FrameWindow:
    """``T`` consecutive crops of one identity plus references.

    Images are float arrays in ``[0, 1]`` at crop resolution.
    """

    targets: np.ndarray  # T x H x W x 3
    uv: np.ndarray  # T x H x W x 2
    coverage: np.ndarray  # T x H x W bool
    mouth: np.ndarray  # T x H x W bool
    weights: np.ndarray  # T x H x W
    references: np.ndarray  # R x H x W x 3
    audio: np.ndarray  # T x A
    indices: np.ndarray  # T
    identity_id: str = ""
    ref_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        T, H, W = self.targets.shape[:3]
        for name, shape in (("uv", (T, H, W, 2)), ("coverage", (T, H, W)), ("mouth", (T, H, W)),
                            ("weights", (T, H, W))):
            if tuple(np.shape(getattr(self, name))) != shape:
                raise ConfigurationError(f"window {name} has shape {np.shape(getattr(self, name))}, expected {shape}")
        if self.references.ndim != 4 or self.references.shape[1:] != (H, W, 3):
            raise ConfigurationError("references must be R x H x W x 3 at crop resolution")
        if len(self.audio) != T or len(self.indices) != T:
            raise ConfigurationError("audio and indices need one entry per window frame")
        if np.intersect1d(self.ref_indices, self.indices).size:
            raise ConfigurationError("reference frames must come from outside the window")

    @property
    def length(self) -> int:
        return self.targets.shape[0]


def compose_input(targets, features, mouth, references) -> torch.Tensor:
    """Build the generator input stack for one window or a batch of windows.

    ``targets`` ``[B x] T x H x W x 3``, ``features`` ``[B x] T x H x W x C``,
    ``mouth`` ``[B x] T x H x W``, ``references`` ``[B x] R x H x W x 3``.
    Returns ``[B x] (T*(3+C) + 3R) x H x W``.
    """
    targets = torch.as_tensor(targets)
    dtype = features.dtype if isinstance(features, torch.Tensor) else targets.dtype
    targets = targets.to(dtype)
    features = torch.as_tensor(features, dtype=dtype)
    mouth = torch.as_tensor(mouth).to(dtype)
    references = torch.as_tensor(references, dtype=dtype)
    single = targets.dim() == 4
    if single:
        targets, features, mouth, references = targets[None], features[None], mouth[None], references[None]
    B, T, H, W, _ = targets.shape
    if features.shape[:4] != (B, T, H, W) or mouth.shape != (B, T, H, W):
        raise ConfigurationError(f"features {tuple(features.shape)} / mouth {tuple(mouth.shape)} "
                                 f"do not match targets {tuple(targets.shape)}")
    if references.dim() != 5 or references.shape[0] != B or references.shape[2:] != (H, W, 3):
        raise ConfigurationError(f"references {tuple(references.shape)} do not match targets")
    m = mouth[..., None]
    per_frame = torch.cat([targets * (1 - m), features * m], dim=-1)  # B T H W (3+C)
    stack = per_frame.permute(0, 1, 4, 2, 3).reshape(B, -1, H, W)
    refs = references.permute(0, 1, 4, 2, 3).reshape(B, -1, H, W)
    out = torch.cat([stack, refs], dim=1)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------


class ModulatedConv(nn.Module):
    """3x3 convolution whose input channels are scaled by a style vector,
    followed by weight demodulation."""

    def __init__(self, cin: int, cout: int, style_dim: int, kernel: int = 3, demodulate: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(cout, cin, kernel, kernel) / math.sqrt(cin * kernel * kernel))
        self.bias = nn.Parameter(torch.zeros(cout))
        self.affine = nn.Linear(style_dim, cin)
        nn.init.zeros_(self.affine.weight)
        nn.init.ones_(self.affine.bias)
        self.demodulate = demodulate
        self.pad = kernel // 2

    def forward(self, x, style):
        B, cin, H, W = x.shape
        s = self.affine(style)  # B x cin
        w = self.weight[None] * s[:, None, :, None, None]
        if self.demodulate:
            w = w * torch.rsqrt(w.pow(2).sum(dim=(2, 3, 4), keepdim=True) + 1e-8)
        cout = w.shape[1]
        out = F.conv2d(x.reshape(1, B * cin, H, W), w.reshape(B * cout, cin, *w.shape[3:]),
                       padding=self.pad, groups=B)
        return out.reshape(B, cout, H, W) + self.bias[None, :, None, None]


class AudioEncoder(nn.Module):
    """Maps per-frame audio features of a window to one style vector."""

    def __init__(self, n_in: int, style_dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(n_in, style_dim), nn.LeakyReLU(0.2),
                                 nn.Linear(style_dim, style_dim), nn.LeakyReLU(0.2))

    def forward(self, audio):
        return self.net(audio)


class Generator(nn.Module):
    """Style-modulated U-Net.

    ``mode="stacked"`` maps the whole window stack to ``3T`` channels.  In
    ``mode="shared"`` each frame's ``3 + C`` channels plus the references go
    through the same weights with that frame's audio, so permuting the
    window permutes the output.
    """

    def __init__(self, cfg: RendererConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.mode == "stacked":
            cin, cout, n_audio = cfg.in_channels, 3 * cfg.window, cfg.window * cfg.audio_dim
        else:
            cin, cout, n_audio = cfg.frame_channels + 3 * cfg.n_refs, 3, cfg.audio_dim
        S = cfg.style_dim
        self.audio = AudioEncoder(n_audio, S)
        ws = cfg.widths
        self.stem = nn.Conv2d(cin, ws[0], 3, padding=1)
        self.down = nn.ModuleList([nn.Conv2d(ws[i], ws[i + 1], 4, stride=2, padding=1) for i in range(len(ws) - 1)])
        self.mid = ModulatedConv(ws[-1], ws[-1], S)
        self.up = nn.ModuleList([ModulatedConv(ws[i + 1] + ws[i], ws[i], S) for i in reversed(range(len(ws) - 1))])
        self.refine = ModulatedConv(ws[0], ws[0], S)
        self.to_rgb = ModulatedConv(ws[0], cout, S, kernel=1, demodulate=False)

    def _run(self, x, style):
        act = lambda t: F.leaky_relu(t, 0.2)
        h = act(self.stem(x))
        skips = [h]
        for conv in self.down:
            h = act(conv(h))
            skips.append(h)
        h = act(self.mid(h, style))
        for conv, skip in zip(self.up, reversed(skips[:-1])):
            h = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
            h = act(conv(torch.cat([h, skip], dim=1), style))
        h = act(self.refine(h, style))
        return torch.tanh(self.to_rgb(h, style))

    def forward(self, stack: torch.Tensor, audio: torch.Tensor | None = None) -> torch.Tensor:
        """``stack`` ``B x in_channels x H x W``, ``audio`` ``B x T x A`` (None
        for silent mode).  Returns ``B x T x 3 x H x W`` in ``[-1, 1]``."""
        cfg = self.cfg
        B, cin, H, W = stack.shape
        if cin != cfg.in_channels:
            raise ConfigurationError(f"generator expects {cfg.in_channels} input channels, got {cin}")
        T = cfg.window
        if audio is None:
            audio = stack.new_zeros(B, T, cfg.audio_dim)
        audio = audio.to(stack.dtype)
        if tuple(audio.shape) != (B, T, cfg.audio_dim):
            raise ConfigurationError(f"audio must be {(B, T, cfg.audio_dim)}, got {tuple(audio.shape)}")
        if cfg.mode == "stacked":
            out = self._run(stack, self.audio(audio.reshape(B, -1)))
            return out.reshape(B, T, 3, H, W)
        fc = cfg.frame_channels
        frames = stack[:, :T * fc].reshape(B, T, fc, H, W)
        refs = stack[:, T * fc:][:, None].expand(-1, T, -1, -1, -1)
        x = torch.cat([frames, refs], dim=2).reshape(B * T, -1, H, W)
        out = self._run(x, self.audio(audio.reshape(B * T, -1)))
        return out.reshape(B, T, 3, H, W)


class Discriminator(nn.Module):
    """Patch discriminator over a whole window stacked along channels."""

    def __init__(self, cfg: RendererConfig):
        super().__init__()
        self.cfg = cfg
        layers, c = [], 3 * cfg.window
        for w in cfg.disc_widths:
            layers += [nn.Conv2d(c, w, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            c = w
        layers.append(nn.Conv2d(c, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """``frames`` ``B x T x 3 x H x W`` in ``[-1, 1]`` → ``B x 1 x h x w`` scores."""
        B, T = frames.shape[:2]
        if T != self.cfg.window or frames.shape[2] != 3:
            raise ConfigurationError(f"discriminator expects B x {self.cfg.window} x 3 x H x W")
        return self.net(frames.reshape(B, T * 3, *frames.shape[3:]))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def generate_window(generator: Generator, stack, audio=None) -> torch.Tensor:
    """Inference on one window: returns ``T x H x W x 3`` in ``[-1, 1]``."""
    stack = torch.as_tensor(stack, dtype=torch.float32)
    if stack.dim() != 3:
        raise ConfigurationError("generate_window takes a single C x H x W stack")
    a = None if audio is None else torch.as_tensor(audio, dtype=torch.float32)[None]
    with torch.no_grad():
        out = generator(stack[None], a)[0]
    return out.permute(0, 2, 3, 1)


def discriminate_window(discriminator: Discriminator, frames) -> torch.Tensor:
    """Scores for one window of ``T x H x W x 3`` frames in ``[-1, 1]``."""
    frames = torch.as_tensor(frames, dtype=torch.float32)
    return discriminator(frames.permute(0, 3, 1, 2)[None])[0]


def window_tensors(windows: list[FrameWindow], textures: dict, dtype=torch.float32):
    """Batch tensors for training: ``(stack, audio, targets, weights, sampled)``.

    ``targets`` are ``B x T x 3 x H x W`` in ``[-1, 1]``; ``sampled`` holds the
    raw texture lookups ``B x T x H x W x C`` used by the texture regulariser.
    """
    tg = torch.as_tensor(np.stack([w.targets for w in windows]), dtype=dtype)
    uv = torch.as_tensor(np.stack([w.uv for w in windows]), dtype=dtype)
    cov = torch.as_tensor(np.stack([w.coverage for w in windows]))
    mouth = torch.as_tensor(np.stack([w.mouth for w in windows]))
    refs = torch.as_tensor(np.stack([w.references for w in windows]), dtype=dtype)
    sampled = torch.stack([sample_texture(textures[w.identity_id].data, u, c)
                           for w, u, c in zip(windows, uv, cov)])
    stack = compose_input(tg, sampled, mouth, refs)
    audio = torch.as_tensor(np.stack([w.audio for w in windows]), dtype=dtype)
    weights = torch.as_tensor(np.stack([w.weights for w in windows]), dtype=dtype)
    return stack, audio, (tg * 2 - 1).permute(0, 1, 4, 2, 3), weights, sampled, cov


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_renderer(path, generator: Generator, discriminator: Discriminator | None = None, meta: dict | None = None):
    """Shared renderer only; textures live in their own files."""
    blob = {"format": CHECKPOINT_FORMAT, "config": generator.cfg.to_dict(),
            "generator": generator.state_dict(), "meta": json.dumps(meta or {})}
    if discriminator is not None:
        blob["discriminator"] = discriminator.state_dict()
    tmp = Path(str(path) + ".tmp")
    torch.save(blob, tmp)
    tmp.replace(path)


def load_renderer(path):
    """Returns ``(generator, discriminator_or_None, meta)``."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"renderer checkpoint not found: {path}")
    blob = torch.load(path, weights_only=True)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"{path} is not a renderer checkpoint")
    cfg = RendererConfig.from_dict(blob["config"])
    gen = Generator(cfg)
    gen.load_state_dict(blob["generator"])
    disc = None
    if "discriminator" in blob:
        disc = Discriminator(cfg)
        disc.load_state_dict(blob["discriminator"])
    return gen, disc, json.loads(blob["meta"])
