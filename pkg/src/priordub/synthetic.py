"""Procedural identities, speech-like audio and rendered clips.

These stand in for real footage everywhere a test or demo needs video with
known ground truth.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .audio import FPS, SAMPLE_RATE, frame_rms
from .face_model import Camera, FaceModelAssets, FaceParams, render


@dataclass
class SyntheticIdentity:
    identity_id: str
    shape: np.ndarray
    texture: np.ndarray
    albedo_texture: np.ndarray  # Ht x Wt x 3 in UV space
    background: np.ndarray  # 3 colour stops for a vertical gradient
    lighting: np.ndarray
    jaw_gain: float
    jaw_offset: float
    expr_gain: float


@dataclass
class SyntheticClip:
    identity: SyntheticIdentity
    frames: np.ndarray  # N x H x W x 3 float32 in [0, 1]
    params: list  # FaceParams per frame
    coverage: np.ndarray  # N x H x W bool
    audio: np.ndarray
    sample_rate: int = SAMPLE_RATE
    fps: int = FPS

    def __len__(self):
        return len(self.frames)


def _albedo_texture(rng, size: int, mouth_v: float = 0.70) -> np.ndarray:
    vv, uu = np.meshgrid((np.arange(size) + 0.5) / size, (np.arange(size) + 0.5) / size, indexing="ij")
    hue = rng.uniform(0.0, 1.0)
    skin = np.array([0.55 + 0.3 * hue, 0.42 + 0.2 * hue, 0.35 + 0.15 * hue]) * rng.uniform(0.8, 1.1)
    tex = np.ones((size, size, 3)) * skin
    # identity-specific blotches
    for _ in range(6):
        cu, cv = rng.uniform(0.15, 0.85, 2)
        r = rng.uniform(0.04, 0.12)
        col = rng.uniform(-0.25, 0.25, 3)
        blob = np.exp(-(((uu - cu) ** 2 + (vv - cv) ** 2) / r ** 2))
        tex += blob[..., None] * col
    freq = rng.uniform(6, 14)
    tex += 0.05 * np.sin(freq * 2 * np.pi * (uu + 0.3 * vv))[..., None]
    # eyes and brows
    for eu in (0.36, 0.64):
        eye = np.exp(-(((uu - eu) / 0.06) ** 2 + ((vv - 0.40) / 0.025) ** 2))
        tex = tex * (1 - eye[..., None]) + eye[..., None] * np.array([0.1, 0.08, 0.08])
        brow = np.exp(-(((uu - eu) / 0.08) ** 2 + ((vv - 0.33) / 0.012) ** 2))
        tex = tex * (1 - 0.8 * brow[..., None]) + 0.8 * brow[..., None] * skin * 0.3
    # lips with a dark mouth slit and teeth that appear when the jaw stretches it
    lip_col = np.array([0.75, 0.25, 0.3]) * rng.uniform(0.7, 1.1)
    lips = np.exp(-(((uu - 0.5) / 0.15) ** 2 + ((vv - mouth_v) / 0.035) ** 2))
    tex = tex * (1 - lips[..., None]) + lips[..., None] * lip_col
    slit = np.exp(-(((uu - 0.5) / 0.12) ** 2 + ((vv - mouth_v) / 0.008) ** 2))
    teeth = np.exp(-(((uu - 0.5) / 0.07) ** 2 + ((vv - mouth_v + 0.004) / 0.004) ** 2))
    tex = tex * (1 - slit[..., None]) + slit[..., None] * np.array([0.15, 0.05, 0.05])
    tex = tex * (1 - teeth[..., None]) + teeth[..., None] * np.array([0.95, 0.93, 0.85])
    return np.clip(tex, 0.0, 1.0).astype(np.float32)


def make_identity(assets: FaceModelAssets, seed: int, texture_size: int = 64,
                  identity_id: str | None = None) -> SyntheticIdentity:
    rng = np.random.default_rng(10_000 + seed)
    lighting = np.zeros(9)
    lighting[0] = rng.uniform(3.0, 3.8)
    lighting[1:4] = rng.normal(scale=0.35, size=3)
    lighting[4:] = rng.normal(scale=0.1, size=5)
    return SyntheticIdentity(
        identity_id=identity_id or f"synth{seed:03d}",
        shape=rng.normal(scale=1.0, size=assets.n_shape),
        texture=rng.normal(scale=1.0, size=assets.n_texture),
        albedo_texture=_albedo_texture(rng, texture_size),
        background=rng.uniform(0.1, 0.9, size=(3, 3)),
        lighting=lighting,
        jaw_gain=float(rng.uniform(0.8, 1.6)),
        jaw_offset=float(rng.uniform(0.0, 0.05)),
        expr_gain=float(rng.uniform(-1.5, 1.5)),
    )


def speech_like_audio(duration: float, seed: int = 0, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Harmonic carrier under a syllable-rate envelope with pauses."""
    rng = np.random.default_rng(seed)
    n = int(round(duration * sr))
    t = np.arange(n) / sr
    f0 = rng.uniform(100, 220) * (1 + 0.05 * np.sin(2 * np.pi * 0.7 * t))
    phase = 2 * np.pi * np.cumsum(f0) / sr
    carrier = sum(np.sin(k * phase) / k for k in range(1, 6))
    syll = rng.uniform(3.0, 5.0)
    env = np.clip(np.sin(2 * np.pi * syll * t + rng.uniform(0, 2 * np.pi)), 0, None) ** 1.5
    pauses = np.sin(2 * np.pi * 0.4 * t + rng.uniform(0, 2 * np.pi)) > -0.8
    audio = 0.5 * env * pauses * carrier / 2.3
    return audio.astype(np.float32)


def background_image(identity: SyntheticIdentity, height: int, width: int) -> np.ndarray:
    s = np.linspace(0, 1, height)[:, None, None]
    stops = identity.background
    img = np.where(s < 0.5, stops[0] * (1 - 2 * s) + stops[1] * 2 * s,
                   stops[1] * (2 - 2 * s) + stops[2] * (2 * s - 1))
    return np.broadcast_to(img, (height, width, 3)).astype(np.float32)


def animation_from_audio(identity: SyntheticIdentity, audio: np.ndarray, sr: int, n_frames: int,
                         n_expression: int, jaw_range=(0.0, 0.5), seed: int = 0):
    """Per-frame ``(expression, jaw)`` driven by the audio envelope and the
    identity's speaking style."""
    rng = np.random.default_rng(seed)
    rms = frame_rms(audio, sr, n_frames)
    env = np.clip(rms / 0.15, 0.0, 1.0)
    jaw = np.clip(identity.jaw_gain * 0.3 * env + identity.jaw_offset, *jaw_range)
    expr = np.zeros((n_frames, n_expression))
    if n_expression:
        expr[:, 0] = identity.expr_gain * env
    t = np.arange(n_frames) / FPS
    for k in range(1, n_expression):
        expr[:, k] = 0.3 * np.sin(2 * np.pi * rng.uniform(0.1, 0.5) * t + rng.uniform(0, 2 * np.pi))
    return expr, jaw[:, None]


def make_clip(assets: FaceModelAssets, identity: SyntheticIdentity, n_frames: int, resolution: int = 64,
              seed: int = 0, audio: np.ndarray | None = None, camera: Camera | None = None,
              head_motion: float = 0.05, use_uv_texture: bool = True, quantize: bool = True,
              dtype=torch.float64) -> SyntheticClip:
    """Render a talking-head clip whose mouth follows ``audio``.

    Frames are rounded to 8-bit levels unless ``quantize`` is off, like
    decoded video.
    """
    if audio is None:
        audio = speech_like_audio(n_frames / FPS, seed=seed)
    camera = camera if camera is not None else Camera.default(resolution, dtype=dtype)
    expr, jaw = animation_from_audio(identity, audio, SAMPLE_RATE, n_frames, assets.n_expression,
                                     assets.jaw_range, seed)
    rng = np.random.default_rng(seed + 1)
    t = np.arange(n_frames) / FPS
    freqs = rng.uniform(0.1, 0.4, 3)
    phases = rng.uniform(0, 2 * np.pi, 3)
    bg = background_image(identity, resolution, resolution)
    base = FaceParams.neutral(assets, camera=camera, dtype=dtype)
    base = base.replace(shape=torch.tensor(identity.shape, dtype=dtype),
                        texture=torch.tensor(identity.texture, dtype=dtype),
                        lighting=torch.tensor(identity.lighting, dtype=dtype))
    frames, params, cov = [], [], []
    for i in range(n_frames):
        rot = head_motion * np.sin(2 * np.pi * freqs * t[i] + phases)
        p = base.replace(
            expression=torch.tensor(expr[i], dtype=dtype),
            jaw=torch.tensor(jaw[i], dtype=dtype),
            global_rotation=torch.tensor(rot, dtype=dtype),
            global_translation=torch.tensor([0.5 * rot[1], 0.5 * rot[0], 0.0], dtype=dtype),
        )
        with torch.no_grad():
            img, ras = render(p, assets, resolution,
                              albedo_texture=identity.albedo_texture if use_uv_texture else None,
                              background=bg)
        img = img.clamp(0, 1).numpy()
        if quantize:
            img = np.round(img * 255.0) / 255.0
        frames.append(img.astype(np.float32))
        params.append(p)
        cov.append(ras.coverage.numpy())
    return SyntheticClip(identity, np.stack(frames), params, np.stack(cov), audio)
