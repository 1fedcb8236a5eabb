"""Jaw-independent face crops, region masks and loss weight maps.

The crop box is computed once per video from the union of the tracked mesh
with the jaw forced shut and forced fully open, so it neither jitters from
frame to frame nor leaks information about the mouth.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .face_model import (
    LABEL_LOWER, LABEL_MOUTH, LABEL_OTHER, Camera, ConfigurationError, FaceModelAssets, FaceParams,
    compute_vertices, project, rasterize,
)

W_MOUTH, W_LOWER, W_BG = 10.0, 8.0, 1.0


class CropError(RuntimeError):
    pass


@dataclass(frozen=True)
class CropSpec:
    """Per-video square crop.

    ``box`` is ``(x0, y0, x1, y1)`` in continuous source pixels (pixel ``j``
    spans ``[j, j + 1)``); ``raw_box`` is the tight jaw-sweep box before the
    margin and squaring.
    """

    box: tuple
    raw_box: tuple
    margin: float
    resolution: int
    source_size: tuple  # (height, width)

    @property
    def side(self) -> float:
        return self.box[2] - self.box[0]

    def camera(self, camera: Camera) -> Camera:
        """Camera whose image is the crop."""
        return camera.cropped(self.box, self.resolution)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d) -> "CropSpec":
        return cls(tuple(d["box"]), tuple(d["raw_box"]), float(d["margin"]), int(d["resolution"]),
                   tuple(d["source_size"]))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "CropSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class RegionMasks:
    mouth: np.ndarray  # (N x) H x W bool
    lower: np.ndarray
    coverage: np.ndarray

    def __getitem__(self, idx) -> "RegionMasks":
        return RegionMasks(self.mouth[idx], self.lower[idx], self.coverage[idx])

    def __len__(self):
        return len(self.mouth)


def _frames_of(sequence):
    return list(sequence.frames) if hasattr(sequence, "frames") else list(sequence)


def jaw_extreme_points(params: FaceParams, assets: FaceModelAssets, camera: Camera | None = None):
    """Projected mesh vertices with the jaw fully closed and fully open."""
    camera = camera or params.camera
    used = np.unique(np.asarray(assets.faces))
    lo, hi = assets.jaw_range
    out = []
    with torch.no_grad():
        for j in (lo, hi):
            p = params.replace(jaw=torch.full_like(params.jaw, j), camera=camera)
            verts = compute_vertices(p, assets).vertices[used]
            px, valid = project(verts, camera)
            out.append(px[valid].numpy())
    return np.concatenate(out)


def square_box(raw, margin: float, height: int, width: int) -> tuple:
    """Grow ``raw`` by ``margin * max(w, h)`` per side, square it about its
    centre, then shift (and if needed shrink) it into the image."""
    x0, y0, x1, y1 = raw
    m = margin * max(x1 - x0, y1 - y0)
    x0, y0, x1, y1 = x0 - m, y0 - m, x1 + m, y1 + m
    side = min(max(x1 - x0, y1 - y0), float(width), float(height))
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    bx = float(np.clip(cx - side / 2, 0.0, width - side))
    by = float(np.clip(cy - side / 2, 0.0, height - side))
    return (bx, by, bx + side, by + side)


def jaw_sweep_bbox(sequence, assets: FaceModelAssets, source_size, camera: Camera | None = None,
                   margin: float = 0.1, resolution: int = 256) -> CropSpec:
    """One crop for the whole video from the jaw-closed/jaw-open union over
    every frame.  ``source_size`` is ``(height, width)``."""
    frames = _frames_of(sequence)
    if not frames:
        raise CropError("empty tracked sequence")
    pts = [jaw_extreme_points(p, assets, camera) for p in frames]
    pts = np.concatenate(pts)
    if len(pts) == 0:
        raise CropError("no mesh vertices in front of the camera")
    raw = (float(pts[:, 0].min()), float(pts[:, 1].min()), float(pts[:, 0].max()), float(pts[:, 1].max()))
    h, w = source_size
    return CropSpec(square_box(raw, margin, h, w), raw, margin, resolution, (int(h), int(w)))


def _sampling_grid(box, resolution: int, height: int, width: int) -> torch.Tensor:
    x0, y0, x1, y1 = box
    t = (torch.arange(resolution, dtype=torch.float64) + 0.5) / resolution
    xs = x0 + t * (x1 - x0)
    ys = y0 + t * (y1 - y0)
    # grid_sample with align_corners=False maps -1/+1 to the outer pixel edges
    gx = 2.0 * xs / width - 1.0
    gy = 2.0 * ys / height - 1.0
    gy, gx = torch.meshgrid(gy, gx, indexing="ij")
    return torch.stack([gx, gy], dim=-1)[None]


def crop_frames(frames: np.ndarray, spec: CropSpec, mode: str = "bilinear") -> np.ndarray:
    """Resample ``frames`` (``N x H x W x C`` or ``N x H x W``) inside the crop box."""
    frames = np.asarray(frames)
    x0, y0, x1, y1 = spec.box
    if not (x1 - x0 > 0 and y1 - y0 > 0):
        raise CropError(f"degenerate crop box {spec.box}")
    squeeze = frames.ndim == 3
    arr = frames[..., None] if squeeze else frames
    n, h, w, c = arr.shape
    grid = _sampling_grid(spec.box, spec.resolution, h, w).expand(n, -1, -1, -1)
    src = torch.as_tensor(arr, dtype=torch.float64).permute(0, 3, 1, 2)
    out = F.grid_sample(src, grid, mode=mode, padding_mode="border", align_corners=False)
    out = out.permute(0, 2, 3, 1).numpy()
    out = out[..., 0] if squeeze else out
    return out.astype(frames.dtype) if frames.dtype.kind == "f" else out


def label_lookup(uv: torch.Tensor, labels: np.ndarray) -> np.ndarray:
    """Nearest-texel label at each UV (texel ``(i, j)`` covers
    ``[j, j + 1) / W x [i, i + 1) / H``)."""
    labels = np.asarray(labels)
    th, tw = labels.shape
    u = uv[..., 0].detach().numpy()
    v = uv[..., 1].detach().numpy()
    col = np.clip(np.floor(u * tw).astype(np.int64), 0, tw - 1)
    row = np.clip(np.floor(v * th).astype(np.int64), 0, th - 1)
    return labels[row, col]


def rasterize_region_masks(params: FaceParams, assets: FaceModelAssets, resolution, camera: Camera | None = None,
                           mask_texture=None) -> RegionMasks:
    """Mouth / lower-face / coverage masks for one frame.

    The lower-face mask includes the mouth label, so the masks nest by
    construction.
    """
    labels = mask_texture if mask_texture is not None else assets.region_labels
    if labels is None:
        raise ConfigurationError("assets carry no region label texture")
    camera = camera or params.camera
    with torch.no_grad():
        ras = rasterize(compute_vertices(params.replace(camera=camera), assets), camera, None, resolution)
    lab = label_lookup(ras.uv, labels)
    cov = ras.coverage.numpy()
    lab = np.where(cov, lab, LABEL_OTHER)
    return RegionMasks(lab == LABEL_MOUTH, (lab == LABEL_MOUTH) | (lab == LABEL_LOWER), cov)


def sequence_masks(sequence, assets: FaceModelAssets, spec: CropSpec, camera: Camera | None = None,
                   mask_texture=None) -> RegionMasks:
    """Per-frame masks at crop resolution."""
    out = []
    for p in _frames_of(sequence):
        cam = spec.camera(camera or p.camera)
        out.append(rasterize_region_masks(p, assets, spec.resolution, cam, mask_texture))
    return RegionMasks(np.stack([m.mouth for m in out]), np.stack([m.lower for m in out]),
                       np.stack([m.coverage for m in out]))


def build_region_weights(masks: RegionMasks, w_mouth: float = W_MOUTH, w_lower: float = W_LOWER,
                         w_bg: float = W_BG) -> np.ndarray:
    """Per-pixel loss weights; the mouth wins over the lower face."""
    out = np.where(masks.lower, w_lower, w_bg)
    return np.where(masks.mouth, w_mouth, out).astype(np.float32)


def uncrop(images: np.ndarray, spec: CropSpec, mode: str = "bilinear") -> tuple[np.ndarray, np.ndarray]:
    """Map crop-resolution images back onto the source frame.

    Returns ``(images, inside)`` where ``inside`` marks source pixels whose
    centres fall within the crop box.
    """
    images = np.asarray(images)
    squeeze = images.ndim == 3
    arr = images[..., None] if squeeze else images
    n, r, _, c = arr.shape
    h, w = spec.source_size
    x0, y0, x1, y1 = spec.box
    xs = (np.arange(w) + 0.5 - x0) / (x1 - x0)
    ys = (np.arange(h) + 0.5 - y0) / (y1 - y0)
    inside = ((ys >= 0) & (ys <= 1))[:, None] & ((xs >= 0) & (xs <= 1))[None, :]
    gx = torch.as_tensor(2.0 * xs - 1.0)
    gy = torch.as_tensor(2.0 * ys - 1.0)
    gy, gx = torch.meshgrid(gy, gx, indexing="ij")
    grid = torch.stack([gx, gy], dim=-1)[None].expand(n, -1, -1, -1)
    src = torch.as_tensor(arr, dtype=torch.float64).permute(0, 3, 1, 2)
    out = F.grid_sample(src, grid, mode=mode, padding_mode="border", align_corners=False)
    out = out.permute(0, 2, 3, 1).numpy()
    return (out[..., 0] if squeeze else out), inside
