"""Background clean-up of generated crops and paste-back into the source video."""
from __future__ import annotations

import warnings
from typing import Protocol

import numpy as np
from scipy import ndimage

from .preprocessing import CropSpec, uncrop


class Segmenter(Protocol):
    def __call__(self, frame: np.ndarray) -> np.ndarray:
        """Foreground (face and neck) mask with the frame's height and width."""


class CoverageSegmenter:
    """Test double: thresholds a known render coverage instead of looking at pixels."""

    def __init__(self, coverage, threshold: float = 0.5):
        self.coverage = np.asarray(coverage, dtype=np.float64)
        self.threshold = threshold

    def __call__(self, frame):
        frame = np.asarray(frame)
        if frame.shape[:2] != self.coverage.shape:
            raise ValueError(f"coverage {self.coverage.shape} does not match frame {frame.shape[:2]}")
        return self.coverage >= self.threshold


class BackgroundDifferenceSegmenter:
    """Foreground where the frame departs from a known clean background plate."""

    def __init__(self, background, tol: float = 2.0 / 255):
        self.background = np.asarray(background, dtype=np.float64)
        self.tol = tol

    def __call__(self, frame):
        diff = np.abs(np.asarray(frame, dtype=np.float64) - self.background)
        return (diff.max(axis=-1) if diff.ndim == 3 else diff) > self.tol


def segment_foreground(frame, segmenter: Segmenter) -> np.ndarray | None:
    """Boolean face mask, or None (with a warning) when the segmenter fails."""
    frame = np.asarray(frame)
    try:
        mask = np.asarray(segmenter(frame))
    except Exception as exc:
        warnings.warn(f"segmentation failed ({exc}); background left as generated", RuntimeWarning, stacklevel=2)
        return None
    if mask.shape != frame.shape[:2]:
        warnings.warn(f"segmenter returned shape {mask.shape} for a {frame.shape[:2]} frame; "
                      "background left as generated", RuntimeWarning, stacklevel=2)
        return None
    if mask.dtype != bool:
        mask = mask >= 0.5
    return mask


def agreed_background(gen_mask, real_mask, erode: bool = False) -> np.ndarray:
    bg = ~np.asarray(gen_mask, dtype=bool) & ~np.asarray(real_mask, dtype=bool)
    if erode:
        bg = ndimage.binary_erosion(bg, structure=np.ones((3, 3), bool), border_value=1)
    return bg


def composite_background(generated, real, gen_mask, real_mask, erode: bool = False) -> np.ndarray:
    """Real pixels where both masks say background, generated pixels elsewhere.

    ``erode`` shrinks the agreed background by one pixel, keeping generated
    content along uncertain mask borders.
    """
    generated, real = np.asarray(generated), np.asarray(real)
    if generated.shape != real.shape:
        raise ValueError(f"shape mismatch {generated.shape} vs {real.shape}")
    bg = agreed_background(gen_mask, real_mask, erode)
    if bg.shape != generated.shape[:2]:
        raise ValueError(f"mask shape {bg.shape} does not match frames {generated.shape[:2]}")
    sel = bg[..., None] if generated.ndim == 3 else bg
    return np.where(sel, real, generated)


def clean_frame(generated, real, gen_segmenter: Segmenter, real_segmenter: Segmenter, erode: bool = False):
    """Segment both frames and composite; falls back to ``generated`` if either
    segmentation fails."""
    gm = segment_foreground(generated, gen_segmenter)
    rm = segment_foreground(real, real_segmenter) if gm is not None else None
    if gm is None or rm is None:
        return np.array(generated, copy=True)
    return composite_background(generated, real, gm, rm, erode)


def paste_back(crop_result, source_frames, spec: CropSpec) -> np.ndarray:
    """Resample crops into their box on the source frames.

    Only source pixels inside the box (and the frame) change.
    """
    src = np.asarray(source_frames)
    res = np.asarray(crop_result)
    single = src.ndim == 3 and res.ndim == 3 and res.shape[-1] == src.shape[-1]
    if single:
        src, res = src[None], res[None]
    if src.shape[1:3] != tuple(spec.source_size):
        raise ValueError(f"source frames {src.shape[1:3]} do not match crop spec {spec.source_size}")
    if len(src) != len(res):
        raise ValueError(f"{len(res)} crops for {len(src)} source frames")
    back, inside = uncrop(res, spec)
    out = src.astype(np.float64, copy=True)
    out[:, inside] = back[:, inside]
    out = out.astype(src.dtype) if src.dtype.kind == "f" else out
    return out[0] if single else out
