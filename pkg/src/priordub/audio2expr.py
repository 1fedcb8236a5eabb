"""Audio-driven expression prediction and per-actor style calibration.

A speech-animation backend turns audio into generic expression and jaw
parameters at the video frame rate.  Each actor then gets an independent
affine map per parameter, fitted in closed form against their tracked
performance, so the predicted motion takes on the actor's speaking style.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol

import numpy as np

from .audio import FPS, SAMPLE_RATE, frame_rms, n_video_frames, resample
from .face_model import ConfigurationError
from .reconstruction import TRACK_FORMAT, TrackedSequence

EXPRESSION_FORMAT = "priordub.expressions/1"
SOURCES = ("predicted", "tracked")


class BackendError(RuntimeError):
    """The speech-animation backend failed; dubbing cannot continue."""


@dataclass
class ExpressionTrack:
    expression: np.ndarray  # N x Ne
    jaw: np.ndarray  # N x J
    source: str = "predicted"
    fps: float = FPS
    calibrated: bool = False

    def __post_init__(self):
        self.expression = np.atleast_2d(np.asarray(self.expression, dtype=np.float64))
        self.jaw = np.asarray(self.jaw, dtype=np.float64).reshape(len(self.expression), -1)
        if self.source not in SOURCES:
            raise ConfigurationError(f"source must be one of {SOURCES}, got {self.source!r}")
        if not (np.isfinite(self.expression).all() and np.isfinite(self.jaw).all()):
            raise ConfigurationError("expression track holds non-finite values")

    def __len__(self):
        return len(self.expression)

    @property
    def n_expression(self) -> int:
        return self.expression.shape[1]

    def stacked(self) -> np.ndarray:
        """``N x (Ne + J)``: expression parameters followed by jaw."""
        return np.concatenate([self.expression, self.jaw], axis=1)

    @classmethod
    def from_stacked(cls, x, n_expression: int, **kw) -> "ExpressionTrack":
        x = np.asarray(x, dtype=np.float64)
        return cls(x[:, :n_expression], x[:, n_expression:], **kw)

    @classmethod
    def from_tracked(cls, seq: TrackedSequence) -> "ExpressionTrack":
        return cls(seq.expression_array(), seq.jaw_array(), "tracked")

    def check_compatible(self, n_frames: int | None = None, n_expression: int | None = None, n_jaw: int = 1):
        if abs(self.fps - FPS) > 1e-9:
            raise ConfigurationError(f"track is at {self.fps} fps, expected {FPS}")
        if n_frames is not None and len(self) != n_frames:
            raise ConfigurationError(f"track has {len(self)} frames, expected {n_frames}")
        if n_expression is not None and self.n_expression != n_expression:
            raise ConfigurationError(f"track has {self.n_expression} expression parameters, model has {n_expression}")
        if self.jaw.shape[1] != n_jaw:
            raise ConfigurationError(f"track has {self.jaw.shape[1]} jaw parameters, expected {n_jaw}")

    def save(self, path):
        """Line-delimited records with the same per-frame keys as tracked sequences."""
        header = {"format": EXPRESSION_FORMAT, "n_frames": len(self), "source": self.source, "fps": self.fps,
                  "calibrated": self.calibrated}
        with open(path, "w") as fh:
            fh.write(json.dumps(header) + "\n")
            for i in range(len(self)):
                fh.write(json.dumps({"frame": i, "expression": self.expression[i].tolist(),
                                     "jaw": self.jaw[i].tolist()}) + "\n")

    @classmethod
    def load(cls, path) -> "ExpressionTrack":
        """Reads either an expression track or a tracked-sequence file."""
        lines = Path(path).read_text().splitlines()
        if not lines:
            raise ConfigurationError(f"{path} is empty")
        header = json.loads(lines[0])
        fmt = header.get("format")
        if fmt not in (EXPRESSION_FORMAT, TRACK_FORMAT):
            raise ConfigurationError(f"{path} is neither an expression track nor a tracked sequence")
        recs = [json.loads(s) for s in lines[1:] if s.strip()]
        if len(recs) != header["n_frames"]:
            raise ConfigurationError(f"{path}: header says {header['n_frames']} frames, found {len(recs)}")
        expr = np.array([r["expression"] for r in recs], dtype=np.float64)
        jaw = np.array([r["jaw"] for r in recs], dtype=np.float64)
        if fmt == TRACK_FORMAT:
            return cls(expr, jaw, "tracked")
        return cls(expr, jaw, header["source"], header["fps"], header.get("calibrated", False))


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


class ExpressionBackend(Protocol):
    sample_rate: int
    n_expression: int

    def __call__(self, audio: np.ndarray, n_frames: int) -> tuple[np.ndarray, np.ndarray]:
        """``(N x Ne expression, N x 1 jaw)`` for audio at ``sample_rate``."""


@dataclass
class EnergyJawBackend:
    """Deterministic stand-in for a pretrained speech-animation model.

    Opens the jaw in proportion to per-frame loudness and drives the first
    expression parameter the same way; the rest stay neutral.  Silence maps
    to the all-zero track.
    """

    n_expression: int
    jaw_gain: float = 0.3
    reference_rms: float = 0.15
    jaw_range: tuple = (0.0, 0.5)
    sample_rate: int = SAMPLE_RATE

    def __call__(self, audio, n_frames):
        env = np.clip(frame_rms(audio, self.sample_rate, n_frames) / self.reference_rms, 0.0, 1.0)
        jaw = np.clip(self.jaw_gain * env, *self.jaw_range)[:, None]
        expr = np.zeros((n_frames, self.n_expression))
        if self.n_expression:
            expr[:, 0] = env
        return expr, jaw


def predict_expressions(audio, sr: int, backend: ExpressionBackend, n_frames: int | None = None) -> ExpressionTrack:
    """One parameter vector per 25 fps video frame of ``audio``."""
    audio = np.asarray(audio, dtype=np.float32)
    if audio.ndim != 1:
        raise ConfigurationError("audio must be mono")
    if n_frames is None:
        n_frames = n_video_frames(len(audio), sr)
    audio = resample(audio, sr, backend.sample_rate)
    try:
        expr, jaw = backend(audio, n_frames)
    except Exception as exc:
        raise BackendError(f"expression backend {type(backend).__name__} failed: {exc}") from exc
    expr, jaw = np.asarray(expr, dtype=np.float64), np.asarray(jaw, dtype=np.float64)
    if len(expr) != n_frames or len(jaw) != n_frames:
        raise BackendError(f"backend returned {len(expr)}/{len(jaw)} frames for {n_frames} video frames")
    if not (np.isfinite(expr).all() and np.isfinite(jaw).all()):
        raise BackendError("backend returned non-finite parameters")
    return ExpressionTrack(expr, jaw, "predicted")


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------


@dataclass
class StyleCalibration:
    """Per-parameter ``x -> gain * x + offset`` over ``[expression, jaw]``."""

    gain: np.ndarray
    offset: np.ndarray
    degenerate: np.ndarray = field(default=None)  # dims that took the constant-input fallback

    def __post_init__(self):
        self.gain = np.asarray(self.gain, dtype=np.float64).ravel()
        self.offset = np.asarray(self.offset, dtype=np.float64).ravel()
        if self.degenerate is None:
            self.degenerate = np.zeros(self.gain.shape, dtype=bool)
        self.degenerate = np.asarray(self.degenerate, dtype=bool).ravel()
        if not (self.gain.shape == self.offset.shape == self.degenerate.shape):
            raise ConfigurationError("gain, offset and flags must have one entry per parameter")
        if not (np.isfinite(self.gain).all() and np.isfinite(self.offset).all()):
            raise ConfigurationError("calibration coefficients must be finite")

    @property
    def dim(self) -> int:
        return self.gain.size

    @classmethod
    def identity(cls, dim: int) -> "StyleCalibration":
        return cls(np.ones(dim), np.zeros(dim))

    def to_dict(self) -> dict:
        return {"gain": self.gain.tolist(), "offset": self.offset.tolist(), "degenerate": self.degenerate.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "StyleCalibration":
        return cls(d["gain"], d["offset"], d.get("degenerate"))


def fit_calibration(predicted: ExpressionTrack, tracked: ExpressionTrack, var_tol: float = 1e-12) -> StyleCalibration:
    """Least-squares ``tracked_i ~ a_i * predicted_i + b_i`` for every parameter.

    A predicted dimension with (numerically) zero variance cannot determine a
    gain; it gets ``a = 1`` and the mean difference as offset, and is flagged.
    """
    p, t = predicted.stacked(), tracked.stacked()
    if p.shape != t.shape:
        raise ConfigurationError(f"track shapes differ: {p.shape} vs {t.shape}")
    if len(p) < 2:
        raise ConfigurationError("calibration needs at least two frames")
    pm, tm = p.mean(0), t.mean(0)
    dp = p - pm
    var = (dp ** 2).mean(0)
    cov = (dp * (t - tm)).mean(0)
    scale = np.maximum(1.0, np.abs(pm)) ** 2
    degenerate = var <= var_tol * scale
    gain = np.where(degenerate, 1.0, cov / np.where(degenerate, 1.0, var))
    offset = np.where(degenerate, (t - p).mean(0), tm - gain * pm)
    if degenerate.any():
        warnings.warn(f"constant predicted parameters {np.flatnonzero(degenerate).tolist()}: "
                      "using unit gain and mean offset", RuntimeWarning, stacklevel=2)
    return StyleCalibration(gain, offset, degenerate)


def apply_calibration(track: ExpressionTrack, calib: StyleCalibration) -> ExpressionTrack:
    x = track.stacked()
    if x.shape[1] != calib.dim:
        raise ConfigurationError(f"calibration covers {calib.dim} parameters, track has {x.shape[1]}")
    out = ExpressionTrack.from_stacked(x * calib.gain + calib.offset, track.n_expression, source=track.source,
                                       fps=track.fps)
    return replace(out, calibrated=True)
