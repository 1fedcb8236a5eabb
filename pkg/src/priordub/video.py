"""Video decoding, frame-rate conversion and encoding through OpenCV.

OpenCV handles the image stream.  Audio inside containers needs an ffmpeg
binary, found through ``PRIORDUB_FFMPEG`` or ``PATH``; without one, audio
travels as a separate WAV file.
"""
from __future__ import annotations

import os
import shutil
import subprocess
from pathlib import Path

import cv2
import numpy as np

from .audio import FPS

FFMPEG_ENV = "PRIORDUB_FFMPEG"
FOURCC = {".avi": "FFV1", ".mkv": "FFV1", ".mp4": "mp4v", ".mov": "mp4v"}


class VideoError(RuntimeError):
    """Unreadable or unwritable video (bad input, not an internal fault)."""


def ffmpeg_path() -> str | None:
    exe = os.environ.get(FFMPEG_ENV)
    if exe:
        return exe if Path(exe).exists() else None
    return shutil.which("ffmpeg")


def check_decoder():
    """Raise unless OpenCV was built with a video backend."""
    if not hasattr(cv2, "VideoCapture"):
        raise VideoError("OpenCV has no video I/O; install opencv-python-headless")


def read_video(path) -> tuple[np.ndarray, float]:
    """All frames as ``N x H x W x 3`` float32 RGB in [0, 1], plus the frame rate."""
    path = Path(path)
    if not path.exists():
        raise VideoError(f"no such video: {path}")
    cap = cv2.VideoCapture(str(path))
    if not cap.isOpened():
        raise VideoError(f"cannot decode {path}")
    fps = cap.get(cv2.CAP_PROP_FPS) or 0.0
    frames = []
    while True:
        ok, f = cap.read()
        if not ok:
            break
        frames.append(cv2.cvtColor(f, cv2.COLOR_BGR2RGB))
    cap.release()
    if not frames:
        raise VideoError(f"{path} holds no decodable frames")
    if not fps > 0:
        raise VideoError(f"{path} reports no frame rate")
    return np.stack(frames).astype(np.float32) / 255.0, float(fps)


def resample_frames(frames: np.ndarray, fps_in: float, fps_out: float = FPS) -> np.ndarray:
    """Nearest-in-time frame selection; output length is ``round(duration * fps_out)``."""
    n_out = int(round(len(frames) / fps_in * fps_out))
    if abs(fps_in - fps_out) < 1e-6:
        return frames[:n_out]
    # sample each output frame at its centre time
    t = (np.arange(n_out) + 0.5) / fps_out
    idx = np.clip(np.floor(t * fps_in).astype(np.int64), 0, len(frames) - 1)
    return frames[idx]


def to_uint8(frames) -> np.ndarray:
    return np.clip(np.rint(np.asarray(frames, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_video(path, frames, fps: float = FPS):
    """Encode RGB frames in [0, 1]; the codec follows the file extension."""
    path = Path(path)
    frames = to_uint8(frames)
    if frames.ndim != 4 or frames.shape[-1] != 3 or len(frames) == 0:
        raise VideoError("expected a non-empty N x H x W x 3 frame array")
    fourcc = FOURCC.get(path.suffix.lower())
    if fourcc is None:
        raise VideoError(f"unsupported container {path.suffix!r}; use one of {sorted(FOURCC)}")
    h, w = frames.shape[1:3]
    path.parent.mkdir(parents=True, exist_ok=True)
    vw = cv2.VideoWriter(str(path), cv2.VideoWriter_fourcc(*fourcc), fps, (w, h))
    if not vw.isOpened():
        raise VideoError(f"cannot open a {fourcc} writer for {path}")
    for f in frames:
        vw.write(cv2.cvtColor(f, cv2.COLOR_RGB2BGR))
    vw.release()


def count_frames(path) -> int:
    """Frames actually decodable from ``path`` (a playability check)."""
    cap = cv2.VideoCapture(str(path))
    n = 0
    while cap.isOpened():
        ok, _ = cap.read()
        if not ok:
            break
        n += 1
    cap.release()
    return n


def write_frame_images(directory, frames) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, f in enumerate(to_uint8(frames)):
        p = d / f"{i:06d}.png"
        if not cv2.imwrite(str(p), cv2.cvtColor(f, cv2.COLOR_RGB2BGR)):
            raise VideoError(f"failed to write {p}")
        paths.append(p)
    return paths


def read_frame_images(directory) -> np.ndarray:
    paths = sorted(Path(directory).glob("*.png"))
    if not paths:
        raise VideoError(f"no frame images in {directory}")
    imgs = [cv2.cvtColor(cv2.imread(str(p), cv2.IMREAD_COLOR), cv2.COLOR_BGR2RGB) for p in paths]
    return np.stack(imgs).astype(np.float32) / 255.0


def extract_audio(video, wav_out, sr: int) -> bool:
    """Pull the audio track with ffmpeg; False when no ffmpeg is available."""
    exe = ffmpeg_path()
    if exe is None:
        return False
    cmd = [exe, "-y", "-loglevel", "error", "-i", str(video), "-vn", "-ac", "1", "-ar", str(sr), str(wav_out)]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode != 0:
        raise VideoError(f"ffmpeg could not extract audio from {video}: {proc.stderr.strip()}")
    return True


def mux_audio(video, wav, out) -> bool:
    exe = ffmpeg_path()
    if exe is None:
        return False
    cmd = [exe, "-y", "-loglevel", "error", "-i", str(video), "-i", str(wav), "-c:v", "copy", "-c:a", "aac",
           "-shortest", str(out)]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode != 0:
        raise VideoError(f"ffmpeg could not mux audio into {out}: {proc.stderr.strip()}")
    return True
