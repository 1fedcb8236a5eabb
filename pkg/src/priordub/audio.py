"""Audio I/O and frame-aligned log-mel features."""
from __future__ import annotations

from math import gcd
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly, stft

SAMPLE_RATE = 16000
FPS = 25


def read_wav(path) -> tuple[np.ndarray, int]:
    """Mono float32 samples in [-1, 1] and the sample rate."""
    sr, data = wavfile.read(Path(path))
    if data.dtype.kind == "i":
        data = data.astype(np.float32) / np.iinfo(data.dtype).max
    elif data.dtype.kind == "u":
        data = (data.astype(np.float32) - 128.0) / 128.0
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        data = data.mean(axis=1)
    return data, int(sr)


def write_wav(path, audio: np.ndarray, sr: int = SAMPLE_RATE):
    pcm = np.clip(np.asarray(audio, dtype=np.float64), -1.0, 1.0)
    wavfile.write(Path(path), sr, (pcm * 32767).astype(np.int16))


def resample(audio: np.ndarray, sr_in: int, sr_out: int = SAMPLE_RATE) -> np.ndarray:
    if sr_in == sr_out:
        return np.asarray(audio, dtype=np.float32)
    g = gcd(sr_in, sr_out)
    return resample_poly(audio, sr_out // g, sr_in // g).astype(np.float32)


def n_video_frames(n_samples: int, sr: int, fps: float = FPS) -> int:
    return int(round(n_samples / sr * fps))


def frame_rms(audio: np.ndarray, sr: int, n_frames: int | None = None, fps: float = FPS) -> np.ndarray:
    """Root-mean-square amplitude of each video frame's audio span."""
    if n_frames is None:
        n_frames = n_video_frames(len(audio), sr, fps)
    out = np.zeros(n_frames, dtype=np.float64)
    for t in range(n_frames):
        a = int(round(t * sr / fps))
        b = int(round((t + 1) * sr / fps))
        seg = np.asarray(audio[a:b], dtype=np.float64)
        out[t] = np.sqrt(np.mean(seg ** 2)) if seg.size else 0.0
    return out


def mel_filterbank(n_mels: int, n_fft: int, sr: int, fmin: float = 50.0, fmax: float | None = None) -> np.ndarray:
    fmax = fmax or sr / 2
    hz_to_mel = lambda f: 2595.0 * np.log10(1.0 + f / 700.0)
    mel_to_hz = lambda m: 700.0 * (10 ** (m / 2595.0) - 1.0)
    mels = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    hz = mel_to_hz(mels)
    bins = np.fft.rfftfreq(n_fft, 1.0 / sr)
    fb = np.zeros((n_mels, bins.size))
    for m in range(n_mels):
        lo, c, hi = hz[m], hz[m + 1], hz[m + 2]
        up = (bins - lo) / (c - lo)
        down = (hi - bins) / (hi - c)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def log_mel_frames(audio: np.ndarray, sr: int, n_frames: int | None = None, fps: float = FPS,
                   n_mels: int = 16, n_fft: int = 512) -> np.ndarray:
    """``n_frames x n_mels`` log-mel energies averaged over each video frame.

    Values are mapped by a fixed affine so that silence sits near -1.
    """
    if n_frames is None:
        n_frames = n_video_frames(len(audio), sr, fps)
    if n_frames == 0:
        return np.zeros((0, n_mels), dtype=np.float32)
    hop = sr // 100
    audio = np.asarray(audio, dtype=np.float64)
    if audio.size < n_fft:
        audio = np.pad(audio, (0, n_fft - audio.size))
    _, times, spec = stft(audio, fs=sr, nperseg=n_fft, noverlap=n_fft - hop, boundary="zeros")
    power = np.abs(spec) ** 2
    mel = mel_filterbank(n_mels, n_fft, sr) @ power
    logmel = np.log10(mel + 1e-8)
    out = np.zeros((n_frames, n_mels))
    for t in range(n_frames):
        sel = (times >= t / fps) & (times < (t + 1) / fps)
        if not sel.any():
            sel = np.zeros_like(times, dtype=bool)
            sel[min(int(np.searchsorted(times, t / fps)), times.size - 1)] = True
        out[t] = logmel[:, sel].mean(axis=1)
    return ((out + 4.0) / 4.0).astype(np.float32)
