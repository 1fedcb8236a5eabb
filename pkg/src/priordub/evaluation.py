"""Image metrics, convergence tables and data-size sweeps."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import linalg, ndimage

PSNR_CAP = 100.0
UNREACHED = math.inf


def psnr(a, b, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 20.0 * math.log10(max_val / math.sqrt(mse)))


def ssim(a, b, data_range: float = 1.0, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Gaussian-windowed SSIM (11 x 11 at sigma 1.5), averaged over the valid
    interior, channels and images.  Inputs are ``[N x] H x W [x C]``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None, ..., None], b[None, ..., None]
    elif a.ndim == 3:
        a, b = a[None], b[None]
    truncate = 3.5
    r = int(truncate * sigma + 0.5)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    blur = lambda x: ndimage.gaussian_filter(x, sigma=(0, sigma, sigma, 0), truncate=truncate, mode="reflect")
    mu_a, mu_b = blur(a), blur(b)
    s_aa = blur(a * a) - mu_a ** 2
    s_bb = blur(b * b) - mu_b ** 2
    s_ab = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * s_ab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (s_aa + s_bb + c2)
    smap = num / den
    return float(smap[:, r:smap.shape[1] - r, r:smap.shape[2] - r, :].mean())


# ---------------------------------------------------------------------------
# FID
# ---------------------------------------------------------------------------


class FlattenFeatures:
    """Pixels as features (for moment-level checks)."""

    name = "flatten"

    def __call__(self, images):
        images = np.asarray(images, dtype=np.float64)
        return images.reshape(len(images), -1)


class RandomProjectionFeatures:
    """Block-averaged pixels through a fixed random projection and tanh.

    Deterministic for a given seed; values are only comparable within one
    instance's settings.
    """

    name = "random_projection"

    def __init__(self, dim: int = 32, grid: int = 8, seed: int = 0):
        self.dim, self.grid, self.seed = dim, grid, seed
        self._proj = {}

    def _matrix(self, n_in):
        if n_in not in self._proj:
            rng = np.random.default_rng(self.seed)
            self._proj[n_in] = rng.normal(size=(n_in, self.dim)) / math.sqrt(n_in)
        return self._proj[n_in]

    def __call__(self, images):
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 3:
            x = x[..., None]
        n, h, w, c = x.shape
        g = self.grid
        if h % g or w % g:
            raise ValueError(f"image size {h}x{w} not divisible by grid {g}")
        x = x.reshape(n, g, h // g, g, w // g, c).mean(axis=(2, 4)).reshape(n, -1)
        return np.tanh(2.0 * (x - 0.5) @ self._matrix(x.shape[1]))


def frechet_distance(mu1, s1, mu2, s2, eps: float = 1e-6):
    """Returns ``(distance, regularised)``."""
    diff = mu1 - mu2
    covmean, _ = linalg.sqrtm(s1 @ s2, disp=False)
    regularised = False
    if not np.isfinite(covmean).all() or np.linalg.matrix_rank(s1) < len(s1) or np.linalg.matrix_rank(s2) < len(s2):
        off = eps * np.eye(len(s1))
        covmean, _ = linalg.sqrtm((s1 + off) @ (s2 + off), disp=False)
        regularised = True
    covmean = np.real(covmean)
    d = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * np.trace(covmean))
    return max(d, 0.0), regularised


def fid_with_info(set_a, set_b, backend=None, eps: float = 1e-6):
    backend = backend or RandomProjectionFeatures()
    fa, fb = backend(set_a), backend(set_b)
    if len(fa) < 2 or len(fb) < 2:
        raise ValueError("FID needs at least two images per set")
    mu1, mu2 = fa.mean(0), fb.mean(0)
    s1 = np.atleast_2d(np.cov(fa, rowvar=False))
    s2 = np.atleast_2d(np.cov(fb, rowvar=False))
    d, reg = frechet_distance(mu1, s1, mu2, s2, eps)
    if reg:
        warnings.warn("singular feature covariance; FID computed with eps*I shrinkage", RuntimeWarning, stacklevel=2)
    return d, reg


def fid(set_a, set_b, backend=None, eps: float = 1e-6) -> float:
    """Frechet distance between Gaussian fits of backend features."""
    return fid_with_info(set_a, set_b, backend, eps)[0]


# ---------------------------------------------------------------------------
# Convergence tables
# ---------------------------------------------------------------------------


def _round_half_up(x: float, step: int) -> int:
    return int(math.floor(x / step + 0.5) * step)


def _curve(log):
    pts = []
    for r in log:
        if isinstance(r, dict):
            if r.get("val_psnr") is not None and np.isfinite(r["val_psnr"]):
                pts.append((r["iteration"], r["val_psnr"]))
        else:
            pts.append(tuple(r))
    return sorted(pts)


def first_crossing(log, threshold: float):
    """First logged iteration whose validation PSNR reaches ``threshold``."""
    for it, p in _curve(log):
        if p >= threshold:
            return it
    return UNREACHED


def iterations_to_psnr(log, thresholds, round_to: int | None = 100) -> dict:
    """Threshold → iterations (rounded half-up to ``round_to``), or ``inf``.

    ``log`` is a list of metric records (``iteration``, ``val_psnr``) or of
    ``(iteration, psnr)`` pairs.
    """
    out = {}
    for t in thresholds:
        it = first_crossing(log, t)
        out[t] = it if (it is UNREACHED or not round_to or round_to == 1) else _round_half_up(it, round_to)
    return out


@dataclass
class SpeedupRow:
    threshold: float
    ours: float
    baseline: float
    speedup: float
    baseline_censored: bool  # baseline never reached it; speedup is a lower bound


def speedup_table(ours_log, baseline_log, thresholds, round_to: int | None = 100,
                  budget: int | None = None) -> list[SpeedupRow]:
    """Rows for thresholds that ``ours`` reaches.

    Speedup is computed from unrounded crossings.  When the baseline never
    crosses and ``budget`` is given, the budget stands in for it and the row
    is marked censored.
    """
    rows = []
    for t in thresholds:
        o = first_crossing(ours_log, t)
        if o is UNREACHED:
            continue
        b = first_crossing(baseline_log, t)
        censored = b is UNREACHED
        if censored and budget is not None:
            b = budget
        sp = b / max(o, 1)
        rnd = lambda x: x if (x is UNREACHED or not round_to or round_to == 1) else _round_half_up(x, round_to)
        rows.append(SpeedupRow(t, rnd(o), rnd(b), sp, censored))
    return rows


def format_speedup_table(rows: list[SpeedupRow]) -> str:
    fmt = lambda x: "inf" if x == UNREACHED else f"{x:g}"
    head = "PSNR (dB) | " + " | ".join(f"{r.threshold:g}" for r in rows)
    ours = "prior     | " + " | ".join(fmt(r.ours) for r in rows)
    base = "scratch   | " + " | ".join(fmt(r.baseline) + ("+" if r.baseline_censored else "") for r in rows)
    sp = "speedup   | " + " | ".join(f"{r.speedup:.1f}" for r in rows)
    return "\n".join([head, ours, base, sp])


# ---------------------------------------------------------------------------
# Data-size sweep
# ---------------------------------------------------------------------------

SWEEP_SIZES = (25, 50, 100, 250, 500, 1000)


@dataclass
class SweepRecord:
    size: int
    seed: int
    variant: str  # "adapted" or "scratch"
    fid: float
    psnr: float
    ssim: float


def dataset_size_sweep(run, sizes=SWEEP_SIZES, seeds=(0,), available: int | None = None,
                       records_path=None, csv_path=None) -> list[SweepRecord]:
    """Call ``run(size, seed)`` for every size and seed.

    ``run`` returns ``{"adapted": {"fid", "psnr", "ssim"}, "scratch": {...}}``.
    Sizes above ``available`` are skipped with a warning.  Records go to
    ``records_path`` as JSON lines; ``csv_path`` gets per-size medians.
    """
    recs = []
    for size in sizes:
        if available is not None and size > available:
            warnings.warn(f"skipping size {size}: only {available} frames available", RuntimeWarning, stacklevel=2)
            continue
        for seed in seeds:
            res = run(size, seed)
            for variant in ("adapted", "scratch"):
                m = res[variant]
                recs.append(SweepRecord(size, seed, variant, float(m["fid"]), float(m["psnr"]), float(m["ssim"])))
    if records_path:
        with open(records_path, "w") as fh:
            for r in recs:
                fh.write(json.dumps(asdict(r)) + "\n")
    if csv_path:
        write_sweep_csv(recs, csv_path)
    return recs


def sweep_summary(recs: list[SweepRecord]) -> list[dict]:
    rows = []
    for size in sorted({r.size for r in recs}):
        row = {"size": size}
        for variant in ("adapted", "scratch"):
            sel = [r for r in recs if r.size == size and r.variant == variant]
            row[f"fid_{variant}"] = float(np.median([r.fid for r in sel]))
            row[f"psnr_{variant}"] = float(np.median([r.psnr for r in sel]))
        rows.append(row)
    return rows


def write_sweep_csv(recs: list[SweepRecord], path):
    cols = ["size", "fid_adapted", "fid_scratch", "psnr_adapted", "psnr_scratch"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for row in sweep_summary(recs):
            w.writerow({k: row[k] for k in cols})
