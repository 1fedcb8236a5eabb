"""Synthetic prior-versus-scratch experiments.

A procedural population stands in for a multi-speaker corpus: a prior is
trained on a handful of identities and a held-back identity is then fitted
twice per seed, once from the prior and once from random weights.
"""
from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .evaluation import (
    RandomProjectionFeatures, SpeedupRow, fid_with_info, psnr, speedup_table, ssim,
)
from .face_model import FaceModelAssets, make_synthetic_assets
from .neural_rendering import RendererConfig, preset
from .synthetic import make_clip, make_identity
from .training import (
    AdaptResult, IdentityData, TrainConfig, TrainResult, adapt_identity, build_identity_data, train_from_scratch,
    train_prior,
)

log = logging.getLogger(__name__)


@dataclass
class BenchmarkSetup:
    n_prior: int = 8
    prior_frames: int = 100
    actor_frames: int = 1000
    holdout: int = 100
    source_resolution: int = 64
    crop_resolution: int = 32
    prior_iterations: int = 3000
    actor_seed: int = 100
    renderer: str = "tiny"


def make_identity_data(assets: FaceModelAssets, seed: int, n: int, setup: BenchmarkSetup) -> IdentityData:
    clip = make_clip(assets, make_identity(assets, seed), n, setup.source_resolution, seed=seed)
    return build_identity_data(clip.frames, clip.params, assets, clip.audio, f"id{seed}",
                               resolution=setup.crop_resolution)


@dataclass
class Population:
    setup: BenchmarkSetup
    assets: FaceModelAssets
    renderer_cfg: RendererConfig
    prior: TrainResult
    actor_train: IdentityData
    actor_val: IdentityData
    seconds: dict = field(default_factory=dict)


def build_population(setup: BenchmarkSetup = BenchmarkSetup(), seed: int = 0) -> Population:
    """Generic identities, a trained prior and the held-back actor split."""
    t0 = time.time()
    assets = make_synthetic_assets(0, V=512)
    generic = {}
    for s in range(setup.n_prior):
        d = make_identity_data(assets, s, setup.prior_frames, setup)
        generic[d.identity_id] = d
    actor = make_identity_data(assets, setup.actor_seed, setup.actor_frames + setup.holdout, setup)
    cut = setup.actor_frames
    train, val = actor.subset(np.arange(cut)), actor.subset(np.arange(cut, len(actor)))
    t1 = time.time()
    rc = preset(setup.renderer, resolution=setup.crop_resolution)
    prior = train_prior(generic, rc, TrainConfig(iterations=setup.prior_iterations, val_every=setup.prior_iterations,
                                                 seed=seed))
    t2 = time.time()
    log.info("population: data %.0fs, prior %.0fs", t1 - t0, t2 - t1)
    return Population(setup, assets, rc, prior, train, val, {"data": t1 - t0, "prior": t2 - t1})


def fit_pair(pop: Population, train: IdentityData, iterations: int, seed: int, val_every: int = 5):
    """``(adapted, scratch)`` runs on ``train`` with the same budget and seed."""
    cfg = TrainConfig(iterations=iterations, val_every=val_every, seed=seed)
    ad = adapt_identity(pop.prior.generator, train, "full", cfg, prior_disc=pop.prior.discriminator,
                        val_data=pop.actor_val)
    sc = train_from_scratch(train, pop.renderer_cfg, cfg, val_data=pop.actor_val)
    return ad, sc


def speedup_benchmark(pop: Population, thresholds, iterations: int = 1000, seeds=(0, 1, 2),
                      val_every: int = 5) -> dict:
    """Per-seed speedup rows and the per-threshold median.

    A threshold counts as reachable when the adapted run reaches it for
    every seed.  Scratch runs that never reach it are censored at the
    budget, which understates their cost.
    """
    per_seed: list[list[SpeedupRow]] = []
    logs = []
    for s in seeds:
        ad, sc = fit_pair(pop, pop.actor_train, iterations, s, val_every)
        per_seed.append(speedup_table(ad.log, sc.log, thresholds, round_to=1, budget=iterations))
        logs.append((ad.log, sc.log))
    reach = [t for t in thresholds if all(any(r.threshold == t for r in rows) for rows in per_seed)]
    median = {}
    for t in reach:
        sp = [next(r for r in rows if r.threshold == t) for rows in per_seed]
        median[t] = {"speedup": float(np.median([r.speedup for r in sp])),
                     "ours": [r.ours for r in sp], "scratch": [r.baseline for r in sp],
                     "censored": [r.baseline_censored for r in sp]}
    return {"per_seed": per_seed, "median": median, "reachable": reach, "logs": logs}


def held_out_metrics(result: AdaptResult, train: IdentityData, val: IdentityData, fid_dim: int = 32) -> dict:
    """Per-frame FID / PSNR / SSIM of a fitted model on the held-out clip."""
    from .pipeline import _reference_frames, render_dub

    gen = result.generator
    refs = _reference_frames(train, len(train), gen.cfg.n_refs)
    out = render_dub(gen, result.record.texture, val.frames, val.uv, val.coverage, val.mouth, refs, val.audio)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        f, _ = fid_with_info(out, val.frames, RandomProjectionFeatures(dim=min(fid_dim, len(val) - 1)))
    return {"fid": f, "psnr": psnr(out, val.frames), "ssim": ssim(out, val.frames)}


def few_shot_run(pop: Population, iterations: int = 1000):
    """A ``run(size, seed)`` callable for :func:`evaluation.dataset_size_sweep`."""

    def run(size: int, seed: int) -> dict:
        train = pop.actor_train.subset(np.arange(size))
        ad, sc = fit_pair(pop, train, iterations, seed, val_every=iterations)
        return {"adapted": held_out_metrics(ad, train, pop.actor_val),
                "scratch": held_out_metrics(sc, train, pop.actor_val)}

    return run
