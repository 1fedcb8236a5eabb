"""Stage runners behind the command line.

Every stage reads its inputs from a :class:`ProjectStore`, checks that the
stages it depends on have run, and stamps its outputs with a digest of the
configuration sections it used plus the digests of its inputs.  Re-running a
stage whose digest is unchanged does nothing.
"""
from __future__ import annotations

import hashlib
import json
import logging
import shutil
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch

from .audio import FPS, SAMPLE_RATE, log_mel_frames, n_video_frames, read_wav, resample, write_wav
from .audio2expr import (
    EnergyJawBackend, ExpressionTrack, StyleCalibration, apply_calibration, fit_calibration, predict_expressions,
)
from .config import ProjectConfig
from .evaluation import (
    RandomProjectionFeatures, fid_with_info, iterations_to_psnr, psnr, ssim,
)
from .face_model import Camera, ConfigurationError, FaceModelAssets, make_synthetic_assets
from .neural_rendering import compose_input, generate_window, load_renderer, preset, sample_texture
from .postprocess import CoverageSegmenter, clean_frame, paste_back
from .preprocessing import CropSpec, jaw_sweep_bbox
from .reconstruction import (
    LandmarkRegressionShapeBackend, OracleLandmarkDetector, PrecomputedLandmarkDetector, ReconConfig,
    TrackedSequence, ZeroShapeBackend, track_video,
)
from .store import ProjectStore
from .training import (
    IdentityData, IdentityRecord, LossWeights, TrainConfig, adapt_identity, build_identity_data, evaluate_windows,
    fixed_windows, initial_state, rasterize_crops, read_metric_log, train_prior,
)
from .video import (
    VideoError, check_decoder, count_frames, extract_audio, mux_audio, read_frame_images, read_video,
    resample_frames, write_frame_images, write_video,
)

log = logging.getLogger(__name__)

PSNR_THRESHOLDS = (20.0, 22.0, 24.0, 26.0, 28.0, 30.0, 32.0)


class MissingStage(RuntimeError):
    def __init__(self, stage: str, detail: str = ""):
        self.stage = stage
        super().__init__(f"run {stage} first" + (f" ({detail})" if detail else ""))


class InputError(RuntimeError):
    """Bad user input (paths, names, arguments)."""


@dataclass
class StageResult:
    stage: str
    status: str  # "done" or "up to date"
    outputs: dict = field(default_factory=dict)

    @property
    def up_to_date(self) -> bool:
        return self.status == "up to date"


def _digest(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def _upstream(store: ProjectStore, stage: str, key: str | None = None, need: str | None = None) -> str:
    s = store.read_stamp(stage, key)
    if s is None:
        raise MissingStage(need or stage)
    return s["hash"]


# ---------------------------------------------------------------------------
# Config translation
# ---------------------------------------------------------------------------


def load_assets(cfg: ProjectConfig) -> FaceModelAssets:
    spec = cfg.get("model", "assets")
    if spec == "synthetic":
        return make_synthetic_assets(cfg.getint("model", "asset_seed"), V=cfg.getint("model", "vertices"))
    return FaceModelAssets.load(spec)


def recon_config(cfg: ProjectConfig) -> ReconConfig:
    return ReconConfig(lambda_photo=cfg.getfloat("track", "lambda_photo"),
                       lambda_land=cfg.getfloat("track", "lambda_land"),
                       land_ref_width=cfg.getfloat("track", "land_ref_width"),
                       lambda_reg=cfg.getfloat("track", "lambda_reg"),
                       iters_stage2=cfg.getint("track", "iters_stage2"),
                       iters_stage3=cfg.getint("track", "iters_stage3"),
                       stage2_frames=cfg.getint("track", "stage2_frames"),
                       seed=cfg.getint("project", "seed"))


def renderer_config(cfg: ProjectConfig):
    over = {k: cfg.getint("renderer", k) for k in ("window", "channels", "n_refs") if cfg.get("renderer", k).strip()}
    return preset(cfg.get("renderer", "preset"), mode=cfg.get("renderer", "mode"),
                  resolution=cfg.getint("preprocess", "resolution"), audio_dim=cfg.getint("preprocess", "n_mels"),
                  **over)


def train_config(cfg: ProjectConfig, seed: int | None = None) -> TrainConfig:
    g = lambda k: cfg.getfloat("train", k)
    return TrainConfig(iterations=cfg.getint("train", "iterations"), batch_size=cfg.getint("train", "batch_size"),
                       lr_renderer=g("lr_renderer"), lr_texture=g("lr_texture"), lr_disc=g("lr_disc"),
                       weights=LossWeights(g("lambda_l1"), g("lambda_vgg"), g("lambda_reg"), g("lambda_adv")),
                       feature_backend=cfg.get("train", "feature_backend"), val_every=cfg.getint("train", "val_every"),
                       checkpoint_every=cfg.getint("train", "checkpoint_every"),
                       seed=cfg.getint("project", "seed") if seed is None else seed,
                       use_gan=cfg.getbool("train", "use_gan"), use_audio=cfg.getbool("train", "use_audio"))


def expression_backend(assets: FaceModelAssets) -> EnergyJawBackend:
    return EnergyJawBackend(assets.n_expression, jaw_range=tuple(assets.jaw_range))


def source_camera(height: int, width: int) -> Camera:
    cam = Camera.default(width)
    intr = cam.intrinsics.clone()
    intr[3] = height / 2.0
    return Camera(intr, cam.rotation, cam.translation)


# ---------------------------------------------------------------------------
# Synthetic source material
# ---------------------------------------------------------------------------


def synthesize(out_video, seed: int = 0, n_frames: int = 100, resolution: int = 64, cfg: ProjectConfig | None = None,
               fps: float = FPS) -> dict:
    """Write a procedural talking-head clip with its audio and landmark sidecars.

    Produces ``out_video`` (lossless when ``.avi``), ``<stem>.wav`` and
    ``<video>.landmarks.npz`` (ground-truth projected landmarks).
    """
    from .synthetic import make_clip, make_identity

    cfg = cfg or ProjectConfig()
    assets = load_assets(cfg)
    clip = make_clip(assets, make_identity(assets, seed), n_frames, resolution, seed=seed)
    out_video = Path(out_video)
    frames, landmarks = clip.frames, OracleLandmarkDetector(clip.params, assets).detect(clip.frames)
    if abs(fps - FPS) > 1e-9:
        n_out = int(round(n_frames / FPS * fps))
        idx = np.clip(np.floor((np.arange(n_out) + 0.5) / fps * FPS).astype(int), 0, n_frames - 1)
        frames = frames[idx]
        landmarks = landmarks.subset(idx)
    write_video(out_video, frames, fps)
    wav = out_video.with_suffix(".wav")
    write_wav(wav, clip.audio, clip.sample_rate)
    lm = Path(str(out_video) + ".landmarks.npz")
    np.savez(lm, points=landmarks.points, confidence=landmarks.confidence,
             landmark_indices=landmarks.landmark_indices, fps=fps)
    return {"video": out_video, "audio": wav, "landmarks": lm, "frames": len(frames)}


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def run_ingest(store: ProjectStore, cfg: ProjectConfig, video, audio=None, landmarks=None,
               force: bool = False) -> StageResult:
    """Decode ``video``, resample it to 25 fps and store numbered PNG frames and 16 kHz audio."""
    check_decoder()
    video = Path(video)
    if not video.exists():
        raise InputError(f"no such video: {video}")
    audio = Path(audio) if audio else None
    if audio is None and video.with_suffix(".wav").exists():
        audio = video.with_suffix(".wav")
    if audio is not None and not audio.exists():
        raise InputError(f"no such audio file: {audio}")
    landmarks = Path(landmarks) if landmarks else Path(str(video) + ".landmarks.npz")
    inputs = [_file_digest(video), _file_digest(audio) if audio else None,
              _file_digest(landmarks) if landmarks.exists() else None]
    digest = _digest(cfg.stage_hash("ingest"), inputs)
    if not force and store.is_current("ingest", digest):
        return StageResult("ingest", "up to date")
    frames, fps_in = read_video(video)
    n_src = len(frames)
    frames = resample_frames(frames, fps_in, FPS)
    if store.frames_dir.exists():
        shutil.rmtree(store.frames_dir)
    write_frame_images(store.frames_dir, frames)
    if audio is not None:
        samples, sr = read_wav(audio)
        audio_src = "file"
    elif extract_audio(video, store.ingest_dir / "extracted.wav", SAMPLE_RATE):
        samples, sr = read_wav(store.ingest_dir / "extracted.wav")
        audio_src = "container"
    else:
        warnings.warn("no audio track found (no WAV next to the video and no ffmpeg); using silence",
                      RuntimeWarning, stacklevel=2)
        samples, sr, audio_src = np.zeros(int(round(len(frames) / FPS * SAMPLE_RATE)), np.float32), SAMPLE_RATE, "none"
    write_wav(store.audio_path, resample(samples, sr, SAMPLE_RATE), SAMPLE_RATE)
    has_lm = landmarks.exists()
    if has_lm:
        with np.load(landmarks) as d:
            pts, conf, idx = d["points"], d["confidence"], d["landmark_indices"]
        if len(pts) != n_src:
            raise InputError(f"{landmarks} has {len(pts)} frames, the video {n_src}")
        pts, conf = resample_frames(pts, fps_in, FPS), resample_frames(conf, fps_in, FPS)
        np.savez(store.landmarks_path, points=pts, confidence=conf, landmark_indices=idx)
    elif store.landmarks_path.exists():
        store.landmarks_path.unlink()
    meta = {"source": str(video), "fps_in": fps_in, "frames_in": n_src, "n_frames": len(frames),
            "height": int(frames.shape[1]), "width": int(frames.shape[2]), "audio": audio_src, "landmarks": has_lm}
    store.ingest_meta.write_text(json.dumps(meta, indent=1))
    store.write_stamp("ingest", digest, cfg.getint("project", "seed"), n_frames=len(frames))
    log.info("ingested %d frames (%d at %.3g fps)", len(frames), n_src, fps_in)
    return StageResult("ingest", "done", {"frames": len(frames), "fps_in": fps_in})


def _resize(frames, w, h):
    return np.stack([cv2.resize(f, (w, h), interpolation=cv2.INTER_AREA) for f in frames])


def run_track(store: ProjectStore, cfg: ProjectConfig, force: bool = False) -> StageResult:
    up = _upstream(store, "ingest")
    digest = _digest(cfg.stage_hash("track"), up)
    if not force and store.is_current("track", digest):
        return StageResult("track", "up to date")
    assets = load_assets(cfg)
    frames = read_frame_images(store.frames_dir)
    n, h, w = frames.shape[:3]
    mode = cfg.get("track", "landmarks")
    if mode == "none":
        det = PrecomputedLandmarkDetector.missing(n, assets.landmark_indices)
    else:
        path = store.landmarks_path if mode == "sidecar" else Path(mode)
        if not path.exists():
            raise InputError(f"no landmarks at {path}; provide <video>.landmarks.npz at ingest or set "
                             "[track] landmarks = none")
        with np.load(path) as d:
            det = PrecomputedLandmarkDetector(d["points"], d["confidence"], d["landmark_indices"])
    ww = cfg.getint("track", "working_resolution") or w
    scale = ww / w
    wh = int(round(h * scale))
    work = _resize(frames, ww, wh) if ww != w else frames
    if ww != w:
        lm = det.landmarks
        det = PrecomputedLandmarkDetector(lm.points * scale, lm.confidence, lm.landmark_indices)
    backend = LandmarkRegressionShapeBackend(assets) if cfg.get("track", "shape_backend") == "landmarks" \
        else ZeroShapeBackend(assets.n_shape)
    seq = track_video(work, assets, det, backend, recon_config(cfg), camera=source_camera(wh, ww))
    if ww != w:
        cam = seq.frozen.camera.cropped((0.0, 0.0, float(ww), float(ww)), w)
        seq.frozen.camera = cam
        seq.frames = [p.replace(camera=cam) for p in seq.frames]
    store.track_path.parent.mkdir(parents=True, exist_ok=True)
    seq.save(store.track_path)
    store.write_stamp("track", digest, cfg.getint("project", "seed"), degraded=int(seq.degraded.sum()))
    log.info("tracked %d frames; mean residual %.4f; %d degraded", n, float(np.mean(seq.residuals)),
             int(seq.degraded.sum()))
    return StageResult("track", "done", {"frames": n, "degraded": int(seq.degraded.sum()),
                                         "residual": float(np.mean(seq.residuals))})


def run_preprocess(store: ProjectStore, cfg: ProjectConfig, force: bool = False) -> StageResult:
    up = _upstream(store, "track")
    digest = _digest(cfg.stage_hash("preprocess"), up)
    if not force and store.is_current("preprocess", digest):
        return StageResult("preprocess", "up to date")
    assets = load_assets(cfg)
    seq = TrackedSequence.load(store.track_path)
    frames = read_frame_images(store.frames_dir)
    audio, sr = read_wav(store.audio_path)
    spec = jaw_sweep_bbox(seq.frames, assets, frames.shape[1:3], margin=cfg.getfloat("preprocess", "margin"),
                          resolution=cfg.getint("preprocess", "resolution"))
    data = build_identity_data(frames, seq.frames, assets, audio, store.default_identity, spec=spec, sr=sr,
                               n_mels=cfg.getint("preprocess", "n_mels"))
    store.crop_path.parent.mkdir(parents=True, exist_ok=True)
    spec.save(store.crop_path)
    data.save(store.data_path)
    store.write_stamp("preprocess", digest, cfg.getint("project", "seed"))
    return StageResult("preprocess", "done", {"frames": len(data), "box": spec.box})


def _load_dataset(src) -> IdentityData:
    p = Path(src)
    if p.is_dir():
        p = ProjectStore(p).data_path
        if not p.exists():
            raise MissingStage("preprocess", f"in {src}")
    if not p.exists():
        raise InputError(f"no such dataset: {src}")
    return IdentityData.load(p)


def run_train_prior(store: ProjectStore, cfg: ProjectConfig, sources: list, frames: int = 0,
                    force: bool = False) -> StageResult:
    """Train the shared renderer on datasets from other projects (or ``.npz`` files)."""
    if len(sources) < 2:
        raise InputError("train-prior needs at least two identities (--data DIR_OR_NPZ ...)")
    sets = [_load_dataset(s) for s in sources]
    ids = [d.identity_id for d in sets]
    if len(set(ids)) != len(ids):
        raise InputError(f"duplicate identity ids among datasets: {ids}")
    digest = _digest(cfg.stage_hash("train-prior"), [_file_digest(_dataset_path(s)) for s in sources], frames)
    if not force and store.is_current("train-prior", digest):
        return StageResult("train-prior", "up to date")
    rc, tc = renderer_config(cfg), train_config(cfg)
    train, val = {}, {}
    for d in sets:
        n_val = max(rc.window, len(d) // 10)
        cut = len(d) - n_val
        tr_idx = np.arange(cut if not frames else min(frames, cut))
        train[d.identity_id] = d.subset(tr_idx)
        val[d.identity_id] = d.subset(np.arange(cut, len(d)))
    out = store.prior_dir
    res = train_prior(train, rc, tc, val_data=val, log_path=out / "log.jsonl", ckpt_dir=out)
    if res.halted:
        raise RuntimeError("prior training hit a non-finite loss; see prior/log.jsonl")
    (out / "data").mkdir(exist_ok=True)
    for ident, d in train.items():
        d.save(out / "data" / f"{ident}.npz")
    store.write_stamp("train-prior", digest, tc.seed, identities=ids)
    last = res.log[-1]
    return StageResult("train-prior", "done", {"identities": ids, "val_psnr": last.get("val_psnr")})


def _dataset_path(src) -> Path:
    p = Path(src)
    return ProjectStore(p).data_path if p.is_dir() else p


def _split(data: IdentityData, holdout: float, T: int, cap: int = 0):
    n_hold = int(round(len(data) * holdout))
    if holdout > 0:
        n_hold = max(n_hold, T)
    cut = len(data) - n_hold
    if cut < T:
        raise InputError(f"{len(data)} frames leave {cut} for training after holding out {n_hold}; "
                         f"need at least {T}")
    n_train = min(cap, cut) if cap else cut
    return data.subset(np.arange(n_train)), (data.subset(np.arange(cut, len(data))) if n_hold else None)


def _prior_location(store: ProjectStore, cfg: ProjectConfig) -> Path:
    p = cfg.get("adapt", "prior").strip()
    return Path(p) if p else store.prior_dir


def _load_prior(store, cfg):
    loc = _prior_location(store, cfg)
    if not (loc / "renderer.pt").exists():
        raise MissingStage("train-prior", f"no prior renderer in {loc}; or set [adapt] from_scratch = true")
    gen, disc, meta = load_renderer(loc / "renderer.pt")
    return gen, disc, meta, loc


def run_adapt(store: ProjectStore, cfg: ProjectConfig, identity: str | None = None, force: bool = False) -> StageResult:
    """Fit this project's actor: texture (and renderer) plus style calibration."""
    identity = identity or store.default_identity
    up = _upstream(store, "preprocess")
    scratch = cfg.getbool("adapt", "from_scratch")
    mode = cfg.get("adapt", "mode")
    prior_hash = None
    if not scratch:
        loc = _prior_location(store, cfg)
        if not (loc / "renderer.pt").exists():
            raise MissingStage("train-prior", f"no prior renderer in {loc}; or set [adapt] from_scratch = true")
        prior_hash = _file_digest(loc / "renderer.pt")
    key = f"identity:{identity}"
    digest = _digest(cfg.stage_hash("adapt"), up, prior_hash)
    if not force and store.is_current("adapt", digest, key):
        return StageResult("adapt", "up to date")
    assets = load_assets(cfg)
    data = IdentityData.load(store.data_path)
    data.identity_id = identity
    tc = train_config(cfg)
    if scratch:
        prior = disc = None
        textures, pool = {}, None
        rc = renderer_config(cfg)
    else:
        prior, disc, _, loc = _load_prior(store, cfg)
        rc = prior.cfg
        pool, textures = None, {}
        if cfg.getbool("adapt", "mixed"):
            from .neural_rendering import NeuralTexture

            pool = {p.stem: IdentityData.load(p) for p in sorted((loc / "data").glob("*.npz"))}
            textures = {k: NeuralTexture.load(loc / "textures" / f"{k}.pt") for k in pool}
            if not pool:
                warnings.warn(f"no generic data in {loc / 'data'}; adapting without mixing", RuntimeWarning,
                              stacklevel=2)
                pool = None
    train, val = _split(data, cfg.getfloat("adapt", "holdout"), rc.window, cfg.getint("adapt", "frames"))
    out = store.identity_dir(identity)
    out.mkdir(parents=True, exist_ok=True)
    res = adapt_identity(prior, train, mode, tc, mixed_pool=pool, prior_textures=textures, prior_disc=disc,
                         renderer_cfg=rc, val_data=val, log_path=out / "adapt_log.jsonl")
    if res.halted:
        raise RuntimeError(f"adaptation hit a non-finite loss; see {out / 'adapt_log.jsonl'}")
    # style calibration against the tracked performance on the training frames
    audio, sr = read_wav(store.audio_path)
    seq = TrackedSequence.load(store.track_path)
    predicted = predict_expressions(audio, sr, expression_backend(assets), n_frames=len(seq))
    tracked = ExpressionTrack.from_tracked(seq)
    n = len(train)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # constant predicted dims are expected and flagged
        calib = fit_calibration(ExpressionTrack(predicted.expression[:n], predicted.jaw[:n]),
                                ExpressionTrack(tracked.expression[:n], tracked.jaw[:n], "tracked"))
    rec = res.record
    rec.calibration = calib.to_dict()
    rec.meta.update(config_hash=digest, seed=tc.seed, prior=None if scratch else str(_prior_location(store, cfg)),
                    train_frames=n, holdout_frames=0 if val is None else len(val))
    rec.save(out)
    store.write_stamp("adapt", digest, tc.seed, key)
    last = [r for r in res.log if "val_psnr" in r]
    return StageResult("adapt", "done", {"identity": identity, "frames": n,
                                         "val_psnr": last[-1]["val_psnr"] if last else None})


def _identity_generator(store, cfg, rec: IdentityRecord):
    if rec.renderer_state is not None:
        return rec.generator(None)
    loc = Path(rec.meta["prior"]) if rec.meta.get("prior") else _prior_location(store, cfg)
    if not (loc / "renderer.pt").exists():
        raise MissingStage("train-prior", f"identity was adapted from {loc}, which is gone")
    gen, _, _ = load_renderer(loc / "renderer.pt")
    return rec.generator(gen)


def _load_record(store, identity) -> IdentityRecord:
    d = store.identity_dir(identity)
    if not (d / "record.json").exists():
        raise MissingStage("adapt", f"no identity {identity!r}")
    return IdentityRecord.load(d)


def _pingpong(n_out: int, n_src: int) -> np.ndarray:
    if n_src == 1:
        return np.zeros(n_out, dtype=np.int64)
    period = 2 * (n_src - 1)
    k = np.arange(n_out) % period
    return np.where(k < n_src, k, period - k)


def window_plan(n: int, T: int, mode: str = "window") -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """``(frame indices fed, positions kept, output frames written)`` per window.

    ``window``: consecutive non-overlapping windows; the last one is shifted
    back to end at the final frame and keeps only frames not yet written.
    ``center``: one window per frame, keeping its middle element.
    Clips shorter than ``T`` repeat their last frame.
    """
    plan = []
    if n < T:
        idx = np.concatenate([np.arange(n), np.full(T - n, n - 1)])
        return [(idx, np.arange(n), np.arange(n))]
    if mode == "center":
        for i in range(n):
            s = min(max(i - T // 2, 0), n - T)
            plan.append((np.arange(s, s + T), np.array([i - s]), np.array([i])))
        return plan
    if mode != "window":
        raise ConfigurationError(f"unknown window mode {mode!r}")
    done = 0
    while done < n:
        s = min(done, n - T)
        keep = np.arange(done - s, T)
        plan.append((np.arange(s, s + T), keep, s + keep))
        done = s + T
    return plan


def _reference_frames(data: IdentityData, n_train: int, R: int) -> np.ndarray:
    if R == 0:
        return np.zeros((0,) + data.frames.shape[1:], dtype=np.float32)
    idx = np.linspace(0, max(n_train - 1, 0), R + 2)[1:-1].round().astype(int)
    return data.frames[idx]


def render_dub(generator, texture, targets, uv, coverage, mouth, refs, audio_feats, mode="window",
               use_audio: bool = True) -> np.ndarray:
    """Generated crops in [0, 1] for every frame, via sliding windows."""
    T = generator.cfg.window
    n = len(targets)
    out = np.zeros(targets.shape, dtype=np.float32)
    tex = texture.data.detach()
    for idx, keep, dst in window_plan(n, T, mode):
        uv_t = torch.as_tensor(uv[idx], dtype=torch.float32)
        cov_t = torch.as_tensor(coverage[idx])
        feats = sample_texture(tex, uv_t, cov_t)
        stack = compose_input(targets[idx], feats, mouth[idx], refs)
        g = generate_window(generator, stack, audio_feats[idx] if use_audio else None).numpy()
        out[dst] = np.clip((g[keep] + 1) / 2, 0, 1)
    return out


def run_dub(store: ProjectStore, cfg: ProjectConfig, identity: str | None = None, audio=None, name: str | None = None,
            force: bool = False) -> StageResult:
    """Drive the actor with ``audio`` (default: the ingested track) and write the dubbed video."""
    identity = identity or store.default_identity
    rec = _load_record(store, identity)
    up = _upstream(store, "adapt", f"identity:{identity}", need="adapt")
    audio_path = Path(audio) if audio else store.audio_path
    if not audio_path.exists():
        raise InputError(f"no such audio file: {audio_path}")
    name = name or (audio_path.stem if audio else "self")
    key = f"identity:{identity}"
    digest = _digest(cfg.stage_hash("dub"), up, _file_digest(audio_path))
    if not force and store.is_current(f"dub-{name}", digest, key):
        return StageResult("dub", "up to date", {"dir": store.dub_dir(identity, name)})
    assets = load_assets(cfg)
    seq = TrackedSequence.load(store.track_path)
    data = IdentityData.load(store.data_path)
    spec = CropSpec.load(store.crop_path)
    generator = _identity_generator(store, cfg, rec)
    samples, sr = read_wav(audio_path)
    samples = resample(samples, sr, SAMPLE_RATE)
    n_out = n_video_frames(len(samples), SAMPLE_RATE)
    if n_out == 0:
        raise InputError(f"{audio_path} is shorter than one video frame")
    track = predict_expressions(samples, SAMPLE_RATE, expression_backend(assets), n_frames=n_out)
    calib = StyleCalibration.from_dict(rec.calibration) if rec.calibration else \
        StyleCalibration.identity(assets.n_expression + 1)
    track = apply_calibration(track, calib)
    track.check_compatible(n_out, assets.n_expression)
    src = _pingpong(n_out, len(seq))
    lo, hi = assets.jaw_range
    params = [seq.frames[s].replace(expression=torch.tensor(track.expression[i]),
                                    jaw=torch.tensor(np.clip(track.jaw[i], lo, hi)))
              for i, s in enumerate(src)]
    uv, cov, mouth, _ = rasterize_crops(params, assets, spec)
    mouth_in = mouth | data.mouth[src]
    feats = log_mel_frames(samples, SAMPLE_RATE, n_out, FPS, n_mels=data.audio.shape[1])
    refs = _reference_frames(data, rec.meta.get("train_frames", len(data)), generator.cfg.n_refs)
    tc = rec.meta.get("train", {})
    gen = render_dub(generator, rec.texture, data.frames[src], uv, cov, mouth_in, refs, feats,
                     cfg.get("dub", "window_stride"), tc.get("use_audio", True))
    out = store.dub_dir(identity, name)
    out.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(out / "raw.npz", generated=gen, gen_coverage=cov, real_coverage=data.coverage[src],
                        source_index=src)
    track.save(out / "expressions.jsonl")
    write_wav(out / "audio.wav", samples, SAMPLE_RATE)
    store.write_stamp(f"dub-{name}", digest, cfg.getint("project", "seed"), key, frames=n_out)
    post = run_postprocess(store, cfg, identity, name, force=True)
    return StageResult("dub", "done", {"dir": out, "frames": n_out, "video": post.outputs["video"]})


def run_postprocess(store: ProjectStore, cfg: ProjectConfig, identity: str | None = None, name: str = "self",
                    force: bool = False) -> StageResult:
    """Background clean-up, paste-back and encoding of a dub's raw crops."""
    identity = identity or store.default_identity
    key = f"identity:{identity}"
    up = _upstream(store, f"dub-{name}", key, need="dub")
    digest = _digest(cfg.stage_hash("postprocess"), up)
    out = store.dub_dir(identity, name)
    if not force and store.is_current(f"postprocess-{name}", digest, key):
        return StageResult("postprocess", "up to date", {"video": out / f"dubbed{cfg.get('dub', 'container')}"})
    with np.load(out / "raw.npz") as d:
        gen, gcov, rcov, src = d["generated"], d["gen_coverage"], d["real_coverage"], d["source_index"]
    data = IdentityData.load(store.data_path)
    spec = CropSpec.load(store.crop_path)
    frames = read_frame_images(store.frames_dir)
    erode = cfg.getbool("postprocess", "erode")
    cleaned = np.stack([clean_frame(gen[i], data.frames[src[i]], CoverageSegmenter(gcov[i]),
                                    CoverageSegmenter(rcov[i]), erode) for i in range(len(gen))])
    full = paste_back(cleaned, frames[src], spec)
    video = out / f"dubbed{cfg.get('dub', 'container')}"
    silent = video.with_name("dubbed_silent" + video.suffix)
    write_video(silent, full, FPS)
    if mux_audio(silent, out / "audio.wav", video):
        silent.unlink()
    else:
        silent.replace(video)
    n = count_frames(video)
    if n != len(gen):
        raise VideoError(f"encoded {n} frames, expected {len(gen)}")
    store.write_stamp(f"postprocess-{name}", digest, cfg.getint("project", "seed"), key, frames=n)
    return StageResult("postprocess", "done", {"video": video, "frames": n})


def run_evaluate(store: ProjectStore, cfg: ProjectConfig, identity: str | None = None,
                 force: bool = False) -> StageResult:
    """Held-out self-reenactment metrics against the untrained starting point."""
    identity = identity or store.default_identity
    key = f"identity:{identity}"
    rec = _load_record(store, identity)
    up = _upstream(store, "adapt", key, need="adapt")
    digest = _digest(cfg.stage_hash("evaluate"), up)
    out = store.identity_dir(identity) / "evaluation"
    if not force and store.is_current("evaluate", digest, key):
        return StageResult("evaluate", "up to date", json.loads((out / "metrics.json").read_text()))
    generator = _identity_generator(store, cfg, rec)
    T, R = generator.cfg.window, generator.cfg.n_refs
    data = IdentityData.load(store.data_path)
    data.identity_id = identity
    train, val = _split(data, cfg.getfloat("adapt", "holdout"), T, rec.meta.get("train_frames", 0))
    if val is None:
        raise InputError("evaluation needs held-out frames; set [adapt] holdout > 0 and re-run adapt")
    use_audio = rec.meta.get("train", {}).get("use_audio", True)
    wins = fixed_windows(val, T, R, max(1, len(val) // T), ref_pool=train)
    l1, p = evaluate_windows(generator, {identity: rec.texture}, wins, use_audio)
    prior = None
    if rec.renderer_state is None:
        loc = Path(rec.meta["prior"]) if rec.meta.get("prior") else _prior_location(store, cfg)
        prior, _, _ = load_renderer(loc / "renderer.pt")
    seed = rec.meta.get("seed", 0)
    g0, t0 = initial_state(prior, identity, seed, generator.cfg)
    base_l1, base_p = evaluate_windows(g0, {identity: t0}, wins, use_audio)
    # per-frame images for SSIM / FID
    refs = _reference_frames(train, len(train), R)
    gen = render_dub(generator, rec.texture, val.frames, val.uv, val.coverage, val.mouth, refs, val.audio,
                     use_audio=use_audio)
    real = val.frames
    backend = RandomProjectionFeatures(dim=min(32, max(2, len(val) - 1)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        f, reg = fid_with_info(gen, real, backend)
    metrics = {"identity": identity, "held_out_frames": len(val), "weighted_l1": l1, "baseline_weighted_l1": base_l1,
               "l1_ratio": l1 / base_l1 if base_l1 > 0 else float("nan"), "psnr": p, "baseline_psnr": base_p,
               "ssim": ssim(gen, real), "frame_psnr": psnr(gen, real), "fid": f, "fid_regularised": reg,
               "fid_backend": f"{backend.name}(dim={backend.dim})"}
    log_path = store.identity_dir(identity) / "adapt_log.jsonl"
    if log_path.exists():
        curve = read_metric_log(log_path)
        table = iterations_to_psnr(curve, PSNR_THRESHOLDS, round_to=100)
        metrics["iterations_to_psnr"] = {f"{k:g}": (None if v == float("inf") else v) for k, v in table.items()}
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1))
    store.write_stamp("evaluate", digest, seed, key)
    return StageResult("evaluate", "done", metrics)
