"""Three-stage monocular fitting of face-model parameters to a video.

Stage 1 takes the identity shape from a pluggable backend and freezes it.
Stage 2 jointly fits albedo and camera over a handful of sampled frames and
freezes them.  Stage 3 fits expression, pose and lighting frame by frame,
warm-starting each frame from its predecessor.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
import torch

from .face_model import (
    Camera, ConfigurationError, FaceModelAssets, FaceParams, SH_C0, landmarks_2d, render,
)

log = logging.getLogger(__name__)

TRACK_FORMAT = "priordub.tracked/1"


class ReconstructionError(RuntimeError):
    """Fitting failed; ``last_good`` holds the best parameters reached, if any."""

    def __init__(self, msg, last_good=None):
        super().__init__(msg)
        self.last_good = last_good


@dataclass
class ReconConfig:
    lambda_photo: float = 1.0
    lambda_land: float = 2e-3
    lambda_reg: float = 1e-4
    land_ref_width: float = 64.0
    reg_shape: float = 1.0
    reg_expression: float = 1.0
    reg_pose: float = 1.0
    lr_stage2: float = 1e-2
    lr_stage3: float = 2e-2
    iters_stage2: int = 500
    iters_stage3: int = 300
    stage2_frames: int = 8
    rel_tol: float = 1e-5
    patience: int = 20
    seed: int = 0


# ---------------------------------------------------------------------------
# Landmarks and shape backends
# ---------------------------------------------------------------------------


@dataclass
class LandmarkSet:
    points: np.ndarray  # N x L x 2 pixels
    confidence: np.ndarray  # N x L in [0, 1]
    landmark_indices: np.ndarray

    def __post_init__(self):
        if self.points.shape[:2] != self.confidence.shape:
            raise ConfigurationError("landmark points and confidences disagree in shape")
        if self.points.shape[1] != len(self.landmark_indices):
            raise ConfigurationError("landmark count does not match landmark_indices")
        if (self.confidence < 0).any() or (self.confidence > 1).any():
            raise ConfigurationError("landmark confidences must lie in [0, 1]")

    def __len__(self):
        return self.points.shape[0]

    def subset(self, idx) -> "LandmarkSet":
        return LandmarkSet(self.points[idx], self.confidence[idx], self.landmark_indices)


class LandmarkDetector(Protocol):
    def detect(self, frames: np.ndarray) -> LandmarkSet: ...


class OracleLandmarkDetector:
    """Projects the ground-truth model landmarks of a synthetic clip."""

    def __init__(self, params: list[FaceParams], assets: FaceModelAssets, noise: float = 0.0, seed: int = 0):
        self.params, self.assets, self.noise = params, assets, noise
        self.rng = np.random.default_rng(seed)

    def detect(self, frames: np.ndarray) -> LandmarkSet:
        if len(frames) != len(self.params):
            raise ConfigurationError("oracle detector was built for a different frame count")
        pts, conf = [], []
        with torch.no_grad():
            for p in self.params:
                uv, valid = landmarks_2d(p, self.assets)
                pts.append(uv.numpy() + self.rng.normal(scale=self.noise, size=uv.shape) * (self.noise > 0))
                conf.append(valid.numpy().astype(np.float64))
        return LandmarkSet(np.stack(pts), np.stack(conf), np.asarray(self.assets.landmark_indices))


class CallableLandmarkDetector:
    """Adapter for an external per-frame detector.

    ``fn(frame) -> (points, confidence)`` returns the detector's native
    landmark set; ``mapping`` selects, for every model landmark, the index
    of the matching detector landmark.
    """

    def __init__(self, fn, mapping, landmark_indices):
        self.fn = fn
        self.mapping = np.asarray(mapping, dtype=np.int64)
        self.landmark_indices = np.asarray(landmark_indices, dtype=np.int64)
        if len(self.mapping) != len(self.landmark_indices):
            raise ConfigurationError("mapping must have one entry per model landmark")

    def detect(self, frames: np.ndarray) -> LandmarkSet:
        pts, conf = [], []
        for f in frames:
            p, c = self.fn(f)
            pts.append(np.asarray(p, dtype=np.float64)[self.mapping])
            conf.append(np.clip(np.asarray(c, dtype=np.float64)[self.mapping], 0, 1))
        return LandmarkSet(np.stack(pts), np.stack(conf), self.landmark_indices)


class PrecomputedLandmarkDetector:
    """Landmarks produced offline, e.g. by an external detector, stored per frame."""

    def __init__(self, points, confidence, landmark_indices):
        self.landmarks = LandmarkSet(np.asarray(points, dtype=np.float64), np.asarray(confidence, dtype=np.float64),
                                     np.asarray(landmark_indices, dtype=np.int64))

    @classmethod
    def missing(cls, n_frames: int, landmark_indices) -> "PrecomputedLandmarkDetector":
        """Zero-confidence landmarks: tracking falls back to the photometric term."""
        L = len(landmark_indices)
        return cls(np.zeros((n_frames, L, 2)), np.zeros((n_frames, L)), landmark_indices)

    def detect(self, frames: np.ndarray) -> LandmarkSet:
        if len(frames) != len(self.landmarks):
            raise ConfigurationError(f"{len(self.landmarks)} landmark frames for {len(frames)} video frames")
        return self.landmarks


class ZeroShapeBackend:
    """Mean face shape."""

    def __init__(self, n_shape: int):
        self.n_shape = n_shape

    def estimate_shape(self, frame, landmarks=None):
        return np.zeros(self.n_shape)


class ShapeBackend(Protocol):
    def estimate_shape(self, frame: np.ndarray, landmarks: np.ndarray | None = None) -> np.ndarray: ...


class OracleShapeBackend:
    """Returns a known shape vector (test double for a learned shape regressor)."""

    def __init__(self, shape):
        self.shape = np.asarray(shape, dtype=np.float64)

    def estimate_shape(self, frame, landmarks=None):
        return self.shape.copy()


class LandmarkRegressionShapeBackend:
    """Ridge regression of shape coefficients from one frame's landmarks.

    Landmarks are centred and scale-normalised, then matched against the
    template's frontal orthographic landmark layout plus the shape basis
    restricted to those landmarks.
    """

    def __init__(self, assets: FaceModelAssets, ridge: float = 1e-2):
        self.assets, self.ridge = assets, ridge

    def estimate_shape(self, frame, landmarks=None):
        if landmarks is None:
            raise ReconstructionError("landmark regression backend needs landmarks")
        idx = np.asarray(self.assets.landmark_indices)
        tmpl = self.assets.template_vertices[idx][:, :2] * np.array([1.0, -1.0])
        basis = self.assets.shape_basis[idx][:, :2, :] * np.array([1.0, -1.0])[None, :, None]
        det = np.asarray(landmarks, dtype=np.float64)
        det_c = det - det.mean(0)
        tm_c = tmpl - tmpl.mean(0)
        scale = np.sqrt((tm_c ** 2).sum() / max((det_c ** 2).sum(), 1e-12))
        target = (det_c * scale - tm_c).reshape(-1)
        B = (basis - basis.mean(0, keepdims=True)).reshape(-1, basis.shape[2])
        A = B.T @ B + self.ridge * np.eye(B.shape[1])
        return np.linalg.solve(A, B.T @ target)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def photometric_loss(rendered: torch.Tensor, target, coverage) -> torch.Tensor:
    """Mean absolute difference over covered pixels (all channels)."""
    target = torch.as_tensor(target, dtype=rendered.dtype)
    if rendered.shape != target.shape:
        raise ConfigurationError(f"rendered {tuple(rendered.shape)} vs target {tuple(target.shape)}")
    mask = torch.as_tensor(coverage).bool()
    n = int(mask.sum())
    if n == 0:
        warnings.warn("photometric loss over zero covered pixels", RuntimeWarning, stacklevel=2)
        return rendered.sum() * 0.0
    diff = (rendered - target).abs()
    if diff.dim() == mask.dim() + 1:
        return diff[mask].mean()
    return diff[mask].mean()


def landmark_loss(projected: torch.Tensor, detected, confidence=None, valid=None) -> torch.Tensor:
    """Confidence-weighted mean of per-landmark Euclidean distances."""
    detected = torch.as_tensor(detected, dtype=projected.dtype)
    L = projected.shape[0]
    conf = torch.ones(L, dtype=projected.dtype) if confidence is None else torch.as_tensor(confidence, dtype=projected.dtype)
    if valid is not None:
        conf = conf * torch.as_tensor(valid).to(projected.dtype)
    if float(conf.sum()) == 0.0:
        warnings.warn("landmark loss with all confidences zero", RuntimeWarning, stacklevel=2)
        return projected.sum() * 0.0
    dist = torch.linalg.vector_norm(projected - detected, dim=-1)
    return (conf * dist).sum() / L


def reg_loss(params: FaceParams, weights=(1.0, 1.0, 1.0)) -> torch.Tensor:
    """Weighted squared norms of shape, expression and pose."""
    w_s, w_e, w_p = weights
    return (w_s * params.shape.pow(2).sum() + w_e * params.expression.pow(2).sum()
            + w_p * params.pose.pow(2).sum())


def total_recon_loss(parts, lambda_photo: float, lambda_land: float, lambda_reg: float):
    photo, land, reg = parts
    return lambda_photo * photo + lambda_land * land + lambda_reg * reg


def frame_objective(params: FaceParams, assets: FaceModelAssets, target, detected, confidence,
                    cfg: ReconConfig):
    h, w = target.shape[:2]
    img, ras = render(params, assets, (h, w))
    photo = photometric_loss(img, target, ras.coverage)
    uv, valid = landmarks_2d(params, assets)
    land = landmark_loss(uv, detected, confidence, valid)
    reg = reg_loss(params, (cfg.reg_shape, cfg.reg_expression, cfg.reg_pose))
    # pixel distances shrink with the image while the photometric mean does not
    lam_land = cfg.lambda_land * (cfg.land_ref_width / w) ** 2 if cfg.land_ref_width else cfg.lambda_land
    total = total_recon_loss((photo, land, reg), cfg.lambda_photo, lam_land, cfg.lambda_reg)
    return total, (photo, land, reg)


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------


@dataclass
class DescentResult:
    history: list
    iterations: int
    diverged: bool = False


def descend(variables: list[torch.Tensor], objective, lr: float, max_iters: int, rel_tol: float = 1e-5,
            patience: int = 10, project=None, threshold: float | None = None,
            max_restarts: int = 4) -> DescentResult:
    """Adam that remembers the best iterate.

    ``history`` records the best loss seen so far, so it never increases, and
    the variables hold that best iterate on return.  After ``patience`` steps
    without a relative gain of ``rel_tol`` the search restarts from the best
    point with half the rate and fresh moments; it stops after
    ``max_restarts`` such restarts.  Restarts matter for the l1 photometric
    term, whose kinks at exact matches defeat a fixed step size.
    """
    def fresh(rate):
        return torch.optim.Adam(variables, lr=rate)

    def restore():
        with torch.no_grad():
            for v, s in zip(variables, best_vals):
                v.copy_(s)

    opt = fresh(lr)
    best = None
    best_vals = [v.detach().clone() for v in variables]
    history: list[float] = []
    stale = restarts = it = 0
    improved = False  # since the last restart
    while True:
        opt.zero_grad()
        loss = objective()
        if not torch.isfinite(loss):
            restore()
            return DescentResult(history or [float("nan")], it, diverged=True)
        val = loss.item()
        if best is None or best - val > rel_tol * max(abs(best), 1e-12):
            stale = 0
            improved = best is not None
        else:
            stale += 1
        if best is None or val < best:
            best = val
            best_vals = [v.detach().clone() for v in variables]
        history.append(best)
        if it >= max_iters or (threshold is not None and best <= threshold):
            break
        if stale >= patience:
            # a restart that made progress keeps its rate
            if not improved:
                if restarts >= max_restarts:
                    break
                restarts += 1
                lr *= 0.5
            stale, improved = 0, False
            restore()
            opt = fresh(lr)
            continue
        loss.backward()
        opt.step()
        if project is not None:
            with torch.no_grad():
                project()
        it += 1
    restore()
    return DescentResult(history, it)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


@dataclass
class FrozenBlock:
    shape: torch.Tensor
    texture: torch.Tensor | None = None
    camera: Camera | None = None
    lighting: torch.Tensor | None = None  # initial lighting for stage 3
    stages: dict = field(default_factory=dict)


def fit_stage1(first_frame, shape_backend, n_shape: int, landmarks=None) -> FrozenBlock:
    try:
        alpha = np.asarray(shape_backend.estimate_shape(first_frame, landmarks), dtype=np.float64)
    except ConfigurationError:
        raise
    except Exception as exc:  # backend failures abort the pipeline with context
        raise ReconstructionError(f"shape backend failed: {exc}") from exc
    if alpha.shape != (n_shape,):
        raise ConfigurationError(f"shape backend returned {alpha.shape}, expected ({n_shape},)")
    return FrozenBlock(shape=torch.tensor(alpha), stages={"shape": 1})


def _pose_vars(init: FaceParams):
    return {k: init.__dict__[k].detach().clone().requires_grad_(True)
            for k in ("expression", "jaw", "neck", "global_rotation", "global_translation", "lighting")}


def _jaw_projector(vars_list, assets):
    lo, hi = assets.jaw_range

    def project():
        for v in vars_list:
            v["jaw"].clamp_(lo, hi)
    return project


def fit_stage2(frames: np.ndarray, landmarks: LandmarkSet, frozen: FrozenBlock, assets: FaceModelAssets,
               camera: Camera, cfg: ReconConfig = ReconConfig(), texture_init=None,
               sample: np.ndarray | None = None, lighting_init=None, frame_init=None):
    """Jointly fit albedo, intrinsics and extrinsics over sampled frames.

    Per-frame expression, pose and lighting are optimised alongside as
    nuisance variables, starting from neutral or from ``frame_init`` (one
    FaceParams per video frame).  Returns ``(frozen, DescentResult,
    sample_indices)``.
    """
    n = len(frames)
    if n == 0:
        raise ConfigurationError("stage 2 needs at least one frame")
    if n < 2:
        warnings.warn("stage 2 with a single frame; joint fit degenerates to one view",
                      RuntimeWarning, stacklevel=2)
    if sample is None:
        rng = np.random.default_rng(cfg.seed)
        sample = np.sort(rng.choice(n, size=min(cfg.stage2_frames, n), replace=False))
    dtype = torch.float64
    base = FaceParams.neutral(assets, camera=camera.to(dtype), dtype=dtype).replace(shape=frozen.shape.to(dtype))
    if lighting_init is not None:
        base = base.replace(lighting=torch.as_tensor(lighting_init, dtype=dtype))
    texture = torch.zeros(assets.n_texture, dtype=dtype) if texture_init is None else torch.as_tensor(texture_init, dtype=dtype).clone()
    texture.requires_grad_(True)
    f0 = camera.intrinsics.to(dtype)
    size = float(max(frames.shape[1:3]))
    log_f = torch.zeros(2, dtype=dtype, requires_grad=True)
    c_off = torch.zeros(2, dtype=dtype, requires_grad=True)
    rot = camera.rotation.to(dtype).clone().requires_grad_(True)
    trans = camera.translation.to(dtype).clone().requires_grad_(True)
    per_frame = [_pose_vars(base if frame_init is None else frame_init[i]) for i in sample]

    def current_camera():
        intr = torch.cat([f0[:2] * torch.exp(log_f), f0[2:] + size * c_off])
        return Camera(intr, rot, trans)

    def objective():
        cam = current_camera()
        total = 0.0
        for v, i in zip(per_frame, sample):
            p = base.replace(texture=texture, camera=cam, **v)
            loss, _ = frame_objective(p, assets, frames[i], landmarks.points[i], landmarks.confidence[i], cfg)
            total = total + loss
        return total / len(sample)

    variables = [texture, log_f, c_off, rot, trans] + [t for v in per_frame for t in v.values()]
    res = descend(variables, objective, cfg.lr_stage2, cfg.iters_stage2, cfg.rel_tol, cfg.patience,
                  project=_jaw_projector(per_frame, assets))
    cam = current_camera()
    out = FrozenBlock(shape=frozen.shape, texture=texture.detach().clone(), camera=cam.detach(),
                      lighting=torch.stack([v["lighting"].detach() for v in per_frame]).mean(0),
                      stages={**frozen.stages, "texture": 2, "intrinsics": 2, "extrinsics": 2})
    if res.diverged:
        raise ReconstructionError("stage 2 diverged (non-finite loss)", last_good=out)
    return out, res, sample


@dataclass
class TrackedSequence:
    frames: list  # FaceParams per frame, sharing the frozen tensors
    frozen: FrozenBlock
    residuals: np.ndarray
    degraded: np.ndarray
    iterations: np.ndarray

    def __len__(self):
        return len(self.frames)

    def expression_array(self) -> np.ndarray:
        return np.stack([p.expression.detach().numpy() for p in self.frames])

    def jaw_array(self) -> np.ndarray:
        return np.stack([p.jaw.detach().numpy() for p in self.frames])

    def save(self, path):
        """JSON lines: a header with the frozen block, then one record per frame."""
        fz = self.frozen
        header = {
            "format": TRACK_FORMAT,
            "n_frames": len(self.frames),
            "frozen": {
                "shape": fz.shape.tolist(),
                "texture": fz.texture.tolist(),
                "camera": self.frames[0].to_dict()["camera"] if self.frames else None,
                "stages": fz.stages,
            },
        }
        with open(path, "w") as fh:
            fh.write(json.dumps(header) + "\n")
            for i, p in enumerate(self.frames):
                rec = {k: getattr(p, k).detach().tolist() for k in
                       ("expression", "jaw", "neck", "global_rotation", "global_translation", "lighting")}
                rec.update(frame=i, residual=float(self.residuals[i]), degraded=bool(self.degraded[i]),
                           iterations=int(self.iterations[i]))
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def load(cls, path) -> "TrackedSequence":
        lines = Path(path).read_text().splitlines()
        header = json.loads(lines[0])
        if header.get("format") != TRACK_FORMAT:
            raise ConfigurationError(f"{path} is not a tracked-sequence file")
        fz = header["frozen"]
        dtype = torch.float64
        cam = fz["camera"]
        camera = Camera(*(torch.tensor(cam[k], dtype=dtype) for k in ("intrinsics", "rotation", "translation")))
        shape, texture = torch.tensor(fz["shape"], dtype=dtype), torch.tensor(fz["texture"], dtype=dtype)
        frozen = FrozenBlock(shape=shape, texture=texture, camera=camera, stages=fz["stages"])
        frames, res, deg, its = [], [], [], []
        for line in lines[1:]:
            r = json.loads(line)
            frames.append(FaceParams(shape=shape, texture=texture, camera=camera,
                                     **{k: torch.tensor(r[k], dtype=dtype) for k in
                                        ("expression", "jaw", "neck", "global_rotation", "global_translation",
                                         "lighting")}))
            res.append(r["residual"])
            deg.append(r["degraded"])
            its.append(r["iterations"])
        if len(frames) != header["n_frames"]:
            raise ConfigurationError(f"{path}: header says {header['n_frames']} frames, found {len(frames)}")
        return cls(frames, frozen, np.array(res), np.array(deg, dtype=bool), np.array(its))


def neutral_init(frozen: FrozenBlock, assets: FaceModelAssets) -> FaceParams:
    p = FaceParams.neutral(assets, camera=frozen.camera, dtype=torch.float64)
    p = p.replace(shape=frozen.shape, texture=frozen.texture)
    if frozen.lighting is not None:
        p = p.replace(lighting=frozen.lighting.clone())
    return p


def fit_frame(frame, detected, confidence, init: FaceParams, assets: FaceModelAssets,
              cfg: ReconConfig = ReconConfig(), threshold: float | None = None, max_iters: int | None = None):
    """Optimise expression, pose and lighting for one frame from ``init``."""
    v = _pose_vars(init)

    def objective():
        loss, _ = frame_objective(init.replace(**v), assets, frame, detected, confidence, cfg)
        return loss

    res = descend(list(v.values()), objective, cfg.lr_stage3, max_iters or cfg.iters_stage3, cfg.rel_tol,
                  cfg.patience, project=_jaw_projector([v], assets), threshold=threshold)
    fitted = init.replace(**{k: t.detach().clone() for k, t in v.items()})
    return fitted, res


def fit_stage3(frames: np.ndarray, landmarks: LandmarkSet, frozen: FrozenBlock, assets: FaceModelAssets,
               cfg: ReconConfig = ReconConfig(), warm_start: bool = True) -> TrackedSequence:
    if frozen.camera is None or frozen.texture is None:
        raise ConfigurationError("stage 3 needs the stage-2 frozen block")
    neutral = neutral_init(frozen, assets)
    out, res, deg, its = [], [], [], []
    prev = neutral
    for i in range(len(frames)):
        init = prev if warm_start else neutral
        fitted, r = fit_frame(frames[i], landmarks.points[i], landmarks.confidence[i], init, assets, cfg)
        if r.diverged:
            log.warning("frame %d diverged; reusing previous parameters", i)
            fitted, bad = prev, True
        else:
            bad = False
        # frozen fields are shared objects so they stay bit-identical
        fitted = fitted.replace(shape=frozen.shape, texture=frozen.texture, camera=frozen.camera)
        out.append(fitted)
        res.append(r.history[-1] if r.history else float("nan"))
        deg.append(bad)
        its.append(r.iterations)
        prev = fitted
    return TrackedSequence(out, frozen, np.array(res), np.array(deg, dtype=bool), np.array(its))


def track_video(frames: np.ndarray, assets: FaceModelAssets, detector: LandmarkDetector,
                shape_backend: ShapeBackend, cfg: ReconConfig = ReconConfig(),
                camera: Camera | None = None) -> TrackedSequence:
    """Run all three stages on ``frames`` (``N x H x W x 3`` floats in [0, 1])."""
    frames = np.asarray(frames)
    if frames.ndim != 4 or len(frames) == 0:
        raise ConfigurationError("frames must be a non-empty N x H x W x 3 array")
    landmarks = detector.detect(frames)
    if len(landmarks.landmark_indices) != len(assets.landmark_indices):
        raise ConfigurationError("detector landmark count does not match the face model")
    camera = camera or Camera.default(frames.shape[2])
    frozen = fit_stage1(frames[0], shape_backend, assets.n_shape, landmarks.points[0])
    frozen, _, _ = fit_stage2(frames, landmarks, frozen, assets, camera, cfg)
    return fit_stage3(frames, landmarks, frozen, assets, cfg)


def default_lighting() -> torch.Tensor:
    g = torch.zeros(9, dtype=torch.float64)
    g[0] = 1.0 / SH_C0
    return g
