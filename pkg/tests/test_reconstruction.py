import warnings

import numpy as np
import pytest
import torch

from priordub.face_model import Camera, ConfigurationError, FaceParams, make_synthetic_assets, render
from priordub.reconstruction import (
    CallableLandmarkDetector, FrozenBlock, LandmarkRegressionShapeBackend, LandmarkSet,
    OracleLandmarkDetector, OracleShapeBackend, ReconConfig, ReconstructionError, TrackedSequence,
    descend, fit_frame, fit_stage1, fit_stage2, fit_stage3, frame_objective, landmark_loss,
    neutral_init, photometric_loss, reg_loss, total_recon_loss, track_video,
)
from priordub.synthetic import make_clip, make_identity

RES = 32


@pytest.fixture(scope="module")
def assets():
    return make_synthetic_assets(0, V=256)


@pytest.fixture(scope="module")
def clip(assets):
    return make_clip(assets, make_identity(assets, 1), 12, RES, seed=1, use_uv_texture=False)


@pytest.fixture(scope="module")
def tracked(assets, clip):
    det = OracleLandmarkDetector(clip.params, assets)
    return track_video(clip.frames, assets, det, OracleShapeBackend(clip.identity.shape))


def gt_frozen(p):
    return FrozenBlock(shape=p.shape, texture=p.texture, camera=p.camera, lighting=p.lighting)


def render_frames(assets, params, quantize=True):
    with torch.no_grad():
        out = np.stack([render(p, assets, RES)[0].numpy() for p in params])
    return np.round(out * 255) / 255 if quantize else out


# --- losses ---------------------------------------------------------------

def test_photometric_trivial_cases():
    rng = np.random.default_rng(0)
    img = torch.tensor(rng.random((8, 9, 3)))
    mask = rng.random((8, 9)) > 0.4
    assert photometric_loss(img, img.numpy(), mask).item() == 0.0
    shifted = img.numpy().copy()
    shifted[mask] += 0.5
    assert photometric_loss(img, shifted, mask).item() == pytest.approx(0.5)


def test_photometric_matches_loop():
    rng = np.random.default_rng(1)
    a, b = rng.random((7, 6, 3)), rng.random((7, 6, 3))
    mask = rng.random((7, 6)) > 0.5
    tot, n = 0.0, 0
    for i in range(7):
        for j in range(6):
            if mask[i, j]:
                for c in range(3):
                    tot += abs(a[i, j, c] - b[i, j, c])
                    n += 1
    assert photometric_loss(torch.tensor(a), b, mask).item() == pytest.approx(tot / n, abs=1e-7)


def test_photometric_empty_mask_and_shape_mismatch():
    img = torch.zeros(4, 4, 3)
    with pytest.warns(RuntimeWarning):
        assert photometric_loss(img, np.ones((4, 4, 3)), np.zeros((4, 4), bool)).item() == 0.0
    with pytest.raises(ConfigurationError):
        photometric_loss(img, np.ones((5, 4, 3)), np.ones((4, 4), bool))


def test_landmark_loss_examples():
    L = 6
    det = np.arange(2 * L, dtype=float).reshape(L, 2)
    proj = torch.tensor(det.copy())
    assert landmark_loss(proj, det).item() == 0.0
    proj[2] += torch.tensor([3.0, 4.0])
    assert landmark_loss(proj, det, np.ones(L)).item() == pytest.approx(5.0 / L)
    conf = np.random.default_rng(2).random(L)
    rnd = proj + torch.tensor(np.random.default_rng(3).normal(size=(L, 2)))
    assert landmark_loss(rnd, det, 2 * conf).item() == pytest.approx(2 * landmark_loss(rnd, det, conf).item())
    with pytest.warns(RuntimeWarning):
        assert landmark_loss(rnd, det, np.zeros(L)).item() == 0.0


def test_reg_loss(assets):
    p = FaceParams.neutral(assets)
    assert reg_loss(p).item() == 0.0
    e = torch.zeros(assets.n_expression, dtype=p.expression.dtype)
    e[3] = 1.0
    assert reg_loss(p.replace(expression=e), (1.0, 0.7, 1.0)).item() == pytest.approx(0.7)
    rng = np.random.default_rng(4)
    q = p.replace(shape=torch.tensor(rng.normal(size=assets.n_shape)),
                  expression=torch.tensor(rng.normal(size=assets.n_expression)),
                  jaw=torch.tensor([0.2]), neck=torch.tensor(rng.normal(size=3)),
                  global_rotation=torch.tensor(rng.normal(size=3)))
    w = (0.3, 1.7, 2.2)
    pose = np.concatenate([q.global_rotation.numpy(), q.neck.numpy(), q.jaw.numpy()])
    expect = (w[0] * sum(x * x for x in q.shape.numpy()) + w[1] * sum(x * x for x in q.expression.numpy())
              + w[2] * sum(x * x for x in pose))
    assert reg_loss(q, w).item() == pytest.approx(expect, abs=1e-9)


def test_total_loss():
    assert total_recon_loss((1.0, 2.0, 3.0), 0, 0, 0) == 0
    assert total_recon_loss((1.0, 2.0, 3.0), 1, 1, 1) == 6
    rng = np.random.default_rng(5)
    parts, lam = rng.random(3), rng.random(3)
    assert total_recon_loss(parts, *lam) == pytest.approx(float(parts @ lam), abs=1e-9)


def test_landmark_set_validation(assets):
    idx = assets.landmark_indices
    with pytest.raises(ConfigurationError):
        LandmarkSet(np.zeros((2, len(idx), 2)), np.full((2, len(idx)), 1.5), idx)
    with pytest.raises(ConfigurationError):
        LandmarkSet(np.zeros((2, 3, 2)), np.ones((2, 3)), idx)


def test_callable_detector_maps_points(assets):
    L = len(assets.landmark_indices)
    native = np.arange(2 * (L + 4), dtype=float).reshape(L + 4, 2)
    mapping = np.arange(L)[::-1] + 2
    det = CallableLandmarkDetector(lambda f: (native, np.ones(L + 4)), mapping, assets.landmark_indices)
    ls = det.detect(np.zeros((2, 8, 8, 3)))
    np.testing.assert_array_equal(ls.points[1], native[mapping])


# --- descent --------------------------------------------------------------

def test_descend_quadratic_and_monotone():
    x = torch.tensor([3.0, -2.0], dtype=torch.float64, requires_grad=True)
    res = descend([x], lambda: ((x - 1.0) ** 2).sum() + 0.1 * torch.sin(5 * x).sum(), 0.3, 300)
    assert np.all(np.diff(res.history) <= 1e-12)
    assert res.history[-1] < res.history[0]


def test_descend_nan_reports_divergence():
    x = torch.tensor([1.0], dtype=torch.float64, requires_grad=True)
    res = descend([x], lambda: torch.log(x).sum() * 0 + (x ** 2).sum() / (x - 1.0).abs().clamp_min(0) * 0
                  + torch.sqrt(x - 2.0).sum(), 0.1, 10)
    assert res.diverged
    assert x.item() == 1.0


# --- stage 1 --------------------------------------------------------------

def test_stage1_oracle_and_errors(assets, clip):
    fz = fit_stage1(clip.frames[0], OracleShapeBackend(clip.identity.shape), assets.n_shape)
    np.testing.assert_array_equal(fz.shape.numpy(), clip.identity.shape)
    with pytest.raises(ConfigurationError):
        fit_stage1(clip.frames[0], OracleShapeBackend(np.zeros(3)), assets.n_shape)

    class Broken:
        def estimate_shape(self, frame, landmarks=None):
            raise OSError("model weights missing")

    with pytest.raises(ReconstructionError, match="model weights"):
        fit_stage1(clip.frames[0], Broken(), assets.n_shape)


def test_stage1_regression_distinct(assets):
    backend = LandmarkRegressionShapeBackend(assets)
    out = []
    for seed in (2, 3):
        c = make_clip(assets, make_identity(assets, seed), 1, RES, seed=seed, head_motion=0.0)
        lm = OracleLandmarkDetector(c.params, assets).detect(c.frames)
        out.append(fit_stage1(c.frames[0], backend, assets.n_shape, lm.points[0]).shape.numpy())
    assert np.abs(out[0] - out[1]).max() > 1e-3


# --- stage 2 --------------------------------------------------------------

def test_stage2_fixed_point(assets, clip):
    p = clip.params[0]
    lm = OracleLandmarkDetector(clip.params, assets).detect(clip.frames)
    cfg = ReconConfig(lambda_reg=0.0, iters_stage2=20, stage2_frames=3)
    sample = np.array([0, 4, 8])
    frames = render_frames(assets, clip.params, quantize=False)
    fz, res, _ = fit_stage2(frames, lm, gt_frozen(p), assets, p.camera, cfg,
                            texture_init=p.texture, sample=sample, frame_init=clip.params)
    assert res.history[0] < 1e-6
    assert res.history[-1] == res.history[0]
    np.testing.assert_allclose(fz.texture.numpy(), p.texture.numpy(), atol=1e-8)
    np.testing.assert_allclose(fz.camera.intrinsics.numpy(), p.camera.intrinsics.numpy(), atol=1e-8)
    np.testing.assert_allclose(fz.camera.rotation.numpy(), p.camera.rotation.numpy(), atol=1e-8)


def test_stage2_perturbed_texture_improves(assets, clip):
    p = clip.params[0]
    lm = OracleLandmarkDetector(clip.params, assets).detect(clip.frames)
    cfg = ReconConfig(iters_stage2=40, stage2_frames=3)
    noisy = p.texture + torch.tensor(np.random.default_rng(6).normal(scale=0.5, size=assets.n_texture))
    fz, res, sample = fit_stage2(clip.frames, lm, gt_frozen(p), assets, p.camera, cfg,
                                 texture_init=noisy, lighting_init=p.lighting)
    assert res.history[-1] < res.history[0]
    assert np.all(np.diff(res.history) <= 1e-6)
    assert (fz.texture - p.texture).abs().sum() < (noisy - p.texture).abs().sum()


def test_stage2_single_frame_warns(assets, clip):
    p = clip.params[0]
    lm = OracleLandmarkDetector(clip.params[:1], assets).detect(clip.frames[:1])
    with pytest.warns(RuntimeWarning, match="single frame"):
        fit_stage2(clip.frames[:1], lm, gt_frozen(p), assets, p.camera, ReconConfig(iters_stage2=3))


# --- stage 3 --------------------------------------------------------------

def test_stage3_static_video(assets, clip):
    p = clip.params[3]
    frames = np.repeat(clip.frames[3:4], 3, axis=0)
    lm = OracleLandmarkDetector([p] * 3, assets).detect(frames)
    seq = fit_stage3(frames, lm, gt_frozen(p), assets)
    for q in seq.frames[1:]:
        for k in ("expression", "jaw", "global_rotation", "lighting"):
            np.testing.assert_allclose(getattr(q, k).numpy(), getattr(seq.frames[0], k).numpy(), atol=1e-4)


def test_stage3_jaw_ramp(assets, clip):
    base = clip.params[0].replace(expression=torch.zeros(assets.n_expression, dtype=torch.float64),
                                  global_rotation=torch.zeros(3, dtype=torch.float64),
                                  global_translation=torch.zeros(3, dtype=torch.float64))
    ramp = np.linspace(0.02, 0.4, 6)
    params = [base.replace(jaw=torch.tensor([j])) for j in ramp]
    frames = render_frames(assets, params)
    lm = OracleLandmarkDetector(params, assets).detect(frames)
    seq = fit_stage3(frames, lm, gt_frozen(base), assets)
    jaw = seq.jaw_array()[:, 0]
    assert np.all(np.diff(jaw) > 0), jaw


def test_stage3_one_frame(assets, clip):
    p = clip.params[0]
    lm = OracleLandmarkDetector(clip.params[:1], assets).detect(clip.frames[:1])
    seq = fit_stage3(clip.frames[:1], lm, gt_frozen(p), assets, ReconConfig(iters_stage3=5))
    assert len(seq) == 1


def test_stage3_requires_stage2(assets, clip):
    lm = OracleLandmarkDetector(clip.params[:1], assets).detect(clip.frames[:1])
    with pytest.raises(ConfigurationError):
        fit_stage3(clip.frames[:1], lm, FrozenBlock(shape=clip.params[0].shape), assets)


def test_stage3_divergence_marks_degraded(assets, clip, monkeypatch):
    import priordub.reconstruction as rec

    p = clip.params[0]
    lm = OracleLandmarkDetector(clip.params[:3], assets).detect(clip.frames[:3])
    real = rec.fit_frame
    calls = []

    def flaky(*a, **k):
        calls.append(1)
        fitted, r = real(*a, **k)
        if len(calls) == 2:
            r.diverged = True
        return fitted, r

    monkeypatch.setattr(rec, "fit_frame", flaky)
    seq = fit_stage3(clip.frames[:3], lm, gt_frozen(p), assets, ReconConfig(iters_stage3=10))
    assert seq.degraded.tolist() == [False, True, False]
    np.testing.assert_array_equal(seq.frames[1].expression.numpy(), seq.frames[0].expression.numpy())


# --- invariants -----------------------------------------------------------

def test_frozen_block_bit_identical(tracked):
    f0 = tracked.frames[0]
    for q in tracked.frames:
        assert torch.equal(q.shape, f0.shape) and torch.equal(q.texture, f0.texture)
        assert torch.equal(q.camera.intrinsics, f0.camera.intrinsics)
        assert torch.equal(q.camera.rotation, f0.camera.rotation)


def test_expression_gradient_matches_fd(assets, clip):
    # a close camera so the face fills the frame and no silhouette edge moves
    cam = Camera.default(RES, focal_scale=7.0)
    p = clip.params[2].replace(camera=cam)
    target = render_frames(assets, [p], quantize=False)[0]
    lm = OracleLandmarkDetector([p], assets).detect(target[None])
    rng = np.random.default_rng(7)
    psi0 = p.expression + torch.tensor(rng.normal(scale=0.3, size=assets.n_expression))
    cfg = ReconConfig()

    def f(psi):
        return frame_objective(p.replace(expression=psi), assets, target, lm.points[0], lm.confidence[0], cfg)[0]

    psi = psi0.clone().requires_grad_(True)
    (g,) = torch.autograd.grad(f(psi), psi)
    h = 1e-6
    fd = np.array([(f(psi0 + h * e).item() - f(psi0 - h * e).item()) / (2 * h)
                   for e in torch.eye(assets.n_expression, dtype=torch.float64)])
    rel = np.linalg.norm(g.numpy() - fd) / np.linalg.norm(fd)
    assert rel < 1e-3


def test_warm_start_not_slower(assets, clip, tracked):
    fz = tracked.frozen
    lm = OracleLandmarkDetector(clip.params, assets).detect(clip.frames)
    cfg = ReconConfig()
    warm, cold = [], []
    for t in range(1, 7):
        args = (clip.frames[t], lm.points[t], lm.confidence[t])
        thr = 1.2 * tracked.residuals[t]
        _, rw = fit_frame(*args, tracked.frames[t - 1], assets, cfg, threshold=thr)
        _, rc = fit_frame(*args, neutral_init(fz, assets), assets, cfg, threshold=thr)
        warm.append(rw.iterations)
        cold.append(rc.iterations)
    assert np.median(warm) <= np.median(cold)


def test_round_trip_below_noise_floor(assets, clip, tracked):
    # noise floor: 8-bit quantisation of the frames plus a 1% intensity jitter
    floor = 1.0 / 255 + 0.01
    with torch.no_grad():
        for t in range(len(clip)):
            img, ras = render(tracked.frames[t], assets, RES)
            assert photometric_loss(img, clip.frames[t], ras.coverage).item() < floor


def test_tracked_jsonl_round_trip(tracked, tmp_path):
    path = tmp_path / "track.jsonl"
    tracked.save(path)
    back = TrackedSequence.load(path)
    assert len(back) == len(tracked)
    np.testing.assert_array_equal(back.jaw_array(), tracked.jaw_array())
    np.testing.assert_array_equal(back.expression_array(), tracked.expression_array())
    np.testing.assert_array_equal(back.residuals, tracked.residuals)
    assert torch.equal(back.frames[0].camera.intrinsics, tracked.frames[0].camera.intrinsics)
    assert back.frozen.stages == tracked.frozen.stages


def test_track_video_rejects_bad_input(assets):
    with pytest.raises(ConfigurationError):
        track_video(np.zeros((0, 8, 8, 3)), assets, None, None)
