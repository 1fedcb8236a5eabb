"""Acceptance gate: one test per criterion, each tagged so the run ends with a
pass/fail line per criterion (see conftest.py).

Criteria 4 and 5 share one synthetic population and take about 45 minutes
on one CPU core; everything else finishes in seconds.
"""
import math
import subprocess
import time
import warnings

import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

from priordub.audio2expr import ExpressionTrack, apply_calibration, fit_calibration
from priordub.evaluation import (
    UNREACHED, RandomProjectionFeatures, dataset_size_sweep, fid, iterations_to_psnr, psnr, ssim, sweep_summary,
)
from priordub.face_model import (
    Camera, FaceParams, make_synthetic_assets, model_vertices, project, render, shade_sh,
    unproject,
)
from priordub.neural_rendering import sample_texture
from priordub.postprocess import composite_background
from priordub.preprocessing import crop_frames, jaw_sweep_bbox
from priordub.reconstruction import photometric_loss, total_recon_loss
from priordub.synthetic import make_clip, make_identity
from priordub.training import (
    LossWeights, WindowRef, lsgan_losses, mixed_batch_sampler, texture_reg, total_loss, weighted_l1,
)

criterion = pytest.mark.criterion


@pytest.fixture(scope="module")
def assets():
    return make_synthetic_assets(0, V=256)


def _close(got, want, tol=1e-6):
    return abs(float(got) - float(want)) <= tol


# ---------------------------------------------------------------------------
# 1. loss oracles
# ---------------------------------------------------------------------------

@criterion(1, "loss oracles")
def test_c01_loss_oracles():
    rng = np.random.default_rng(101)
    t0 = time.time()
    for _ in range(100):
        F, H, W = (int(x) for x in rng.integers(1, 4, 3))
        p, t = rng.random((F, 3, H, W)), rng.random((F, 3, H, W))
        w = rng.choice([1.0, 8.0, 10.0], size=(F, H, W))
        per = [sum(w[f, i, j] * abs(p[f, c, i, j] - t[f, c, i, j]) for c in range(3) for i in range(H)
                   for j in range(W)) / sum(3 * w[f, i, j] for i in range(H) for j in range(W)) for f in range(F)]
        assert _close(weighted_l1(torch.tensor(p), torch.tensor(t), torch.tensor(w)), sum(per) / F)

        C = int(rng.integers(3, 6))
        s, tgt = rng.random((H, W, C)), rng.random((H, W, 3))
        cov = rng.random((H, W)) > 0.3
        cov[0, 0] = True
        vals = [abs(s[i, j, c] - tgt[i, j, c]) for i in range(H) for j in range(W) if cov[i, j] for c in range(3)]
        assert _close(texture_reg(torch.tensor(s), cov, tgt), sum(vals) / len(vals))

        real, fake = rng.normal(size=(F, 4)), rng.normal(size=(F, 4))
        d = lsgan_losses(torch.tensor(real), torch.tensor(fake))
        r_ = [x for x in real.ravel()]
        f_ = [x for x in fake.ravel()]
        assert _close(d["disc_loss"], 0.5 * sum((x - 1) ** 2 for x in r_) / len(r_) + 0.5 * sum(x * x for x in f_) / len(f_))
        assert _close(d["gen_loss"], 0.5 * sum((x - 1) ** 2 for x in f_) / len(f_))

        parts = {k: float(v) for k, v in zip(("l1", "vgg", "reg", "adv"), rng.random(4))}
        lw = rng.random(4) * 10
        expect = sum(a * parts[k] for a, k in zip(lw, ("l1", "vgg", "reg", "adv")))
        assert _close(total_loss(parts, LossWeights(*lw)), expect)

        rp, lam = rng.random(3), rng.random(3) * 5
        assert _close(total_recon_loss(tuple(rp), *lam), rp[0] * lam[0] + rp[1] * lam[1] + rp[2] * lam[2])
    assert time.time() - t0 < 60


# ---------------------------------------------------------------------------
# 2. gradients
# ---------------------------------------------------------------------------

def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


@criterion(2, "finite-difference gradients")
def test_c02_texture_sampling_gradient():
    rng = np.random.default_rng(202)
    tex = torch.tensor(rng.random((8, 8, 4)), requires_grad=True)
    # keep lookups away from texel-centre lines where bilinear weights kink
    cells = rng.integers(0, 7, size=(6, 6, 2))
    uv = torch.tensor((cells + 0.5 + rng.uniform(0.1, 0.9, size=(6, 6, 2))) / 8, requires_grad=True)
    cov = torch.tensor(rng.random((6, 6)) > 0.2)
    wts = torch.tensor(rng.normal(size=(6, 6, 4)))
    f = lambda t, u: (sample_texture(t, u, cov) * wts).sum()
    gt, gu = torch.autograd.grad(f(tex, uv), (tex, uv))
    h = 1e-6
    hit = torch.nonzero(gt.abs() > 1e-8)
    for k in rng.choice(len(hit), 20, replace=False):
        idx = tuple(hit[k].tolist())
        e = torch.zeros_like(tex)
        e[idx] = h
        fd = (f(tex.detach() + e, uv.detach()) - f(tex.detach() - e, uv.detach())).item() / (2 * h)
        assert _rel(fd, gt[idx].item()) < 1e-3
    covered = torch.nonzero(cov)
    for k in rng.choice(len(covered), 20, replace=False):
        i, j = covered[k].tolist()
        c = int(rng.integers(0, 2))
        e = torch.zeros_like(uv)
        e[i, j, c] = h
        fd = (f(tex.detach(), uv.detach() + e) - f(tex.detach(), uv.detach() - e)).item() / (2 * h)
        assert _rel(fd, gu[i, j, c].item()) < 1e-3


@criterion(2, "finite-difference gradients")
def test_c02_photometric_gradient_wrt_expression(assets):
    rng = np.random.default_rng(203)
    cam = Camera.default(24, focal_scale=7.0)  # face fills the frame; no silhouette crosses a pixel centre
    base = FaceParams.neutral(assets, camera=cam)
    n = assets.n_expression
    passed = 0
    for _ in range(20):
        target_p = base.replace(expression=torch.tensor(rng.normal(scale=0.3, size=n)))
        with torch.no_grad():
            target = render(target_p, assets, 24)[0].numpy()
        psi0 = torch.tensor(rng.normal(scale=0.3, size=n))
        d = torch.tensor(rng.normal(size=n))
        d /= d.norm()

        def f(psi):
            img, ras = render(base.replace(expression=psi), assets, 24)
            return photometric_loss(img, target, ras.coverage)

        psi = psi0.clone().requires_grad_(True)
        (g,) = torch.autograd.grad(f(psi), psi)
        h = 1e-6
        fd = (f(psi0 + h * d).item() - f(psi0 - h * d).item()) / (2 * h)
        assert _rel(fd, float(g @ d)) < 1e-3
        passed += 1
    assert passed == 20


@criterion(2, "finite-difference gradients")
def test_c02_total_loss_wrt_texels():
    from priordub.neural_rendering import Discriminator, Generator, NeuralTexture, preset
    from priordub.training import RandomConvFeatures, TrainConfig, build_identity_data, fixed_windows, window_loss

    a = make_synthetic_assets(0, V=512)
    clip = make_clip(a, make_identity(a, 5), 12, 48, seed=5)
    data = build_identity_data(clip.frames, clip.params, a, clip.audio, "id5", resolution=32)
    rc = preset("tiny")
    torch.manual_seed(0)
    gen, disc = Generator(rc).double(), Discriminator(rc).double()
    tex = {"id5": NeuralTexture(rc.texture_size, rc.channels, "id5", seed=1)}
    tex["id5"].data = torch.nn.Parameter(tex["id5"].data.detach().double())
    wins = fixed_windows(data, rc.window, rc.n_refs, 2)
    backend = RandomConvFeatures().double()
    tx = tex["id5"].data
    loss = lambda: window_loss(gen, disc, tex, wins, TrainConfig(), backend, dtype=torch.float64)[0]
    (g,) = torch.autograd.grad(loss(), tx)
    hit = torch.nonzero(g.abs().sum(-1) > 1e-6)
    rng = np.random.default_rng(204)
    h = 1e-6
    for k in rng.choice(len(hit), 20, replace=False):
        i, j = hit[k].tolist()
        c = int(rng.integers(0, rc.channels))
        with torch.no_grad():
            tx[i, j, c] += h
            up = loss().item()
            tx[i, j, c] -= 2 * h
            dn = loss().item()
            tx[i, j, c] += h
        fd = (up - dn) / (2 * h)
        assert abs(fd - g[i, j, c].item()) <= 1e-3 * max(abs(fd), 1e-4)


# ---------------------------------------------------------------------------
# 3. geometry
# ---------------------------------------------------------------------------

@criterion(3, "geometry identities")
def test_c03_blendshape_affinity(assets):
    rng = np.random.default_rng(301)
    base = FaceParams.neutral(assets)
    T = np.asarray(assets.template_vertices)
    S, E = np.asarray(assets.shape_basis), np.asarray(assets.expression_basis)
    for _ in range(10):
        a, e = rng.normal(size=assets.n_shape), rng.normal(size=assets.n_expression)
        v = model_vertices(base.replace(shape=torch.tensor(a), expression=torch.tensor(e)), assets).numpy()
        # zero pose: plain linear blend of template and bases
        np.testing.assert_allclose(v, T + S @ a + E @ e, atol=1e-9)
        a2, e2, lam = rng.normal(size=assets.n_shape), rng.normal(size=assets.n_expression), rng.uniform(-1, 2)
        mix = model_vertices(base.replace(shape=torch.tensor(lam * a + (1 - lam) * a2),
                                          expression=torch.tensor(lam * e + (1 - lam) * e2)), assets).numpy()
        v2 = model_vertices(base.replace(shape=torch.tensor(a2), expression=torch.tensor(e2)), assets).numpy()
        np.testing.assert_allclose(mix, lam * v + (1 - lam) * v2, atol=1e-9)


@criterion(3, "geometry identities")
def test_c03_projection_identities():
    rng = np.random.default_rng(302)
    cam = Camera(torch.tensor([90.0, 110.0, 31.5, 40.0], dtype=torch.float64), torch.zeros(3, dtype=torch.float64),
                 torch.zeros(3, dtype=torch.float64))
    pts = torch.tensor(np.c_[rng.normal(size=(50, 2)), rng.uniform(1, 5, 50)])
    px, valid = project(pts, cam)
    assert valid.all()
    # pinhole formula, then the ray back through the pixel recovers the point
    fx, fy, cx, cy = cam.intrinsics.numpy()
    p = pts.numpy()
    np.testing.assert_allclose(px.numpy(), np.c_[fx * p[:, 0] / p[:, 2] + cx, fy * p[:, 1] / p[:, 2] + cy], atol=1e-9)
    rays = unproject(px, cam).numpy()
    np.testing.assert_allclose(rays * (p[:, 2] / rays[:, 2])[:, None], p, atol=1e-9)
    # principal point is the optical axis; depth scaling leaves pixels fixed
    axis, _ = project(torch.tensor([[0.0, 0.0, 2.0]], dtype=torch.float64), cam)
    np.testing.assert_allclose(axis.numpy(), [[cx, cy]])
    np.testing.assert_allclose(project(pts * 3.7, cam)[0].numpy(), px.numpy(), atol=1e-9)
    assert not project(torch.tensor([[0.0, 0.0, -1.0]], dtype=torch.float64), cam)[1].any()
    # extrinsics follow scipy's rotation convention
    rot = rng.normal(size=3)
    cam2 = Camera(cam.intrinsics, torch.tensor(rot), torch.tensor([0.1, -0.2, 4.0], dtype=torch.float64))
    from priordub.face_model import project_model_points

    got, ok = project_model_points(pts, cam2)
    q = Rotation.from_rotvec(rot).apply(p) + [0.1, -0.2, 4.0]
    assert ok.numpy().tolist() == (q[:, 2] > 0).tolist()
    q = q[q[:, 2] > 0]
    np.testing.assert_allclose(got[ok].numpy(), np.c_[fx * q[:, 0] / q[:, 2] + cx, fy * q[:, 1] / q[:, 2] + cy],
                               atol=1e-8)


@criterion(3, "geometry identities")
def test_c03_sh_linearity():
    rng = np.random.default_rng(303)
    n = torch.tensor(rng.normal(size=(40, 3)))
    n = n / n.norm(dim=-1, keepdim=True)
    alb = torch.tensor(rng.random((40, 3)))
    for _ in range(10):
        l1, l2 = torch.tensor(rng.normal(size=9)), torch.tensor(rng.normal(size=9))
        a, b = rng.normal(size=2)
        np.testing.assert_allclose(shade_sh(n, alb, a * l1 + b * l2).numpy(),
                                   (a * shade_sh(n, alb, l1) + b * shade_sh(n, alb, l2)).numpy(), atol=1e-12)
    # ambient-only lighting gives albedo times the constant band
    amb = torch.zeros(9, dtype=torch.float64)
    amb[0] = 1.0
    np.testing.assert_allclose(shade_sh(n, alb, amb).numpy(), alb.numpy() * 0.28209479177387814, atol=1e-12)


@criterion(3, "geometry identities")
def test_c03_jaw_sweep_box_and_zero_jitter(assets):
    clip = make_clip(assets, make_identity(assets, 6), 12, 48, seed=6)
    spec = jaw_sweep_bbox(clip.params, assets, (48, 48))
    lo, hi = assets.jaw_range
    for j in (lo, hi):
        pinned = [p.replace(jaw=torch.tensor([j], dtype=torch.float64)) for p in clip.params]
        assert jaw_sweep_bbox(pinned, assets, (48, 48)).box == spec.box  # 0 px shift
    # one box for all frames: a coordinate image crops identically everywhere
    yy, xx = np.mgrid[0:48, 0:48].astype(np.float64)
    coords = np.repeat(np.stack([xx, yy, np.zeros_like(xx)], -1)[None], len(clip), axis=0)
    crops = crop_frames(coords, spec)
    assert np.abs(np.diff(crops, axis=0)).max() == 0.0


# ---------------------------------------------------------------------------
# 4 and 5. prior versus scratch
# ---------------------------------------------------------------------------

SEEDS = (0, 1, 2)
THRESHOLDS = (20.0, 22.0, 24.0, 26.0, 28.0, 30.0, 32.0)


@pytest.fixture(scope="module")
def population():
    from priordub.benchmark import BenchmarkSetup, build_population

    return build_population(BenchmarkSetup())


@criterion(4, "adaptation speedup >= 3x")
def test_c04_adaptation_speedup(population):
    from priordub.benchmark import speedup_benchmark

    t0 = time.time()
    res = speedup_benchmark(population, THRESHOLDS, iterations=1000, seeds=SEEDS, val_every=5)
    for t, row in res["median"].items():
        print(f"  {t:g} dB: prior {row['ours']}  scratch {row['scratch']}  median speedup {row['speedup']:.1f}")
    assert len(res["reachable"]) >= 3
    assert all(row["speedup"] >= 3.0 for row in res["median"].values())
    assert time.time() - t0 + population.seconds["prior"] < 3600


@criterion(5, "few-shot FID trend")
def test_c05_few_shot_fid(population):
    from priordub.benchmark import few_shot_run

    t0 = time.time()
    recs = dataset_size_sweep(few_shot_run(population, iterations=2000), sizes=(25, 100, 500), seeds=SEEDS)
    rows = {r["size"]: r for r in sweep_summary(recs)}
    for s, r in rows.items():
        print(f"  {s} frames: FID adapted {r['fid_adapted']:.4f}  scratch {r['fid_scratch']:.4f}")
    gap = {s: rows[s]["fid_scratch"] - rows[s]["fid_adapted"] for s in rows}
    assert rows[25]["fid_adapted"] < rows[25]["fid_scratch"]
    assert rows[100]["fid_adapted"] < rows[100]["fid_scratch"]
    assert gap[25] > gap[500]
    assert time.time() - t0 < 5400


# ---------------------------------------------------------------------------
# 6-8. postprocess, sampler, calibration
# ---------------------------------------------------------------------------

@criterion(6, "background composite bit-exact")
def test_c06_composite_oracle():
    rng = np.random.default_rng(601)
    for _ in range(1000):
        h, w = (int(x) for x in rng.integers(1, 10, 2))
        g, r = rng.random((h, w, 3)), rng.random((h, w, 3))
        gm, rm = rng.random((h, w)) > 0.5, rng.random((h, w)) > 0.5
        out = composite_background(g, r, gm, rm)
        expect = np.empty_like(g)
        for i in range(h):
            for j in range(w):
                expect[i, j] = r[i, j] if (not gm[i, j] and not rm[i, j]) else g[i, j]
        assert np.array_equal(out, expect)
        assert np.array_equal(composite_background(out, r, gm, rm), out)


@criterion(7, "1:1 sampler")
def test_c07_sampler():
    spec = [WindowRef("actor", i) for i in range(17)]
    gen = [WindowRef(f"g{k}", i) for k in range(8) for i in range(5)]
    it = mixed_batch_sampler(spec, gen, 8, seed=7)
    for _ in range(1000):
        b = next(it)
        assert b.provenance.count("specific") == 4 and b.provenance.count("generic") == 4
        assert sum(r.identity_id == "actor" for r in b.items) == 4


@criterion(8, "calibration recovery")
def test_c08_calibration():
    rng = np.random.default_rng(801)
    ne = 10
    p = rng.normal(size=(80, ne + 1))
    a, b = rng.uniform(-3, 3, ne + 1), rng.uniform(-1, 1, ne + 1)
    pred = ExpressionTrack.from_stacked(p, ne)
    c = fit_calibration(pred, ExpressionTrack.from_stacked(a * p + b, ne, source="tracked"))
    assert np.abs(c.gain - a).max() < 1e-6 and np.abs(c.offset - b).max() < 1e-6
    assert not c.degenerate.any()
    np.testing.assert_allclose(apply_calibration(pred, c).stacked(), a * p + b, atol=1e-6)
    q = p.copy()
    q[:, 4] = -0.2
    t = a * q + b
    t[:, 4] = rng.normal(size=80)
    with pytest.warns(RuntimeWarning):
        c = fit_calibration(ExpressionTrack.from_stacked(q, ne), ExpressionTrack.from_stacked(t, ne, source="tracked"))
    assert c.degenerate.tolist() == [k == 4 for k in range(ne + 1)]
    assert c.gain[4] == 1.0 and abs(c.offset[4] - np.mean(t[:, 4] + 0.2)) < 1e-9
    mask = np.arange(ne + 1) != 4
    assert np.abs(c.gain[mask] - a[mask]).max() < 1e-6


# ---------------------------------------------------------------------------
# 9. end to end
# ---------------------------------------------------------------------------

@criterion(9, "end-to-end 100-frame dub")
def test_c09_end_to_end(tmp_path):
    import json
    import shutil

    from priordub.video import count_frames, read_video

    exe = shutil.which("priordub")
    assert exe, "console script not installed"
    t0 = time.time()
    cfg = tmp_path / "run.ini"
    # the untrained baseline is what adaptation starts from; no prior in this project
    cfg.write_text("[track]\nworking_resolution = 32\n[train]\niterations = 300\n[adapt]\nfrom_scratch = true\n")
    proj = tmp_path / "actor"
    base = [exe, "-p", str(proj), "--config", str(cfg)]
    steps = [[exe, "synth", str(tmp_path / "clip.avi"), "--frames", "100", "--resolution", "64"],
             base + ["ingest", str(tmp_path / "clip.avi")], base + ["track"], base + ["preprocess"],
             base + ["adapt"], base + ["dub"], base + ["postprocess"],
             base + ["evaluate"]]
    for cmd in steps:
        proc = subprocess.run(cmd, capture_output=True, text=True)
        assert proc.returncode == 0, (cmd, proc.stderr)
    video = proj / "identities" / "actor" / "dubs" / "self" / "dubbed.mp4"
    frames, fps = read_video(video)
    assert len(frames) == 100 and count_frames(video) == 100 and fps == pytest.approx(25.0)
    m = json.loads((proj / "identities" / "actor" / "evaluation" / "metrics.json").read_text())
    print(f"  held-out weighted L1 {m['weighted_l1']:.4f} vs untrained {m['baseline_weighted_l1']:.4f}")
    assert m["weighted_l1"] <= 0.5 * m["baseline_weighted_l1"]
    assert time.time() - t0 < 20 * 60


# ---------------------------------------------------------------------------
# 10. metrics
# ---------------------------------------------------------------------------

@criterion(10, "metric sanity")
def test_c10_metric_sanity():
    rng = np.random.default_rng(1001)
    img = rng.random((6, 32, 32, 3))
    assert psnr(img, img) == 100.0
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        imgs = rng.random((40, 16, 16, 3))
        assert fid(imgs, imgs, RandomProjectionFeatures(dim=8)) < 1e-3
    for _ in range(20):
        its = np.sort(rng.choice(np.arange(1, 3000), 150, replace=False))
        vals = 34 * (1 - np.exp(-its / rng.uniform(100, 1500))) + rng.normal(0, 0.4, its.size)
        log = [{"iteration": int(i), "val_psnr": float(v)} for i, v in zip(its, vals)]
        th = [18, 22, 26, 30, 33, 40]
        got = iterations_to_psnr(log, th, round_to=100)
        for t in th:
            first = next((int(i) for i, v in zip(its, vals) if v >= t), None)
            want = UNREACHED if first is None else int(math.floor(first / 100 + 0.5)) * 100
            assert got[t] == want
