import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from priordub.face_model import (
    Camera, ConfigurationError, FaceModelAssets, FaceParams, LABEL_LOWER, LABEL_MOUTH, LABEL_OTHER,
    compute_vertices, make_synthetic_assets, project, rasterize,
)
from priordub.preprocessing import (
    CropError, CropSpec, RegionMasks, build_region_weights, crop_frames, jaw_sweep_bbox,
    rasterize_region_masks, sequence_masks, square_box, uncrop,
)
from priordub.synthetic import make_clip, make_identity

SRC = 96


@pytest.fixture(scope="module")
def assets():
    return make_synthetic_assets(0, V=256)


@pytest.fixture(scope="module")
def talking(assets):
    return make_clip(assets, make_identity(assets, 4), 10, SRC, seed=4, head_motion=0.0)


def quad_assets(labels):
    verts = np.array([[-2.0, -2.0, 0.0], [2.0, -2.0, 0.0], [2.0, 2.0, 0.0], [-2.0, 2.0, 0.0]])
    z = lambda *s: np.zeros(s)
    return FaceModelAssets(
        template_vertices=verts, faces=np.array([[0, 1, 2], [0, 2, 3]]), shape_basis=z(4, 3, 1),
        expression_basis=z(4, 3, 1), skinning_weights=np.tile([1.0, 0.0, 0.0], (4, 1)),
        joint_regressor=np.full((3, 4), 0.25), uv_coords=np.array([[0, 1], [1, 1], [1, 0], [0, 0.0]]),
        texture_mean=np.full((4, 3), 0.5), texture_basis=z(4, 3, 1), landmark_indices=np.array([0]),
        region_labels=labels)


# --- crop box -------------------------------------------------------------

def test_box_margin_zero_single_frame_oracle(assets, talking):
    p = talking.params[3]
    spec = jaw_sweep_bbox([p], assets, (SRC, SRC), margin=0.0)
    pts = []
    for j in assets.jaw_range:
        mesh = compute_vertices(p.replace(jaw=torch.tensor([j], dtype=torch.float64)), assets)
        used = np.unique(assets.faces)
        px, _ = project(mesh.vertices[used], p.camera)
        pts.append(px.detach().numpy())
    pts = np.concatenate(pts)
    np.testing.assert_allclose(spec.raw_box, [pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max()],
                               atol=1e-9)


def test_box_independent_of_tracked_jaw(assets, talking):
    p = talking.params[0]
    closed = [p.replace(jaw=torch.tensor([0.0], dtype=torch.float64))]
    opened = [p.replace(jaw=torch.tensor([0.5], dtype=torch.float64))]
    a = jaw_sweep_bbox(closed, assets, (SRC, SRC))
    b = jaw_sweep_bbox(opened, assets, (SRC, SRC))
    assert a.box == b.box


def test_box_constant_over_frames_and_jaw_edits(assets, talking):
    spec = jaw_sweep_bbox(talking.params, assets, (SRC, SRC))
    edited = [p.replace(jaw=torch.tensor([0.5 - float(p.jaw)], dtype=torch.float64)) for p in talking.params]
    assert jaw_sweep_bbox(edited, assets, (SRC, SRC)).box == spec.box


def test_margin_definition():
    raw = (50.0, 60.0, 70.0, 100.0)  # w = 20, h = 40
    box = square_box(raw, 0.1, 200, 200)
    # each side grows by 4 px; the 28 x 48 box is then squared to 48 about its centre
    assert box == pytest.approx((36.0, 56.0, 84.0, 104.0))
    # near the border the square is shifted inside rather than cut
    assert square_box((0.0, 60.0, 20.0, 100.0), 0.1, 200, 200) == pytest.approx((0.0, 56.0, 48.0, 104.0))


@given(st.floats(0, 90), st.floats(0, 90), st.floats(1, 60), st.floats(1, 60), st.floats(0, 0.5))
@settings(max_examples=60, deadline=None)
def test_box_square_and_inside(x0, y0, w, h, margin):
    box = square_box((x0, y0, x0 + w, y0 + h), margin, 100, 120)
    assert box[2] - box[0] == pytest.approx(box[3] - box[1])
    assert box[0] >= 0 and box[1] >= 0 and box[2] <= 120 + 1e-9 and box[3] <= 100 + 1e-9


def test_box_errors(assets, talking):
    with pytest.raises(CropError):
        jaw_sweep_bbox([], assets, (SRC, SRC))
    behind = talking.params[0].replace(camera=Camera(talking.params[0].camera.intrinsics,
                                                    torch.zeros(3, dtype=torch.float64),
                                                    torch.tensor([0.0, 0.0, -5.0], dtype=torch.float64)))
    with pytest.raises(CropError):
        jaw_sweep_bbox([behind], assets, (SRC, SRC))


def test_spec_round_trip(tmp_path, assets, talking):
    spec = jaw_sweep_bbox(talking.params, assets, (SRC, SRC), resolution=32)
    spec.save(tmp_path / "crop.json")
    assert CropSpec.load(tmp_path / "crop.json") == spec


# --- crop_frames ----------------------------------------------------------

def test_crop_identity():
    rng = np.random.default_rng(0)
    frames = rng.random((2, 12, 12, 3)).astype(np.float32)
    spec = CropSpec((0.0, 0.0, 12.0, 12.0), (0.0, 0.0, 12.0, 12.0), 0.0, 12, (12, 12))
    np.testing.assert_allclose(crop_frames(frames, spec), frames, atol=1e-6)


def test_crop_two_by_two_average():
    img = np.array([[[1.0], [2.0]], [[3.0], [6.0]]])[None]
    spec = CropSpec((0.0, 0.0, 2.0, 2.0), (0.0, 0.0, 2.0, 2.0), 0.0, 1, (2, 2))
    assert crop_frames(img, spec)[0, 0, 0, 0] == pytest.approx(3.0)


def test_crop_same_grid_for_every_frame():
    rng = np.random.default_rng(1)
    f = rng.random((20, 20, 3))
    spec = CropSpec((3.3, 2.7, 15.1, 14.5), (3.3, 2.7, 15.1, 14.5), 0.0, 7, (20, 20))
    out = crop_frames(np.stack([f, f]), spec)
    np.testing.assert_array_equal(out[0], out[1])


def test_crop_subpixel_matches_scalar_bilinear():
    rng = np.random.default_rng(2)
    f = rng.random((9, 11))
    spec = CropSpec((1.25, 2.5, 7.25, 8.5), (1.25, 2.5, 7.25, 8.5), 0.0, 4, (9, 11))
    out = crop_frames(f[None], spec)[0]
    for i in range(4):
        for j in range(4):
            x = 1.25 + (j + 0.5) * 1.5 - 0.5
            y = 2.5 + (i + 0.5) * 1.5 - 0.5
            xa, ya = int(np.floor(x)), int(np.floor(y))
            fx, fy = x - xa, y - ya
            expect = ((1 - fy) * ((1 - fx) * f[ya, xa] + fx * f[ya, xa + 1])
                      + fy * ((1 - fx) * f[ya + 1, xa] + fx * f[ya + 1, xa + 1]))
            assert out[i, j] == pytest.approx(expect, abs=1e-12)


def test_crop_degenerate_box():
    spec = CropSpec((4.0, 4.0, 4.0, 9.0), (4.0, 4.0, 4.0, 9.0), 0.0, 8, (10, 10))
    with pytest.raises(CropError):
        crop_frames(np.zeros((1, 10, 10, 3)), spec)


def test_uncrop_inverts_crop_inside_box():
    yy, xx = np.mgrid[0:40, 0:40]
    f = (0.3 * xx + 0.7 * yy)[None].astype(np.float64)  # linear, so bilinear is exact
    spec = CropSpec((8.0, 8.0, 32.0, 32.0), (8.0, 8.0, 32.0, 32.0), 0.0, 48, (40, 40))
    back, inside = uncrop(crop_frames(f, spec), spec)
    interior = inside & (xx > 9) & (xx < 30) & (yy > 9) & (yy < 30)
    np.testing.assert_allclose(back[0][interior], f[0][interior], atol=1e-9)


# --- masks ----------------------------------------------------------------

def test_masks_all_other_are_empty(assets, talking):
    m = rasterize_region_masks(talking.params[0], assets, SRC, mask_texture=np.zeros((8, 8), np.uint8))
    assert not m.mouth.any() and not m.lower.any() and m.coverage.any()


def test_full_quad_all_mouth():
    qa = quad_assets(np.full((4, 4), LABEL_MOUTH, np.uint8))
    p = FaceParams.neutral(qa, camera=Camera.default(16))
    m = rasterize_region_masks(p, qa, 16)
    assert m.coverage.all()
    np.testing.assert_array_equal(m.mouth, m.coverage)


def test_masks_match_composition_oracle(assets, talking):
    rng = np.random.default_rng(3)
    labels = rng.integers(0, 3, size=(16, 16)).astype(np.uint8)
    p = talking.params[2]
    m = rasterize_region_masks(p, assets, SRC, mask_texture=labels)
    with torch.no_grad():
        ras = rasterize(compute_vertices(p, assets), p.camera, None, SRC)
    uv = ras.uv.numpy()
    for i in range(SRC):
        for j in range(SRC):
            if not ras.coverage[i, j]:
                assert not m.mouth[i, j] and not m.lower[i, j]
                continue
            lab = labels[min(int(uv[i, j, 1] * 16), 15), min(int(uv[i, j, 0] * 16), 15)]
            assert m.mouth[i, j] == (lab == LABEL_MOUTH)
            assert m.lower[i, j] == (lab in (LABEL_MOUTH, LABEL_LOWER))


def test_masks_nest(assets, talking):
    spec = jaw_sweep_bbox(talking.params, assets, (SRC, SRC), resolution=48)
    m = sequence_masks(talking.params, assets, spec)
    assert m.mouth.shape == (10, 48, 48)
    assert not (m.mouth & ~m.lower).any()
    assert not (m.lower & ~m.coverage).any()
    assert m.mouth.any(axis=(1, 2)).all()


def test_missing_label_texture(assets, talking):
    import dataclasses

    bare = dataclasses.replace(assets, region_labels=None)
    with pytest.raises(ConfigurationError):
        rasterize_region_masks(talking.params[0], bare, 16)


# --- weights --------------------------------------------------------------

def test_weights_examples():
    z = np.zeros((5, 5), bool)
    np.testing.assert_array_equal(build_region_weights(RegionMasks(z, z, z)), np.ones((5, 5)))
    one = z.copy()
    one[2, 2] = True
    w = build_region_weights(RegionMasks(one, one, one))
    assert w[2, 2] == 10.0


def test_weights_loop_oracle():
    rng = np.random.default_rng(4)
    mouth, lower = rng.random((6, 7)) > 0.6, rng.random((6, 7)) > 0.5
    w = build_region_weights(RegionMasks(mouth, lower, np.ones((6, 7), bool)))
    for i in range(6):
        for j in range(7):
            expect = 10.0 if mouth[i, j] else (8.0 if lower[i, j] else 1.0)
            assert w[i, j] == expect
    assert set(np.unique(w)) <= {1.0, 8.0, 10.0}
