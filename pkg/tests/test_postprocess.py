import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from priordub.postprocess import (
    BackgroundDifferenceSegmenter, CoverageSegmenter, clean_frame, composite_background, paste_back,
    segment_foreground,
)
from priordub.preprocessing import CropSpec, crop_frames


def rand_case(rng, h=7, w=9):
    return rng.random((h, w, 3)), rng.random((h, w, 3)), rng.random((h, w)) > 0.5, rng.random((h, w)) > 0.5


# --- segmentation -----------------------------------------------------------

def test_coverage_double():
    rng = np.random.default_rng(0)
    cov = rng.random((6, 8))
    m = segment_foreground(rng.random((6, 8, 3)), CoverageSegmenter(cov))
    assert m.dtype == bool
    np.testing.assert_array_equal(m, cov >= 0.5)
    assert not segment_foreground(np.zeros((6, 8, 3)), CoverageSegmenter(np.zeros((6, 8)))).any()


def test_background_difference_double():
    bg = np.full((5, 5, 3), 0.2)
    frame = bg.copy()
    frame[1:3, 2] = 0.9
    m = segment_foreground(frame, BackgroundDifferenceSegmenter(bg))
    assert m.sum() == 2 and m[1, 2] and m[2, 2]
    assert set(np.unique(m)) <= {False, True}


def test_segmenter_failure_keeps_generated():
    rng = np.random.default_rng(1)
    g, r, _, _ = rand_case(rng)

    def broken(frame):
        raise RuntimeError("no model")

    with pytest.warns(RuntimeWarning):
        assert segment_foreground(g, broken) is None
    with pytest.warns(RuntimeWarning):
        out = clean_frame(g, r, broken, broken)
    np.testing.assert_array_equal(out, g)
    with pytest.warns(RuntimeWarning):
        assert segment_foreground(g, lambda f: np.zeros((2, 2))) is None


# --- compositing ------------------------------------------------------------

def test_composite_extremes():
    rng = np.random.default_rng(2)
    g, r, _, _ = rand_case(rng)
    z = np.zeros(g.shape[:2], bool)
    np.testing.assert_array_equal(composite_background(g, r, z, z), r)
    m = rng.random(g.shape[:2]) > 0.5
    np.testing.assert_array_equal(composite_background(g, r, m, ~m), g)


def test_composite_loop_oracle_and_idempotence():
    rng = np.random.default_rng(3)
    for _ in range(200):
        h, w = rng.integers(1, 8, size=2)
        g, r, gm, rm = rand_case(rng, h, w)
        out = composite_background(g, r, gm, rm)
        for i in range(h):
            for j in range(w):
                expect = r[i, j] if (not gm[i, j] and not rm[i, j]) else g[i, j]
                assert (out[i, j] == expect).all()
        np.testing.assert_array_equal(composite_background(out, r, gm, rm), out)


@given(st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_composite_changes_only_agreed_background(seed):
    rng = np.random.default_rng(seed)
    g, r, gm, rm = rand_case(rng, 12, 10)
    changed = (composite_background(g, r, gm, rm) != g).any(-1)
    assert not (changed & (gm | rm)).any()


def test_erode_option_is_conservative():
    g, r = np.zeros((9, 9, 3)), np.ones((9, 9, 3))
    fg = np.zeros((9, 9), bool)
    fg[3:6, 3:6] = True
    plain = composite_background(g, r, fg, fg)
    eroded = composite_background(g, r, fg, fg, erode=True)
    assert plain[2, 4].all() == 1 and (eroded[2, 4] == 0).all()
    assert (eroded[0, 0] == 1).all()  # frame border is not eroded away
    keep = (eroded == g).all(-1)
    assert keep.sum() == 25


# --- paste back -------------------------------------------------------------

def test_paste_own_crop_is_exact_at_equal_resolution():
    rng = np.random.default_rng(4)
    src = rng.random((2, 20, 24, 3))
    spec = CropSpec((5.0, 3.0, 15.0, 13.0), (5.0, 3.0, 15.0, 13.0), 0.0, 10, (20, 24))
    out = paste_back(crop_frames(src, spec), src, spec)
    np.testing.assert_allclose(out, src, atol=1e-12)


def test_paste_only_touches_box_and_is_idempotent():
    rng = np.random.default_rng(5)
    src = rng.random((20, 24, 3))
    spec = CropSpec((5.5, 2.5, 17.5, 14.5), (5.5, 2.5, 17.5, 14.5), 0.0, 16, (20, 24))
    crop = rng.random((16, 16, 3))
    once = paste_back(crop, src, spec)
    outside = np.ones((20, 24), bool)
    outside[2:15, 5:18] = False
    np.testing.assert_array_equal(once[outside], src[outside])
    assert not np.allclose(once[5:12, 8:15], src[5:12, 8:15])
    np.testing.assert_array_equal(paste_back(crop, once, spec), once)


def test_paste_box_partly_outside_frame():
    rng = np.random.default_rng(6)
    src = rng.random((10, 10, 3))
    spec = CropSpec((-4.0, 6.0, 4.0, 14.0), (-4.0, 6.0, 4.0, 14.0), 0.0, 8, (10, 10))
    out = paste_back(np.zeros((8, 8, 3)), src, spec)
    assert (out[6:, :4] == 0).all()
    np.testing.assert_array_equal(out[:6], src[:6])
    np.testing.assert_array_equal(out[:, 4:], src[:, 4:])
    with pytest.raises(ValueError):
        paste_back(np.zeros((8, 8, 3)), np.zeros((11, 10, 3)), spec)
