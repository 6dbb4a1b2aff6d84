import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dynid.data import LandmarkSequence, VideoKind
from dynid.errors import DegenerateFaceError, ShapeError, TooShortError
from dynid.features import (
    FEATURE_DIM,
    FeatureStore,
    clip_features,
    extract_cache,
    frame_feature,
    neutral_scale,
    read_feature_cache,
    sequence_features,
    write_feature_cache,
)


def _brute_feature(frame, scale):
    out = []
    for i, j in itertools.combinations(range(126), 2):
        d = frame[i] - frame[j]
        out.append(np.sqrt(d[0] ** 2 + d[1] ** 2) / scale)
    return np.array(out)


def test_feature_length(rng):
    assert FEATURE_DIM == 7875
    assert frame_feature(rng.normal(size=(126, 2)), 1.0).shape == (7875,)


def test_pair_order_matches_nested_loop(rng):
    frame = rng.uniform(0, 50, (126, 2))
    np.testing.assert_allclose(frame_feature(frame, 3.0), _brute_feature(frame, 3.0), rtol=1e-6)


def test_collinear_landmarks():
    frame = np.zeros((126, 2))
    frame[1] = (1, 0)
    frame[2] = (2, 0)
    f = frame_feature(frame, 1.0)
    # lexicographic order: (0,1) is index 0, (0,2) is 1, (1,2) is 125
    assert (f[0], f[1], f[125]) == (1.0, 2.0, 1.0)


@pytest.mark.parametrize("span,expected", [((2, 8), 4.0), ((1, 1), 1.0)])
def test_neutral_scale(span, expected, rng):
    pts = rng.uniform(0, 1, (126, 2)) * span
    pts[0] = (0, 0)
    pts[1] = span
    assert neutral_scale(pts) == pytest.approx(expected)


def test_degenerate_neutral():
    with pytest.raises(DegenerateFaceError):
        neutral_scale(np.full((126, 2), 3.0))
    line = np.zeros((126, 2))
    line[:, 0] = np.arange(126)
    with pytest.raises(DegenerateFaceError):
        neutral_scale(line)


@settings(max_examples=25, deadline=None)
@given(
    arrays(np.float64, (126, 2), elements=st.floats(-200, 200)),
    st.floats(0.1, 50),
    st.floats(0, 2 * np.pi),
    st.tuples(st.floats(-100, 100), st.floats(-100, 100)),
)
def test_feature_homogeneity_and_rigid_invariance(frame, s, angle, shift):
    base = frame_feature(frame, 1.0).astype(np.float64)
    np.testing.assert_allclose(frame_feature(frame, s), base / s, rtol=1e-5, atol=1e-4)
    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    moved = frame @ rot.T + np.asarray(shift)
    np.testing.assert_allclose(frame_feature(moved, 1.0), base, rtol=1e-4, atol=1e-3)


def test_shape_errors(rng):
    with pytest.raises(ShapeError):
        frame_feature(rng.normal(size=(125, 2)), 1.0)
    with pytest.raises(ShapeError):
        sequence_features(rng.normal(size=(4, 126, 3)), 1.0)


@pytest.mark.parametrize("n,F,starts", [(55, 51, [0, 1, 2, 3, 4]), (51, 51, [0])])
def test_clip_enumeration(n, F, starts, rng):
    seq = LandmarkSequence("v", rng.normal(size=(n, 126, 2)))
    clips = clip_features(seq, 1.0, F)
    assert [c.start_frame for c in clips] == starts
    assert all(c.values.shape == (F, FEATURE_DIM) for c in clips)
    feats = sequence_features(seq.frames, 1.0)
    np.testing.assert_array_equal(clips[-1].values, feats[starts[-1] : starts[-1] + F])


def test_clip_too_short(rng):
    with pytest.raises(TooShortError):
        clip_features(LandmarkSequence("v", rng.normal(size=(50, 126, 2))), 1.0, 51)


def test_clip_stride(rng):
    seq = LandmarkSequence("v", rng.normal(size=(100, 126, 2)))
    assert [c.start_frame for c in clip_features(seq, 1.0, 31, stride=31)] == [0, 31, 62]


def test_feature_cache_round_trip(tmp_path, rng):
    feats = rng.normal(size=(7, FEATURE_DIM)).astype(np.float32)
    write_feature_cache(tmp_path / "v.ftr", feats)
    np.testing.assert_array_equal(read_feature_cache(tmp_path / "v.ftr"), feats)
    with pytest.raises(ShapeError):
        write_feature_cache(tmp_path / "bad.ftr", feats[:, :10])


def test_store_normalisation_choice(small_ds):
    cross = small_ds.select(VideoKind.CROSS)[0]
    by_target = FeatureStore(small_ds, norm_by="target")
    by_driver = FeatureStore(small_ds, norm_by="driver")
    lm = by_target.landmarks(cross.video_id)[:3]
    np.testing.assert_array_equal(
        by_target.window(cross.video_id, 0, 3), sequence_features(lm, by_target.scale(cross.target_id))
    )
    np.testing.assert_array_equal(
        by_driver.window(cross.video_id, 0, 3), sequence_features(lm, by_driver.scale(cross.driving_id))
    )
    with pytest.raises(ValueError):
        FeatureStore(small_ds, norm_by="other")


def test_store_window_bounds(small_ds):
    store = FeatureStore(small_ds)
    vid = small_ds.videos[0].video_id
    with pytest.raises(TooShortError):
        store.window(vid, 30, 20)
    with pytest.raises(TooShortError):
        store.clips(vid, 51)


def test_extract_cache_matches_on_demand(small_ds, tmp_path):
    vids = [v.video_id for v in small_ds.videos[:3]]
    assert extract_cache(small_ds, tmp_path, video_ids=vids) == 3
    cached = FeatureStore(small_ds, cache_dir=tmp_path)
    live = FeatureStore(small_ds)
    for vid in vids:
        np.testing.assert_array_equal(cached.window(vid, 5, 10), live.window(vid, 5, 10))
