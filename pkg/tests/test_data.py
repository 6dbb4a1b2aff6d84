import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from dynid.data import (
    DatasetManifest,
    Split,
    VideoKind,
    VideoRecord,
    assign_splits,
    load_manifest,
    read_landmarks,
    save_manifest,
    split_identities,
    split_sizes,
    validate_manifest,
    write_landmarks,
)
from dynid.errors import EmptySplitError, FormatIOError, NonFiniteError, ParseError, ShapeError, ValidationError


def _face(rng):
    return rng.uniform(0, 100, (126, 2)).astype(np.float32)


def _one_identity_manifest(tmp_path, rng):
    path = tmp_path / "a.lmk"
    write_landmarks(path, rng.uniform(0, 100, (12, 126, 2)))
    rec = VideoRecord("a_orig", "A", "A", VideoKind.ORIGINAL, path, 12, 30.0)
    return DatasetManifest(tmp_path, ("A",), (rec,), {"A": _face(rng)}, {"A": Split.TRAIN})


def test_landmark_round_trip(tmp_path, rng):
    frames = rng.normal(0, 50, (55, 126, 2))
    write_landmarks(tmp_path / "x.lmk", frames)
    back = read_landmarks(tmp_path / "x.lmk")
    assert back.shape == (55, 126, 2)
    np.testing.assert_array_equal(back, frames.astype(np.float32))


def test_landmark_shape_and_finiteness(tmp_path, rng):
    with pytest.raises(ShapeError):
        write_landmarks(tmp_path / "bad.lmk", rng.normal(size=(3, 125, 2)))
    bad = rng.normal(size=(3, 126, 2))
    bad[1, 7, 0] = np.nan
    with pytest.raises(NonFiniteError):
        write_landmarks(tmp_path / "nan.lmk", bad)


def test_corrupt_landmark_file(tmp_path, rng):
    path = tmp_path / "x.lmk"
    write_landmarks(path, rng.normal(size=(4, 126, 2)))
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises((ParseError, FormatIOError)):
        read_landmarks(path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ParseError):
        read_landmarks(path)
    with pytest.raises(FormatIOError):
        read_landmarks(tmp_path / "missing.lmk")


def test_minimal_manifest_round_trip(tmp_path, rng):
    m = _one_identity_manifest(tmp_path, rng)
    validate_manifest(m)
    save_manifest(m)
    back = load_manifest(tmp_path)
    assert back.identities == ("A",)
    assert back.videos[0] == m.videos[0]
    np.testing.assert_array_equal(back.neutral["A"], m.neutral["A"])


def test_cross_set_reenactment_rejected(tmp_path, rng):
    m = _one_identity_manifest(tmp_path, rng)
    cross = VideoRecord("a_to_b", "A", "B", VideoKind.CROSS, m.videos[0].landmark_path, 12, 30.0)
    bad = DatasetManifest(
        tmp_path, ("A", "B"), m.videos + (cross,), {"A": _face(rng), "B": _face(rng)},
        {"A": Split.TRAIN, "B": Split.TEST},
    )
    with pytest.raises(ValidationError, match="cross-set"):
        validate_manifest(bad)


@pytest.mark.parametrize(
    "change",
    [
        lambda m: replace(m, identities=("A", "A")),
        lambda m: replace(m, split={}),
        lambda m: replace(m, neutral={"A": np.zeros((126, 2), np.float32)}),
        lambda m: replace(m, videos=(replace(m.videos[0], target_id="B"),)),
        lambda m: replace(m, videos=(replace(m.videos[0], landmark_path=Path("/nonexistent.lmk")),)),
    ],
)
def test_manifest_invariants(tmp_path, rng, change):
    with pytest.raises(ValidationError):
        validate_manifest(change(_one_identity_manifest(tmp_path, rng)))


def test_manifest_parse_errors(tmp_path):
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(ParseError):
        load_manifest(tmp_path)
    (tmp_path / "manifest.json").write_text(json.dumps({"format": "other"}))
    with pytest.raises(ParseError):
        load_manifest(tmp_path)
    with pytest.raises(FormatIOError):
        load_manifest(tmp_path / "nope.json")


def test_synth_manifest_counts(small_ds):
    assert len(small_ds.identities) == 8
    assert len(small_ds.select(VideoKind.ORIGINAL)) == 64
    assert len(small_ds.select(VideoKind.SELF)) == 64
    assert len(small_ds.select(VideoKind.CROSS)) == 8 * 7 * 8


def test_paper_split_sizes():
    assert split_sizes(161, (0.696, 0.087, 0.217)) == [112, 14, 35]
    assert split_sizes(8, (1, 0, 0)) == [8, 0, 0]
    assert sum(split_sizes(17, (0.5, 0.25, 0.25))) == 17


def test_split_errors():
    with pytest.raises(EmptySplitError):
        split_sizes(3, (0.9, 0.05, 0.05))
    with pytest.raises(ValidationError):
        split_sizes(10, (0.5, 0.5, 0.5))


def test_split_assignment_deterministic():
    ids = [f"p{k}" for k in range(30)]
    a = assign_splits(ids, (0.6, 0.2, 0.2), seed=4)
    assert a == assign_splits(ids, (0.6, 0.2, 0.2), seed=4)
    assert sorted(list(a.values()).count(s) for s in Split) == [6, 6, 18]


def test_split_identities_all_train(small_ds):
    m = split_identities(small_ds, (1, 0, 0), seed=0)
    assert m.dropped_cross_set == 0
    assert len(m.videos) == len(small_ds.videos)


def test_split_identities_drops_cross_set(small_ds):
    m = split_identities(small_ds, (0.5, 0.25, 0.25), seed=1)
    validate_manifest(m, check_files=False)
    crossing = [v for v in small_ds.videos if v.synthetic and m.split[v.driving_id] is not m.split[v.target_id]]
    assert m.dropped_cross_set == len(crossing) > 0
    assert len(m.videos) + m.dropped_cross_set == len(small_ds.videos)


def test_digest_tracks_split_content(small_ds):
    fp = small_ds.digest()
    assert fp == small_ds.digest()
    fewer = replace(small_ds, videos=small_ds.videos[:-1])
    assert fewer.digest() != fp
