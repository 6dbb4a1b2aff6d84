import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynid.data import Split, VideoKind, load_manifest
from dynid.errors import InsufficientDataError, NoScoreableIdentityError, ValidationError
from dynid.evaluation import (
    ClipEmbedder,
    ScorePools,
    default_probes,
    evaluate,
    mean_roc,
    plot_mean_roc,
    pools_from_embeddings,
    read_roc_tables,
    reference_distance_report,
    roc_auc,
    write_report,
)
from dynid.features import FeatureStore
from dynid.network import NetworkConfig, build_network
from dynid.synth import SynthConfig, generate_dataset
from oracles import mann_whitney_auc

NET = NetworkConfig(clip_frames=31, width=4)


@pytest.fixture(scope="module")
def mixed_ds(tmp_path_factory):
    out = tmp_path_factory.mktemp("mixed_ds")
    cfg = SynthConfig(n_identities=6, videos_per_identity=3, frames_per_video=40, seed=8, cross_per_pair=1, fractions=(0.5, 0.0, 0.5))
    generate_dataset(cfg, out)
    return load_manifest(out)


def test_pool_combinatorics(rng):
    selfs = [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]
    crosses = [rng.normal(size=(2, 4))]
    pools = pools_from_embeddings("A", selfs, crosses)
    assert len(pools.genuine) == 15 and len(pools.impostor) == 12
    S, C = np.concatenate(selfs), crosses[0]
    expect_g = sorted(np.linalg.norm(S[i] - S[j]) for i in range(6) for j in range(i + 1, 6))
    expect_i = sorted(np.linalg.norm(s - c) for s in S for c in C)
    np.testing.assert_allclose(sorted(pools.genuine), expect_g, rtol=1e-12)
    np.testing.assert_allclose(sorted(pools.impostor), expect_i, rtol=1e-12)


def test_identical_embeddings_give_half():
    e = np.ones((3, 4))
    pools = pools_from_embeddings("A", [e, e], [e])
    assert np.all(pools.genuine == 0) and np.all(pools.impostor == 0)
    assert roc_auc(pools).auc == 0.5


def test_auc_hand_cases():
    assert roc_auc(ScorePools("A", np.array([1.0, 2.0]), np.array([1.5, 3.0]))).auc == 0.75
    assert roc_auc(ScorePools("A", np.array([0.1, 0.2]), np.array([0.3, 9.0]))).auc == 1.0
    same = np.array([1.0, 1.0, 2.0, 5.0])
    assert roc_auc(ScorePools("A", same, same[::-1].copy())).auc == 0.5


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.integers(0, 12), min_size=1, max_size=40),
    st.lists(st.integers(0, 12), min_size=1, max_size=40),
)
def test_auc_equals_mann_whitney(g, i):
    g, i = np.array(g, float) / 4, np.array(i, float) / 4
    roc = roc_auc(ScorePools("A", g, i))
    assert roc.auc == mann_whitney_auc(g, i)
    assert (roc.fpr[0], roc.tpr[0], roc.fpr[-1], roc.tpr[-1]) == (0, 0, 1, 1)
    assert np.all(np.diff(roc.fpr) >= 0) and np.all(np.diff(roc.tpr) >= 0)
    assert roc.thresholds[0] == -math.inf and roc.thresholds[-1] == math.inf


def test_empty_pool():
    with pytest.raises(InsufficientDataError):
        roc_auc(ScorePools("A", np.array([]), np.array([1.0])))


def test_evaluate_reads_only_its_split(mixed_ds):
    store = build_network(NET, 0)
    features = FeatureStore(mixed_ds)
    report = evaluate(mixed_ds, store, NET, Split.TEST, features=features)
    test_ids = set(mixed_ds.identities_in(Split.TEST))
    assert set(report.per_identity) == test_ids
    assert features.requested
    assert all(mixed_ds.video(v).driving_id in test_ids for v in features.requested)
    assert report.mean_auc == pytest.approx(np.mean([r.auc for r in report.per_identity.values()]))


def test_evaluate_split_rules(mixed_ds):
    store = build_network(NET, 0)
    with pytest.raises(ValidationError):
        evaluate(mixed_ds, store, NET, Split.TRAIN)
    with pytest.raises(NoScoreableIdentityError):
        evaluate(mixed_ds, store, NET, Split.VAL)
    with pytest.raises(ValidationError):
        evaluate(mixed_ds, store, NET, Split.TEST, targets=[mixed_ds.identities_in(Split.TRAIN)[0]])


def test_evaluate_skips_unscoreable(heldout_ds):
    store = build_network(NET, 0)
    # F=71 leaves no clip in 70-frame videos: every identity is skipped
    wide = NetworkConfig(clip_frames=71, width=4)
    with pytest.raises(NoScoreableIdentityError):
        evaluate(heldout_ds, build_network(wide, 0), wide)
    report = evaluate(heldout_ds, store, NET, targets=["id000", "id001"])
    assert set(report.per_identity) == {"id000", "id001"}


def test_report_files_and_plot(heldout_ds, tmp_path):
    store = build_network(NET, 0)
    report = evaluate(heldout_ds, store, NET, stride=13)
    summary = write_report(report, tmp_path / "ev")
    rows = summary.read_text().splitlines()
    assert rows[0] == "identity,auc,n_genuine,n_impostor"
    assert rows[-1].startswith("mean_auc,")
    tables = read_roc_tables(tmp_path / "ev")
    assert set(tables) == set(report.per_identity)
    for ident, (fpr, tpr) in tables.items():
        np.testing.assert_array_equal(fpr, report.per_identity[ident].fpr)
    grid, tpr = mean_roc(tables)
    assert grid[0] == 0 and grid[-1] == 1 and np.all(np.diff(tpr) >= 0) and tpr[-1] == 1
    a = plot_mean_roc(tmp_path / "ev", tmp_path / "a.svg")
    b = plot_mean_roc(tmp_path / "ev", tmp_path / "b.svg")
    assert a.read_bytes() == b.read_bytes() and b"<svg" in a.read_bytes()
    again = evaluate(heldout_ds, store, NET, stride=13)
    write_report(again, tmp_path / "ev2")
    assert (tmp_path / "ev2" / "summary.csv").read_bytes() == summary.read_bytes()


def test_reference_report(heldout_ds):
    store = build_network(NET, 0)
    features = FeatureStore(heldout_ds)
    embedder = ClipEmbedder(store, NET, features)
    probes = default_probes(heldout_ds, "id000", np.random.default_rng(0))
    assert set(probes) == {"self", "drives_other", "driven_by_other_1", "driven_by_other_2"}
    dist = reference_distance_report(heldout_ds, store, NET, "id000", list(probes.values()), embedder=embedder)
    assert set(dist) == set(probes.values()) and all(d >= 0 for d in dist.values())
    assert dist == reference_distance_report(heldout_ds, store, NET, "id000", list(probes.values()), features=features)
    selfs = [v.video_id for v in heldout_ds.select(VideoKind.SELF, driving_id="id000")]
    with pytest.raises(InsufficientDataError):
        reference_distance_report(heldout_ds, store, NET, "id000", selfs, embedder=embedder)


def test_reference_report_clone_distance(heldout_ds):
    # a network with all-zero weights maps every clip to the same point
    store = build_network(NET, 0)
    for p in store.params.values():
        p[...] = 0
    probe = heldout_ds.select(VideoKind.SELF, driving_id="id001")[0].video_id
    dist = reference_distance_report(heldout_ds, store, NET, "id001", [probe])
    assert dist[probe] == 0.0
