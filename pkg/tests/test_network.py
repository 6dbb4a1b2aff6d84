import numpy as np
import pytest

from dynid import engine
from dynid.errors import ReceptiveFieldError, ShapeError
from dynid.features import FEATURE_DIM, ClipFeature
from dynid.network import (
    SCHEDULES,
    NetworkConfig,
    build_network,
    check_config,
    embed,
    embed_clips,
    embed_window,
    embed_windows,
    receptive_field,
)
from dynid.loss import LossStructure, contrastive_loss


def small(F=31, **kw):
    return NetworkConfig(clip_frames=F, width=8, **kw)


@pytest.mark.parametrize("F", sorted(SCHEDULES))
def test_receptive_field_of_schedules(F):
    cfg = NetworkConfig(clip_frames=F)
    assert 1 + 2 * sum(cfg.dilations[1:]) == F
    assert receptive_field(cfg.dilations, cfg.kernel_sizes) == F
    check_config(cfg)


def test_bad_schedule():
    with pytest.raises(ReceptiveFieldError):
        check_config(NetworkConfig(clip_frames=51, dilations=(1, 1, 1, 1)))
    with pytest.raises(ReceptiveFieldError):
        NetworkConfig(clip_frames=33)


def test_init_is_deterministic_and_bounded():
    cfg = small()
    a, b = build_network(cfg, 5), build_network(cfg, 5)
    assert a.params.keys() == b.params.keys()
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    w = a.params["conv00.weight"]
    assert w.shape == (8, FEATURE_DIM, 1) and w.dtype == np.float32
    assert np.abs(w).max() <= np.sqrt(6 / FEATURE_DIM)
    assert a.params["head.weight"].shape == (128, 8, 1)
    assert not np.array_equal(build_network(cfg, 6).params["conv00.weight"], w)


def test_embedding_shape_and_determinism(rng):
    cfg = small()
    store = build_network(cfg, 0)
    clip = ClipFeature(rng.normal(size=(31, FEATURE_DIM)).astype(np.float32), "v", 0)
    e1, e2 = embed(store, cfg, clip), embed(store, cfg, clip)
    assert e1.vector.shape == (128,)
    np.testing.assert_array_equal(e1.vector, e2.vector)
    with pytest.raises(ShapeError):
        embed(store, cfg, ClipFeature(clip.values[:30], "v", 0))
    with pytest.raises(ShapeError):
        embed(store, cfg, ClipFeature(np.zeros((32, FEATURE_DIM), np.float32), "v", 0))


def test_window_equals_independent_clips(rng):
    cfg = small()
    store = build_network(cfg, 1)
    values = rng.uniform(0, 2, (35, FEATURE_DIM)).astype(np.float32)
    win = embed_window(store, cfg, ClipFeature(values, "v", 10))
    assert [e.t for e in win] == [10, 11, 12, 13, 14]
    singles = embed_clips(store, np.stack([values[n : n + 31] for n in range(5)]), cfg)
    for n in range(5):
        assert np.abs(win[n].vector - singles[n]).max() < 1e-5


def test_constant_window_gives_identical_embeddings():
    cfg = small()
    store = build_network(cfg, 2)
    values = np.tile(np.linspace(0, 1, FEATURE_DIM, dtype=np.float32), (35, 1))
    win = embed_window(store, cfg, ClipFeature(values, "v", 0))
    for e in win[1:]:
        np.testing.assert_array_equal(e.vector, win[0].vector)


def test_normalised_embeddings(rng):
    cfg = small(normalize=True)
    store = build_network(cfg, 0)
    out = embed_clips(store, rng.normal(size=(3, 31, FEATURE_DIM)).astype(np.float32), cfg)
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, rtol=1e-5)


def test_config_round_trip():
    cfg = NetworkConfig(clip_frames=71, width=32, normalize=True)
    assert NetworkConfig.from_dict(cfg.to_dict()) == cfg


def test_network_loss_gradient_small_step(rng):
    # step small enough that no ReLU flips inside the difference interval
    net = NetworkConfig(clip_frames=31, input_dim=6, width=4)
    store = build_network(net, 2, dtype=np.float64)
    x = rng.uniform(0, 1, (4, 35, 6))
    one = np.array([1.0, 0, 0, 0])
    structure = LossStructure(
        np.array([0, 1, 2, 3]),
        np.array([[0, 1, 0, 0], [1, 0, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], float),
        np.array([np.roll(one, 2), np.roll(one, 2), one, one]),
        ("A", "A", "B", "B"),
    )

    def loss_of(params):
        return contrastive_loss(embed_windows(params, x, net), structure)[0]

    tensors = store.tensors()
    grads = engine.grad(loss_of(tensors), tensors)
    params = {k: p.copy() for k, p in store.params.items()}
    h, good, total = 1e-6, 0, 0
    for name, p in params.items():
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + h
            up = loss_of(params).item()
            p[i] = old - h
            dn = loss_of(params).item()
            p[i] = old
            num, g = (up - dn) / (2 * h), grads[name][i]
            good += abs(num - g) <= 1e-4 * max(abs(num), abs(g)) + 1e-7
            total += 1
    assert good / total >= 0.99
