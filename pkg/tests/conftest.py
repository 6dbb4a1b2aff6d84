import numpy as np
import pytest

from dynid.data import load_manifest
from dynid.synth import SynthConfig, generate_dataset


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long end-to-end runs")


@pytest.fixture(scope="session")
def small_ds(tmp_path_factory):
    """8 training identities with enough videos for the full batch recipe."""
    out = tmp_path_factory.mktemp("small_ds")
    cfg = SynthConfig(n_identities=8, videos_per_identity=8, frames_per_video=40, seed=3, cross_per_pair=8)
    generate_dataset(cfg, out)
    return load_manifest(out)


@pytest.fixture(scope="session")
def heldout_ds(tmp_path_factory):
    """Fresh videos of 4 identities, all in the test split."""
    out = tmp_path_factory.mktemp("heldout_ds")
    cfg = SynthConfig(
        n_identities=4, videos_per_identity=3, frames_per_video=70, seed=3, video_seed=99,
        cross_per_pair=1, fractions=(0.0, 0.0, 1.0),
    )
    generate_dataset(cfg, out)
    return load_manifest(out)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
