import numpy as np
import pytest

from polyforge import spatial, toydata


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory):
    """Small shared toy dataset: 24 grayscale 32x32 blob images."""
    root = tmp_path_factory.mktemp("toy")
    manifest = toydata.make_toy_dataset(root, 24, 32, seed=101)
    return manifest


@pytest.fixture(scope="session")
def toy_samples(toy_dir):
    entries = spatial.load_manifest(toy_dir)
    return [spatial.load_sample(toy_dir, e) for e in entries]


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
