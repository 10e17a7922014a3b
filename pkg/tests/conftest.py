import numpy as np
import pytest

from icnt import parallel
from icnt.synth import make_synthetic_tree


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _reset_pool():
    yield
    parallel.shutdown_workers()


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """The acceptance-scale synthetic tree: 4 classes x 50 images, 64x64."""
    return make_synthetic_tree(tmp_path_factory.mktemp("synth") / "data", 4, 50, 64, seed=0)


@pytest.fixture(scope="session")
def small_root(tmp_path_factory):
    return make_synthetic_tree(tmp_path_factory.mktemp("small") / "data", 3, 20, 32, seed=5)
