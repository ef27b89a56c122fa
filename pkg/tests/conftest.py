import numpy as np
import pytest

from nlab import dataset as ds
from nlab.nn_core import Architecture, TwoHeadNetwork

TINY = Architecture(input_shape=(8, 8, 3), conv_channels=(4,), hidden=16)


@pytest.fixture
def tiny_arch():
    return TINY


@pytest.fixture
def tiny_net():
    return TwoHeadNetwork.initialize(TINY, seed=3, dtype=np.float64)


def make_pool(n, seed=0, size=8):
    """Random uint8 images with a class-dependent mean so training has signal."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 10
    rng.shuffle(labels)
    images = rng.integers(0, 80, size=(n, size, size, 3)).astype(np.int64)
    images[:, : size // 2, :, 0] += 17 * labels[:, None, None]
    images[:, size // 2:, :, 2] += 17 * (9 - labels)[:, None, None]
    return ds.SampleSet(np.arange(n), images.astype(np.uint8), labels)


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    """Small CIFAR-format directory: 5 x 500 train records, 200 test records."""
    from nlab.synthetic import write_dataset
    d = tmp_path_factory.mktemp("synth")
    write_dataset(d, per_batch=500, n_test=200, seed=0)
    return d
