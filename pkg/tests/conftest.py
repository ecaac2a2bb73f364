import numpy as np
import pytest

from metaseg.autodiff import set_default_dtype
from metaseg.episodes import SynthConfig, gen_synthetic, split_classes


@pytest.fixture(autouse=True)
def _reset_dtype():
    set_default_dtype("f32")
    yield
    set_default_dtype("f32")


@pytest.fixture(scope="session")
def small_dataset():
    """14-class synthetic dataset with the standard 10/4 split, few images."""
    ds = gen_synthetic(SynthConfig(num_classes=14, images_per_class=12, seed=7))
    return split_classes(ds, [3, 5, 7, 11])


@pytest.fixture
def rng():
    return np.random.default_rng(0)
