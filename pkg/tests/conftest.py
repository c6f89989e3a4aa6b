import numpy as np
import pytest

from stabilab.seeding import derive_rng
from stabilab.synth import make_test_image


@pytest.fixture(scope="session")
def test_image() -> np.ndarray:
    return make_test_image()


@pytest.fixture()
def rng() -> np.random.Generator:
    return derive_rng(20260811, "tests")


def random_image(rng: np.random.Generator, height: int = 16, width: int = 16) -> np.ndarray:
    return rng.uniform(size=(height, width, 3))
