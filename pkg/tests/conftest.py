import json
from pathlib import Path

import numpy as np
import pytest

from packptq.data import generate_dataset
from packptq.nets import deserialize

FIXTURES = Path(__file__).parent / "fixtures"


def load_fixture_net(name: str):
    return deserialize(json.loads((FIXTURES / f"{name}.json").read_text()))


@pytest.fixture(scope="session")
def moons_net():
    return load_fixture_net("resmlp-8x32_moons")


@pytest.fixture(scope="session")
def blobs8_net():
    return load_fixture_net("resmlp-8x32_blobs8")


@pytest.fixture(scope="session")
def rings_net():
    return load_fixture_net("resmlp-4x16_rings")


@pytest.fixture(scope="session")
def moons_data():
    return generate_dataset("two-moons-10class", 256, seed=11, test_n=2048)


@pytest.fixture(scope="session")
def blobs8_data():
    return generate_dataset("gaussian-blobs", 256, seed=11, class_count=8, test_n=2048)


@pytest.fixture(scope="session")
def rings_data():
    return generate_dataset("concentric-rings", 256, seed=11, class_count=3, test_n=2048)


def assert_grad_close(analytic: np.ndarray, numeric: np.ndarray,
                      rel: float = 1e-4, abs_floor: float = 1e-7):
    """Elementwise |a - n| <= abs_floor + rel * |n| (the gradient-check contract)."""
    diff = np.abs(analytic - numeric)
    tol = abs_floor + rel * np.abs(numeric)
    worst = (diff - tol).max()
    assert (diff <= tol).all(), f"gradient mismatch; worst excess {worst:.3e}"
