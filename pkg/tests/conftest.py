import numpy as np
import pytest
from scipy.special import expit

from vbsens.dataset import Dataset


def toy_dataset() -> Dataset:
    """Four units: two controls (Y = -10, 5) and two treated (Y = 10, 20)."""
    return Dataset(
        np.array([-10.0, 5.0, 10.0, 20.0]),
        np.array([0, 0, 1, 1]),
        np.array([[0.0], [1.0], [0.5], [2.0]]),
        ("x",),
    )


TOY_CONTROL_WEIGHTS = np.array([1 / 9, 1 / 4])


def logit_dataset(n=400, coef=(1.0, 0.5, 0.0), effect=2.0, seed=0, noise=1.0) -> Dataset:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, len(coef)))
    z = (rng.random(n) < expit(x @ np.asarray(coef))).astype(int)
    y = x.sum(axis=1) + effect * z + noise * rng.standard_normal(n)
    names = tuple(f"x{i + 1}" for i in range(len(coef)))
    return Dataset(y, z, x, names)


@pytest.fixture
def toy():
    return toy_dataset()


@pytest.fixture
def synth():
    return logit_dataset()
