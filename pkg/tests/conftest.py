import numpy as np
import pytest

from src.data import EnvironmentDataset
from src.models import SamplerConfig


def make_linear_dataset(
    rng: np.random.Generator,
    n_envs: int = 2,
    n: int = 60,
    coef=(1.5, 0.0),
    noise_sd: float = 0.5,
    shifts=None,
) -> EnvironmentDataset:
    """Invariant y = X @ coef + noise, with per-environment mean shifts of X."""
    coef = np.asarray(coef, dtype=float)
    shifts = shifts if shifts is not None else [float(e) for e in range(n_envs)]
    X, y = [], []
    for e in range(n_envs):
        xe = rng.standard_normal((n, coef.size)) + shifts[e]
        X.append(xe)
        y.append(xe @ coef + noise_sd * rng.standard_normal(n))
    return EnvironmentDataset(X=X, y=y, predictor_names=[f"x{d}" for d in range(coef.size)])


def make_binary_dataset(rng: np.random.Generator, n_envs: int = 2, n: int = 40) -> EnvironmentDataset:
    X, y = [], []
    for e in range(n_envs):
        xe = rng.standard_normal((n, 2))
        p = 1.0 / (1.0 + np.exp(-(1.2 * xe[:, 0] - 0.5 * xe[:, 1])))
        X.append(xe)
        y.append((rng.uniform(size=n) < p).astype(float))
    return EnvironmentDataset(X=X, y=y, predictor_names=["x0", "x1"], target_kind="binary")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def linear_dataset(rng):
    return make_linear_dataset(rng)


@pytest.fixture
def binary_dataset(rng):
    return make_binary_dataset(rng)


@pytest.fixture
def quick_sampler():
    return SamplerConfig(chains=2, warmup=150, draws=150, seed=7)
