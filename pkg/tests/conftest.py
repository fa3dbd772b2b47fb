import sys
from pathlib import Path

import numpy as np
import pytest
import scipy.linalg

# Ensure project root is on sys.path
PROJECT_ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(PROJECT_ROOT))

from diffusion.denoiser import GaussianPrior, fit_gaussian_prior  # noqa: E402
from diffusion.schedule import build_cosine_schedule  # noqa: E402
from mri.kspace import forward, make_uniform_mask  # noqa: E402
from mri.phantom import PhantomSpec, generate_phantom, phantom_ensemble  # noqa: E402

DATA_DIR = Path(__file__).resolve().parent / "data"


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: Monte-Carlo and end-to-end acceptance runs (deselect with -m 'not slow')")


class FixedEps:
    """Denoiser that always predicts the same noise image."""

    def __init__(self, eps):
        self.value = np.asarray(eps, dtype=np.float64)
        self.calls = 0

    def eps(self, x_t, t, schedule):
        self.calls += 1
        return np.broadcast_to(self.value, np.shape(x_t)).copy()


def random_gaussian_prior(shape, rank, seed=0, floor=1e-3, eigvals=None) -> GaussianPrior:
    """Prior with a random orthonormal eigen-basis; eigenvalues default to a decaying spectrum."""
    rng = np.random.default_rng(seed)
    n = shape[0] * shape[1]
    q, _ = scipy.linalg.qr(rng.standard_normal((n, max(rank, 1))), mode="economic")
    basis = q[:, :rank].T.reshape((rank,) + tuple(shape))
    if eigvals is None:
        eigvals = 0.5 ** np.arange(rank)
    return GaussianPrior(
        mu=0.1 * rng.standard_normal(shape),
        basis=np.ascontiguousarray(basis),
        eigvals=np.asarray(eigvals, dtype=np.float64),
        floor=floor,
    )


def dense_covariance(prior: GaussianPrior) -> np.ndarray:
    n = prior.mu.size
    U = prior.basis.reshape(prior.rank, n).T
    return U @ np.diag(prior.eigvals) @ U.T + prior.floor * np.eye(n)


@pytest.fixture(scope="session")
def cosine():
    return build_cosine_schedule(1000)


@pytest.fixture(scope="session")
def canonical_phantom():
    return generate_phantom(PhantomSpec(size=64))


@pytest.fixture(scope="session")
def small_prior():
    return random_gaussian_prior((8, 8), rank=4, seed=1)


@pytest.fixture(scope="session")
def symmetric_mask_8():
    mask = make_uniform_mask(8, 2, 0.0)
    assert mask.is_symmetric
    return mask


@pytest.fixture(scope="session")
def jitter_spec():
    return PhantomSpec(size=64, center_jitter=0.05, axis_jitter=0.05, rotation_jitter=5.0, intensity_jitter=0.1)


@pytest.fixture(scope="session")
def phantom_prior(jitter_spec):
    """Rank-32 prior on 500 jittered 64x64 phantoms (training seeds 0..499)."""
    ensemble = phantom_ensemble(jitter_spec, range(500), progress=False)
    return fit_gaussian_prior(ensemble, rank=32, floor=1e-2)


@pytest.fixture(scope="session")
def test_phantoms(jitter_spec):
    """Held-out phantoms, seeds disjoint from the prior ensemble."""
    return [generate_phantom(jitter_spec.model_copy(update={"seed": seed})) for seed in range(100_000, 100_050)]


@pytest.fixture
def measurement_4x(canonical_phantom):
    return forward(canonical_phantom, make_uniform_mask(64, 4, 0.04))
