"""
Closed-form noise predictors eps(x_t, t) for priors whose posterior mean is exact.

Given x_t = a * x_0 + b * eps with a = sqrt(alpha_bar_t), b^2 = 1 - alpha_bar_t, the
optimal predictor is eps*(x_t, t) = (x_t - a * E[x_0 | x_t]) / b. For a Gaussian prior
with covariance U diag(lambda) U^T + floor * I and for a mixture of isotropic Gaussians
the posterior mean has a closed form, so every sampler can be checked against exact
answers instead of a trained network.

All predictors accept batched inputs of shape (..., H, W).
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional, Protocol

import numpy as np
import scipy.linalg
from scipy.cluster.vq import kmeans2
from scipy.special import logsumexp

from diffusion.schedule import NoiseSchedule
from mri.kspace import Measurement, apply_mask, fft2c, ifft2c

# -------------------------------------------------------------------
# Logging configuration
# -------------------------------------------------------------------
logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s | %(levelname)s | %(name)s | %(message)s",
)
logger = logging.getLogger(__name__)

DENOMINATOR_FLOOR = 1e-12


class DenoiserModel(Protocol):
    def eps(self, x_t: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray: ...


@dataclass(frozen=True)
class GaussianPrior:
    """N(mu, U diag(eigvals) U^T + floor * I) with r orthonormal eigen-images in basis."""
    mu: np.ndarray
    basis: np.ndarray
    eigvals: np.ndarray
    floor: float

    def __post_init__(self):
        if self.basis.ndim != 3 or self.basis.shape[1:] != self.mu.shape:
            raise ValueError(f"Basis shape {self.basis.shape} does not stack images of shape {self.mu.shape}")
        if self.eigvals.shape != (self.basis.shape[0],):
            raise ValueError(f"Expected {self.basis.shape[0]} eigenvalues, got shape {self.eigvals.shape}")
        if np.any(self.eigvals < 0):
            raise ValueError("Prior eigenvalues must be non-negative")
        if self.floor <= 0:
            raise ValueError(f"Prior floor variance must be > 0, got {self.floor}")
        for array in (self.mu, self.basis, self.eigvals):
            array.setflags(write=False)

    @property
    def rank(self) -> int:
        return int(self.basis.shape[0])

    @property
    def shape(self):
        return self.mu.shape

    def coefficients(self, x: np.ndarray) -> np.ndarray:
        return np.tensordot(x, self.basis, axes=([-2, -1], [1, 2]))

    def synthesize(self, coefficients: np.ndarray) -> np.ndarray:
        return np.tensordot(coefficients, self.basis, axes=([-1], [0]))

    def sample(self, rng: np.random.Generator, n: Optional[int] = None) -> np.ndarray:
        """Draw x_0 ~ prior; shape (n, H, W) when n is given."""
        batch = () if n is None else (n,)
        z_top = rng.standard_normal(batch + (self.rank,)) * np.sqrt(self.eigvals)
        z_floor = rng.standard_normal(batch + self.shape) * math.sqrt(self.floor)
        return self.mu + self.synthesize(z_top) + z_floor


@dataclass(frozen=True)
class GmmPrior:
    """sum_k weights[k] * N(means[k], variances[k] * I)."""
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        K = self.weights.shape[0]
        if self.means.ndim != 3 or self.means.shape[0] != K or self.variances.shape != (K,):
            raise ValueError(
                f"Inconsistent mixture shapes: weights {self.weights.shape}, "
                f"means {self.means.shape}, variances {self.variances.shape}"
            )
        if np.any(self.weights <= 0) or not math.isclose(float(self.weights.sum()), 1.0, rel_tol=1e-9):
            raise ValueError("Mixture weights must be positive and sum to 1")
        if np.any(self.variances <= 0):
            raise ValueError("Mixture variances must be positive")
        for array in (self.weights, self.means, self.variances):
            array.setflags(write=False)

    @property
    def K(self) -> int:
        return int(self.weights.shape[0])

    @property
    def shape(self):
        return self.means.shape[1:]

    def sample(self, rng: np.random.Generator, n: Optional[int] = None) -> np.ndarray:
        count = 1 if n is None else n
        labels = rng.choice(self.K, size=count, p=self.weights)
        noise = rng.standard_normal((count,) + self.shape) * np.sqrt(self.variances[labels])[:, None, None]
        draws = self.means[labels] + noise
        return draws[0] if n is None else draws


def _noise_levels(t: int, schedule: NoiseSchedule):
    if t < 1:
        raise ValueError(f"Noise prediction needs t >= 1, got t={t}")
    alpha_bar = schedule.alpha_bar_at(t)
    b2 = 1.0 - alpha_bar
    if b2 <= 0.0:
        raise ValueError(f"Noise prediction needs alpha_bar_t < 1, got {alpha_bar} at t={t}")
    return math.sqrt(alpha_bar), b2


def _gain(a: float, b2: float, variance):
    """a * var / (a^2 * var + b^2), the per-direction posterior-mean gain."""
    return a * variance / np.maximum(a * a * variance + b2, DENOMINATOR_FLOOR)


def _gaussian_gain(prior: GaussianPrior, v: np.ndarray, a: float, b2: float) -> np.ndarray:
    """K v with K = a Sigma (a^2 Sigma + b^2 I)^-1, evaluated in the eigenbasis."""
    c = prior.coefficients(v)
    complement = v - prior.synthesize(c)
    top = prior.synthesize(c * _gain(a, b2, prior.eigvals + prior.floor))
    return top + _gain(a, b2, prior.floor) * complement


def posterior_mean_gaussian(prior: GaussianPrior, x_t: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    a, b2 = _noise_levels(t, schedule)
    return prior.mu + _gaussian_gain(prior, x_t - a * prior.mu, a, b2)


def eps_gaussian(prior: GaussianPrior, x_t: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    a, b2 = _noise_levels(t, schedule)
    m = prior.mu + _gaussian_gain(prior, x_t - a * prior.mu, a, b2)
    return (x_t - a * m) / math.sqrt(b2)


def vjp_gaussian(prior: GaussianPrior, x_t: np.ndarray, t: int, schedule: NoiseSchedule, v: np.ndarray) -> np.ndarray:
    """(d eps / d x_t)^T v = (v - a K v) / b; the posterior-mean Jacobian K is symmetric."""
    a, b2 = _noise_levels(t, schedule)
    return (v - a * _gaussian_gain(prior, v, a, b2)) / math.sqrt(b2)


def _gmm_terms(prior: GmmPrior, x_t: np.ndarray, a: float, b2: float):
    diff = x_t[..., None, :, :] - a * prior.means
    total_var = a * a * prior.variances + b2
    n = prior.shape[0] * prior.shape[1]
    sq = np.sum(diff * diff, axis=(-2, -1))
    log_w = np.log(prior.weights) - 0.5 * n * np.log(2.0 * math.pi * total_var) - sq / (2.0 * total_var)
    w = np.exp(log_w - logsumexp(log_w, axis=-1, keepdims=True))
    gains = _gain(a, b2, prior.variances)
    component_means = prior.means + gains[:, None, None] * diff
    return diff, total_var, w, component_means


def responsibilities(prior: GmmPrior, x_t: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    a, b2 = _noise_levels(t, schedule)
    return _gmm_terms(prior, x_t, a, b2)[2]


def posterior_mean_gmm(prior: GmmPrior, x_t: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    a, b2 = _noise_levels(t, schedule)
    _, _, w, component_means = _gmm_terms(prior, x_t, a, b2)
    return np.sum(w[..., None, None] * component_means, axis=-3)


def eps_gmm(prior: GmmPrior, x_t: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    a, b2 = _noise_levels(t, schedule)
    _, _, w, component_means = _gmm_terms(prior, x_t, a, b2)
    m = np.sum(w[..., None, None] * component_means, axis=-3)
    return (x_t - a * m) / math.sqrt(b2)


def vjp_gmm(prior: GmmPrior, x_t: np.ndarray, t: int, schedule: NoiseSchedule, v: np.ndarray) -> np.ndarray:
    """
    J^T v for the mixture posterior mean, with
    J = sum_k w_k g_k I + sum_k w_k m_k (h_k - h_bar)^T and h_k = -(x_t - a mu_k) / total_var_k.
    """
    a, b2 = _noise_levels(t, schedule)
    diff, total_var, w, component_means = _gmm_terms(prior, x_t, a, b2)
    gains = _gain(a, b2, prior.variances)
    scores = -diff / total_var[:, None, None]
    mean_score = np.sum(w[..., None, None] * scores, axis=-3)
    projections = np.sum(component_means * v[..., None, :, :], axis=(-2, -1))
    jtv = np.asarray(np.sum(w * gains, axis=-1))[..., None, None] * v
    jtv = jtv + np.sum((w * projections)[..., None, None] * (scores - mean_score[..., None, :, :]), axis=-3)
    return (v - a * jtv) / math.sqrt(b2)


def fd_vjp(denoiser: DenoiserModel, x_t: np.ndarray, t: int, schedule: NoiseSchedule,
           v: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference (d eps / d x_t)^T v, one pixel at a time. Slow; for denoisers without vjp."""
    out = np.zeros_like(x_t, dtype=np.float64)
    shifted = np.array(x_t, dtype=np.float64, copy=True)
    for index in np.ndindex(*x_t.shape):
        original = shifted[index]
        shifted[index] = original + h
        plus = denoiser.eps(shifted, t, schedule)
        shifted[index] = original - h
        minus = denoiser.eps(shifted, t, schedule)
        shifted[index] = original
        out[index] = np.sum((plus - minus) * v) / (2.0 * h)
    return out


class GaussianDenoiser:
    def __init__(self, prior: GaussianPrior):
        self.prior = prior

    def eps(self, x_t, t, schedule):
        return eps_gaussian(self.prior, x_t, t, schedule)

    def vjp(self, x_t, t, schedule, v):
        return vjp_gaussian(self.prior, x_t, t, schedule, v)

    def posterior_mean(self, x_t, t, schedule):
        return posterior_mean_gaussian(self.prior, x_t, t, schedule)


class GmmDenoiser:
    def __init__(self, prior: GmmPrior):
        self.prior = prior

    def eps(self, x_t, t, schedule):
        return eps_gmm(self.prior, x_t, t, schedule)

    def vjp(self, x_t, t, schedule, v):
        return vjp_gmm(self.prior, x_t, t, schedule, v)

    def posterior_mean(self, x_t, t, schedule):
        return posterior_mean_gmm(self.prior, x_t, t, schedule)


class ZeroDenoiser:
    """eps_theta == 0; the predictor then reduces to x_t / sqrt(alpha_bar_t)."""

    def eps(self, x_t, t, schedule):
        return np.zeros_like(x_t, dtype=np.float64)

    def vjp(self, x_t, t, schedule, v):
        return np.zeros_like(v, dtype=np.float64)


class CountingDenoiser:
    """Wraps a denoiser and counts eps and vjp evaluations separately."""

    def __init__(self, inner: DenoiserModel):
        self.inner = inner
        self.eps_calls = 0
        self.vjp_calls = 0

    def eps(self, x_t, t, schedule):
        self.eps_calls += 1
        return self.inner.eps(x_t, t, schedule)

    def vjp(self, x_t, t, schedule, v):
        self.vjp_calls += 1
        if hasattr(self.inner, "vjp"):
            return self.inner.vjp(x_t, t, schedule, v)
        return fd_vjp(self.inner, x_t, t, schedule, v)


def make_denoiser(prior) -> DenoiserModel:
    if isinstance(prior, GaussianPrior):
        return GaussianDenoiser(prior)
    if isinstance(prior, GmmPrior):
        return GmmDenoiser(prior)
    raise ValueError(f"No denoiser for prior of type {type(prior).__name__}")


def fit_gaussian_prior(ensemble, rank: int = 32, floor: float = 1e-2) -> GaussianPrior:
    """
    Sample mean plus the top-`rank` principal components of the centered ensemble
    (sample covariance, N - 1 divisor). Eigen-image signs are fixed so the
    largest-magnitude entry of each is positive.
    """
    images = np.stack([np.asarray(image, dtype=np.float64) for image in ensemble])
    N = images.shape[0]
    if images.ndim != 3:
        raise ValueError(f"Ensemble must be a list of equally shaped 2-D images, got stacked shape {images.shape}")
    if rank < 0 or N < rank + 1:
        raise ValueError(f"Rank {rank} needs at least {rank + 1} ensemble images, got {N}")
    if floor <= 0:
        raise ValueError(f"Prior floor variance must be > 0, got {floor}")

    shape = images.shape[1:]
    mu = images.mean(axis=0)
    centered = (images - mu).reshape(N, -1)

    if not np.any(centered):
        logger.warning(f"Ensemble of {N} images has zero variance; all prior eigenvalues are 0")

    _, singular, vt = scipy.linalg.svd(centered, full_matrices=False)
    basis = vt[:rank]
    pivots = np.argmax(np.abs(basis), axis=1)
    signs = np.sign(basis[np.arange(rank), pivots])
    signs[signs == 0] = 1.0
    basis = basis * signs[:, None]
    eigvals = singular[:rank] ** 2 / max(N - 1, 1)

    total = float(np.sum(singular ** 2))
    captured = float(np.sum(singular[:rank] ** 2)) / total if total > 0 else 1.0
    logger.info(f"Fitted rank-{rank} Gaussian prior on {N} images of {shape}: {captured:.1%} of variance captured")

    return GaussianPrior(mu=mu, basis=basis.reshape((rank,) + shape), eigvals=eigvals, floor=float(floor))


def fit_gmm_prior(ensemble, components: int = 4, floor: float = 1e-3, seed: int = 0) -> GmmPrior:
    """k-means clustering of the ensemble into isotropic components (per-pixel within-cluster variance + floor)."""
    images = np.stack([np.asarray(image, dtype=np.float64) for image in ensemble])
    N = images.shape[0]
    if components < 1 or N < components:
        raise ValueError(f"Need at least {components} images for {components} components, got {N}")
    shape = images.shape[1:]
    flat = images.reshape(N, -1)

    centroids, labels = kmeans2(flat, components, minit="++", seed=seed)
    counts = np.bincount(labels, minlength=components)
    keep = counts > 0
    if not np.all(keep):
        logger.warning(f"Dropping {int((~keep).sum())} empty k-means clusters")

    variances = []
    for k in np.flatnonzero(keep):
        members = flat[labels == k]
        variances.append(float(np.mean((members - centroids[k]) ** 2)) + floor)

    weights = counts[keep] / counts[keep].sum()
    logger.info(f"Fitted {int(keep.sum())}-component GMM prior on {N} images of {shape}")
    return GmmPrior(
        weights=weights.astype(np.float64),
        means=centroids[keep].reshape((-1,) + shape),
        variances=np.asarray(variances),
    )


def conditional_mean(prior: GaussianPrior, y: Measurement) -> np.ndarray:
    """
    E[x | M F x = M y] for x ~ N(mu, Sigma), Sigma = U diag(lambda) U^T + floor I.

    x = mu + Sigma A^H w with (A Sigma A^H) w = y - A mu, A = M F. Because A A^H = I on
    the kept entries, A Sigma A^H = floor I + B diag(lambda) B^H with B = A U, inverted
    with the Woodbury identity in the r-dimensional eigenbasis.
    """
    delta = prior.floor
    residual = y.kspace - apply_mask(fft2c(prior.mu), y.mask)
    B = apply_mask(fft2c(prior.basis), y.mask)
    root = np.sqrt(prior.eigvals)

    gram = np.einsum("ihw,jhw->ij", B.conj(), B)
    inner = delta * np.eye(prior.rank) + root[:, None] * gram * root[None, :]
    projected = np.einsum("ihw,hw->i", B.conj(), residual)
    correction = scipy.linalg.solve(inner, root * projected, assume_a="her") if prior.rank else projected[:0]
    w = (residual - np.tensordot(root * correction, B, axes=([0], [0]))) / delta

    back = np.einsum("ihw,hw->i", B.conj(), w)
    update = delta * ifft2c(w) + prior.synthesize((prior.eigvals * back).real)
    return prior.mu + update
