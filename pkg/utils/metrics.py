"""
Image-quality metrics and mean +- std summaries.

PSNR and SSIM come from scikit-image; SSIM uses an 11x11 Gaussian window
(sigma 1.5, population covariance) averaged over the fully covered region.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


@dataclass(frozen=True)
class MetricReport:
    psnr_db: float
    ssim: float
    data_range: float


@dataclass(frozen=True)
class Summary:
    """Sample mean and std (N - 1 divisor). single is set when std is 0 only because N = 1."""
    mean: float
    std: float
    n: int
    single: bool = False

    def __iter__(self):
        return iter((self.mean, self.std))


def _check_pair(x: np.ndarray, ref: np.ndarray, data_range: float):
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"Image shapes differ: {x.shape} vs {ref.shape}")
    if data_range <= 0:
        raise ValueError(f"data_range must be > 0, got {data_range}")
    return x, ref


def psnr(x: np.ndarray, ref: np.ndarray, data_range: float = 1.0) -> float:
    """10 log10(range^2 / MSE); +inf when the images are identical."""
    x, ref = _check_pair(x, ref, data_range)
    if np.array_equal(x, ref):
        return math.inf
    return float(peak_signal_noise_ratio(ref, x, data_range=data_range))


def ssim(x: np.ndarray, ref: np.ndarray, data_range: float = 1.0) -> float:
    x, ref = _check_pair(x, ref, data_range)
    if x.ndim != 2 or min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs 2-D images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape}")
    return float(structural_similarity(
        x, ref,
        data_range=data_range,
        gaussian_weights=True,
        sigma=SSIM_SIGMA,
        use_sample_covariance=False,
    ))


def evaluate(x: np.ndarray, ref: np.ndarray, data_range: float = 1.0) -> MetricReport:
    return MetricReport(psnr_db=psnr(x, ref, data_range), ssim=ssim(x, ref, data_range), data_range=data_range)


def summarize(values) -> Summary:
    values = np.asarray(list(values), dtype=np.float64)
    if values.size == 0:
        raise ValueError("Cannot summarize an empty list of values")
    mean = float(values.mean())
    if values.size == 1:
        logger.warning("Summary over a single value; std reported as 0")
        return Summary(mean=mean, std=0.0, n=1, single=True)
    return Summary(mean=mean, std=float(values.std(ddof=1)), n=int(values.size))
