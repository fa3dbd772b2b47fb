"""
MRI forward model on single-coil Cartesian k-space.

Conventions:
    - fft2c / ifft2c are orthonormal and centered: the DC sample sits at (H // 2, W // 2).
    - Images are real. Every inverse transform keeps the real part, so projections
      are exactly data-consistent only when the k-space being inverted is
      conjugate-symmetric (noiseless data and a mask symmetric about the DC column).
    - A mask selects whole phase-encode columns and is broadcast along rows.
All functions accept arrays with arbitrary leading batch dimensions over the last two axes.
"""
import logging
import math
from dataclasses import dataclass, replace

import numpy as np

logger = logging.getLogger(__name__)

AXES = (-2, -1)


@dataclass(frozen=True)
class CartesianMask:
    kept: np.ndarray
    acceleration_nominal: float = 1.0
    acs_fraction: float = 0.0

    def __post_init__(self):
        kept = np.asarray(self.kept, dtype=bool)
        if kept.ndim != 1 or kept.size == 0:
            raise ValueError(f"Mask must be a non-empty 1-D column selector, got shape {kept.shape}")
        kept.setflags(write=False)
        object.__setattr__(self, "kept", kept)

    @property
    def width(self) -> int:
        return int(self.kept.size)

    @property
    def n_kept(self) -> int:
        return int(self.kept.sum())

    @property
    def sampling_ratio(self) -> float:
        return self.n_kept / self.width

    @property
    def actual_acceleration(self) -> float:
        if self.n_kept == 0:
            return math.inf
        return self.width / self.n_kept

    @property
    def is_symmetric(self) -> bool:
        """True when the kept set maps onto itself under column c -> 2*(W//2) - c (mod W)."""
        columns = np.arange(self.width)
        mirrored = (2 * (self.width // 2) - columns) % self.width
        return bool(np.array_equal(self.kept, self.kept[mirrored]))

    def as_2d(self, height: int) -> np.ndarray:
        return np.broadcast_to(self.kept, (height, self.width))


@dataclass(frozen=True)
class Measurement:
    """Masked k-space data y = M F x + eps; unkept columns are exactly zero."""
    kspace: np.ndarray
    mask: CartesianMask
    sigma_e: float = 0.0

    def __post_init__(self):
        kspace = np.asarray(self.kspace, dtype=np.complex128)
        if kspace.ndim < 2 or kspace.shape[-1] != self.mask.width:
            raise ValueError(f"Measurement width {kspace.shape[-1:]} does not match mask width {self.mask.width}")
        if np.any(kspace[..., ~self.mask.kept] != 0):
            raise ValueError("Measurement has non-zero entries at unkept columns")
        kspace.setflags(write=False)
        object.__setattr__(self, "kspace", kspace)

    @property
    def shape(self):
        return self.kspace.shape[-2:]


def _check_image(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim < 2 or x.shape[-2] * x.shape[-1] == 0:
        raise ValueError(f"Expected an image grid with two trailing axes, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("Image contains non-finite entries")
    return x


def _check_width(x: np.ndarray, mask: CartesianMask):
    if x.shape[-1] != mask.width:
        raise ValueError(f"Image width {x.shape[-1]} does not match mask width {mask.width}")


def fft2c(image: np.ndarray) -> np.ndarray:
    image = _check_image(image)
    shifted = np.fft.ifftshift(image, axes=AXES)
    return np.fft.fftshift(np.fft.fft2(shifted, axes=AXES, norm="ortho"), axes=AXES)


def ifft2c(kspace: np.ndarray) -> np.ndarray:
    """Inverse of fft2c, realized as the real part."""
    kspace = _check_image(kspace)
    shifted = np.fft.ifftshift(kspace, axes=AXES)
    return np.fft.fftshift(np.fft.ifft2(shifted, axes=AXES, norm="ortho"), axes=AXES).real


def make_uniform_mask(width: int, R: float = 4, acs_fraction: float = 0.04) -> CartesianMask:
    """
    Keep every R-th column phased on the DC column (W // 2), plus a central block of
    n = ceil(acs_fraction * width) columns centred on DC. An even n is raised by one
    so the block, and with it the mask, stays mirror-symmetric about DC.
    """
    if width < 1:
        raise ValueError(f"Mask width must be positive, got {width}")
    if R < 1:
        raise ValueError(f"Acceleration must be >= 1, got {R}")
    if R > width:
        raise ValueError(f"Acceleration {R} exceeds mask width {width}")
    if not (0.0 <= acs_fraction < 1.0):
        raise ValueError(f"acs_fraction must lie in [0, 1), got {acs_fraction}")

    step = int(round(R))
    center = width // 2
    columns = np.arange(width)
    kept = (columns - center) % step == 0

    # round first so 0.04 * 100 stays 4 columns
    n_acs = math.ceil(round(acs_fraction * width, 9))
    if n_acs:
        n_acs += 1 - n_acs % 2
        start = center - n_acs // 2
        kept[max(start, 0):start + n_acs] = True

    mask = CartesianMask(kept=kept, acceleration_nominal=float(R), acs_fraction=float(acs_fraction))
    logger.debug(
        f"Mask width={width} R={R} acs={acs_fraction}: kept {mask.n_kept} columns, "
        f"actual acceleration {mask.actual_acceleration:.3f}"
    )
    return mask


def apply_mask(kspace: np.ndarray, mask: CartesianMask) -> np.ndarray:
    return np.where(mask.kept, kspace, 0.0)


def forward(x: np.ndarray, mask: CartesianMask) -> Measurement:
    """y = M F x (noiseless)."""
    x = _check_image(x)
    _check_width(x, mask)
    return Measurement(kspace=apply_mask(fft2c(x), mask), mask=mask, sigma_e=0.0)


def add_noise(y: Measurement, sigma_e: float, seed: int) -> Measurement:
    """Complex circular Gaussian noise, std sigma_e / sqrt(2) per component, on kept columns only."""
    if sigma_e < 0:
        raise ValueError(f"sigma_e must be >= 0, got {sigma_e}")
    if sigma_e == 0:
        return y

    rng = np.random.default_rng(seed)
    scale = sigma_e / math.sqrt(2.0)
    noise = scale * (rng.standard_normal(y.kspace.shape) + 1j * rng.standard_normal(y.kspace.shape))
    noisy = apply_mask(y.kspace + noise, y.mask)
    total = math.sqrt(y.sigma_e ** 2 + sigma_e ** 2)
    return replace(y, kspace=noisy, sigma_e=total)


def zero_filled(y: Measurement) -> np.ndarray:
    """x_zf = real(F^-1 M y)."""
    return ifft2c(apply_mask(y.kspace, y.mask))


def project(x: np.ndarray, y: Measurement) -> np.ndarray:
    """P_y(x) = real(F^-1 (M y + (I - M) F x))."""
    x = _check_image(x)
    _check_width(x, y.mask)
    if x.shape[-2:] != y.shape:
        raise ValueError(f"Image shape {x.shape[-2:]} does not match measurement shape {y.shape}")
    merged = np.where(y.mask.kept, y.kspace, fft2c(x))
    return ifft2c(merged)


def blend_project(x: np.ndarray, target: np.ndarray, mask: CartesianMask, lam: float = 1.0) -> np.ndarray:
    """
    real(F^-1 (lam * M target + (1 - lam) * M F x + (I - M) F x)).

    lam = 1 is a hard projection onto the target's kept columns; lam = 0 returns x.
    """
    if lam == 0.0:
        return x
    spectrum = fft2c(x)
    blended = np.where(mask.kept, lam * target + (1.0 - lam) * spectrum, spectrum)
    return ifft2c(blended)


def sample_noisy_measurement(y: Measurement, alpha_bar: float, rng: np.random.Generator) -> np.ndarray:
    """
    Noised measurement at diffusion level alpha_bar:
    y_t = sqrt(alpha_bar) * y + sqrt(1 - alpha_bar) * M F z, z ~ N(0, I) in image space.
    Returns masked k-space.
    """
    z = rng.standard_normal(y.kspace.shape)
    return math.sqrt(alpha_bar) * y.kspace + math.sqrt(1.0 - alpha_bar) * apply_mask(fft2c(z), y.mask)


def data_fidelity(x: np.ndarray, y: Measurement) -> float:
    """||y - M F x||_2 over the whole grid (diagnostic only)."""
    x = _check_image(x)
    _check_width(x, y.mask)
    residual = y.kspace - apply_mask(fft2c(x), y.mask)
    return float(np.linalg.norm(residual))


def kspace_residual(x: np.ndarray, y: Measurement) -> float:
    """||M F x - M y||_inf, the exact-consistency check."""
    residual = apply_mask(fft2c(x), y.mask) - y.kspace
    return float(np.max(np.abs(residual))) if residual.size else 0.0
