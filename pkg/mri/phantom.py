"""
Shepp-Logan phantoms with seeded ellipse perturbations, used as the desk-scale image corpus.

Coordinates live on [-1, 1]^2 sampled at pixel centres: column j maps to
x = (2j - (N - 1)) / N and row i to y = ((N - 1) - 2i) / N, so row 0 is the top edge.
"""
import logging
import math
from typing import Iterable, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

logger = logging.getLogger(__name__)

MIN_SIZE = 32

# (A, a, b, x0, y0, phi_degrees), Toft's high-contrast variant
MODIFIED_ELLIPSES = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
)

# Original low-contrast intensities on the same geometry; halved so the skull rim sits at 1.0
ORIGINAL_INTENSITIES = (2.0, -0.98, -0.02, -0.02, 0.01, 0.01, 0.01, 0.01, 0.01, 0.01)
ORIGINAL_SCALE = 0.5


class PhantomSpec(BaseModel):
    """
    Jitters draw u ~ U(-1, 1) per ellipse parameter: centres move by center_jitter * u times the
    ellipse's own semi-axis, semi-axes and intensities scale by (1 + jitter * u), and the
    rotation shifts by rotation_jitter * u degrees.
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    size: int = Field(64, ge=MIN_SIZE)
    center_jitter: float = Field(0.0, ge=0.0, le=1.0)
    axis_jitter: float = Field(0.0, ge=0.0, lt=1.0)
    rotation_jitter: float = Field(0.0, ge=0.0, le=180.0)
    intensity_jitter: float = Field(0.0, ge=0.0, lt=1.0)
    seed: int = Field(0, ge=0)
    family: Literal["modified", "original"] = "modified"

    @property
    def is_canonical(self) -> bool:
        return not any((self.center_jitter, self.axis_jitter, self.rotation_jitter, self.intensity_jitter))


def ellipse_table(family: str = "modified") -> np.ndarray:
    table = np.array(MODIFIED_ELLIPSES, dtype=np.float64)
    if family == "original":
        table[:, 0] = np.array(ORIGINAL_INTENSITIES) * ORIGINAL_SCALE
    elif family != "modified":
        raise ValueError(f"Unknown phantom family '{family}', expected 'modified' or 'original'")
    return table


def _jittered_table(spec: PhantomSpec) -> np.ndarray:
    table = ellipse_table(spec.family)
    if spec.is_canonical:
        return table

    rng = np.random.default_rng(spec.seed)
    u = rng.uniform(-1.0, 1.0, size=(table.shape[0], 6))
    jittered = table.copy()
    jittered[:, 0] *= 1.0 + spec.intensity_jitter * u[:, 0]
    jittered[:, 1] *= 1.0 + spec.axis_jitter * u[:, 1]
    jittered[:, 2] *= 1.0 + spec.axis_jitter * u[:, 2]
    jittered[:, 3] += spec.center_jitter * table[:, 1] * u[:, 3]
    jittered[:, 4] += spec.center_jitter * table[:, 2] * u[:, 4]
    jittered[:, 5] += spec.rotation_jitter * u[:, 5]
    return jittered


def render_ellipses(table: np.ndarray, size: int) -> np.ndarray:
    """Sum the intensity of every ellipse containing each pixel centre (no clipping)."""
    centres = np.arange(size, dtype=np.float64)
    xs = (2.0 * centres - (size - 1)) / size
    ys = ((size - 1) - 2.0 * centres) / size
    x, y = np.meshgrid(xs, ys)

    image = np.zeros((size, size), dtype=np.float64)
    for intensity, a, b, x0, y0, phi in table:
        theta = math.radians(phi)
        dx, dy = x - x0, y - y0
        u = dx * math.cos(theta) + dy * math.sin(theta)
        v = -dx * math.sin(theta) + dy * math.cos(theta)
        image[(u / a) ** 2 + (v / b) ** 2 <= 1.0] += intensity
    return image


def generate_phantom(spec: PhantomSpec) -> np.ndarray:
    """Render the (possibly jittered) phantom and clip it to [0, 1]. Deterministic per spec."""
    image = render_ellipses(_jittered_table(spec), spec.size)
    return np.clip(image, 0.0, 1.0)


def phantom_ensemble(base: PhantomSpec, seeds: Iterable[int], progress: bool = True) -> np.ndarray:
    """Stack one phantom per seed, all sharing base's size, jitters and family."""
    seeds = list(seeds)
    if not seeds:
        raise ValueError("Phantom ensemble needs at least one seed")
    images = [
        generate_phantom(base.model_copy(update={"seed": seed}))
        for seed in tqdm(seeds, desc=f"{base.family} phantoms", disable=not progress, leave=False)
    ]
    logger.info(f"Generated {len(images)} {base.family} phantoms of size {base.size}")
    return np.stack(images)
