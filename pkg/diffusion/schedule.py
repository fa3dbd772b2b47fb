"""
Diffusion noise schedules and the reduced time grids used for accelerated sampling.

A schedule holds the per-step retention factors alpha_t (t = 1..T) and their
cumulative products alpha_bar_t (t = 0..T, with alpha_bar_0 = 1).
"""
import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

BETA_CLAMP = 0.999
GRID_STRATEGIES = ("trailing", "uniform")


@dataclass(frozen=True)
class NoiseSchedule:
    """
    alpha[t - 1] holds alpha_t for t = 1..T; alpha_bar[t] holds alpha_bar_t for t = 0..T.
    """
    T: int
    alpha: np.ndarray
    alpha_bar: np.ndarray
    name: str = "custom"

    def __post_init__(self):
        self.alpha.setflags(write=False)
        self.alpha_bar.setflags(write=False)

    @classmethod
    def from_alphas(cls, alpha, name: str = "custom", validate: bool = True) -> "NoiseSchedule":
        alpha = np.asarray(alpha, dtype=np.float64).copy()
        if alpha.ndim != 1 or alpha.size == 0:
            raise ValueError(f"alpha must be a non-empty 1-D sequence, got shape {alpha.shape}")
        alpha_bar = np.concatenate(([1.0], np.cumprod(alpha)))
        schedule = cls(T=int(alpha.size), alpha=alpha, alpha_bar=alpha_bar, name=name)
        if validate:
            schedule.validate()
        return schedule

    @classmethod
    def from_alpha_bar(cls, alpha_bar, name: str = "custom", validate: bool = True) -> "NoiseSchedule":
        """Build from alpha_bar_1..T (alpha_bar_0 = 1 is implied). Used for hand-built test schedules."""
        values = np.asarray(alpha_bar, dtype=np.float64)
        previous = np.concatenate(([1.0], values[:-1]))
        return cls.from_alphas(values / previous, name=name, validate=validate)

    def validate(self):
        if np.any(self.alpha <= 0.0) or np.any(self.alpha >= 1.0):
            raise ValueError(f"All alpha_t must lie in (0, 1) for schedule '{self.name}'")
        if np.any(np.diff(self.alpha_bar) >= 0.0):
            raise ValueError(f"alpha_bar must be strictly decreasing for schedule '{self.name}'")
        products = np.cumprod(self.alpha)
        if not np.allclose(products, self.alpha_bar[1:], rtol=1e-12, atol=0.0):
            raise ValueError(f"alpha_bar does not match the product of alphas for schedule '{self.name}'")

    def alpha_at(self, t: int) -> float:
        if t < 1 or t > self.T:
            raise ValueError(f"alpha_t is defined for 1 <= t <= {self.T}, got t={t}")
        return float(self.alpha[t - 1])

    def alpha_bar_at(self, t: int) -> float:
        if t < 0 or t > self.T:
            raise ValueError(f"alpha_bar_t is defined for 0 <= t <= {self.T}, got t={t}")
        return float(self.alpha_bar[t])

    @property
    def betas(self) -> np.ndarray:
        return 1.0 - self.alpha


@dataclass(frozen=True)
class TimeGrid:
    steps: tuple
    strategy: str

    @property
    def S(self) -> int:
        return len(self.steps)

    def pairs(self):
        """(t, t_prev) for every visited step; the last step goes to t_prev = 0."""
        following = self.steps[1:] + (0,)
        return list(zip(self.steps, following))


def build_cosine_schedule(T: int = 1000, s: float = 0.008) -> NoiseSchedule:
    """
    Cosine schedule: alpha_bar_t = f(t) / f(0) with f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2).

    Per-step betas are clamped to BETA_CLAMP, which only bites at the very last steps.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if s <= 0:
        raise ValueError(f"Cosine offset s must be > 0, got {s}")

    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((steps / T) + s) / (1.0 + s) * math.pi / 2.0) ** 2
    betas = np.minimum(1.0 - f[1:] / f[:-1], BETA_CLAMP)
    schedule = NoiseSchedule.from_alphas(1.0 - betas, name="cosine")
    logger.debug(f"Built cosine schedule T={T}, s={s}, alpha_bar_T={schedule.alpha_bar[-1]:.3e}")
    return schedule


def build_linear_schedule(T: int = 1000, beta_1: float = 1e-4, beta_T: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_1 <= beta_T < 1.0):
        raise ValueError(f"Linear schedule needs 0 < beta_1 <= beta_T < 1, got beta_1={beta_1}, beta_T={beta_T}")

    betas = np.linspace(beta_1, beta_T, T, dtype=np.float64)
    return NoiseSchedule.from_alphas(1.0 - betas, name="linear")


def build_schedule(kind: str, T: int) -> NoiseSchedule:
    """Schedule by CLI/plan name with default parameters."""
    if kind == "cosine":
        return build_cosine_schedule(T)
    if kind == "linear":
        return build_linear_schedule(T)
    raise ValueError(f"Unknown schedule '{kind}', expected 'cosine' or 'linear'")


def _round_half_down(values: np.ndarray) -> np.ndarray:
    return np.ceil(values - 0.5).astype(np.int64)


def make_time_grid(schedule: NoiseSchedule, S: int, strategy: str = "trailing") -> TimeGrid:
    """
    trailing -> (S, S-1, ..., 1), the final S diffusion steps.
    uniform  -> S roughly equispaced indices from T downwards: round(T * (S - k) / S), k = 0..S-1.
    """
    T = schedule.T
    if S < 1 or S > T:
        raise ValueError(f"Grid size must satisfy 1 <= S <= T={T}, got S={S}")

    if strategy == "trailing":
        steps = tuple(range(S, 0, -1))
    elif strategy == "uniform":
        raw = T * (S - np.arange(S, dtype=np.float64)) / S
        indices = np.unique(np.clip(_round_half_down(raw), 1, T))[::-1]
        steps = tuple(int(t) for t in indices)
    else:
        raise ValueError(f"Unknown grid strategy '{strategy}', expected one of {GRID_STRATEGIES}")

    return TimeGrid(steps=steps, strategy=strategy)


def schedule_to_csv(schedule: NoiseSchedule, path) -> Path:
    """Write columns t, alpha, alpha_bar (alpha is empty at t = 0)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["t", "alpha", "alpha_bar"])
        writer.writerow([0, "", repr(float(schedule.alpha_bar[0]))])
        for t in range(1, schedule.T + 1):
            writer.writerow([t, repr(float(schedule.alpha[t - 1])), repr(float(schedule.alpha_bar[t]))])
    logger.info(f"Wrote {schedule.name} schedule (T={schedule.T}) to {path}")
    return path
