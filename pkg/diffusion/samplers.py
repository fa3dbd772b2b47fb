"""
Reverse diffusion samplers: unconditional DDPM/DDIM, the Predictor-Projector-Noisor
(PPN) sampler and three controllable baselines (DDNM-, MedScore- and DPS-style).

Every sampler is a loop over a TimeGrid of (t, t_prev) pairs with exactly one
noise-prediction call per visited step. Randomness comes from counter-based streams
keyed by (seed, stream, t), so runs that share a time index draw the same noise there.
"""
import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from diffusion.denoiser import CountingDenoiser, DenoiserModel
from diffusion.schedule import NoiseSchedule, TimeGrid, make_time_grid
from mri.kspace import (
    Measurement,
    apply_mask,
    blend_project,
    data_fidelity,
    fft2c,
    ifft2c,
    project,
    sample_noisy_measurement,
    zero_filled,
)

logger = logging.getLogger(__name__)

KINDS = ("ddpm", "ddim", "ppn", "ddnm", "medscore", "dps")
CONTROLLABLE_KINDS = ("ppn", "ddnm", "medscore", "dps")

INIT_STREAM = 0
STEP_STREAM = 1
MEASUREMENT_STREAM = 2


class SamplerConfig(BaseModel):
    """
    Knobs for one sampler run. eta, grid_strategy and init default by kind when left unset:
    ppn runs the trailing grid from a noisy zero-filled image, everything else a uniform
    grid from pure noise; ddim defaults to eta = 0, the stochastic baselines to eta = 1.
    """
    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    kind: Literal["ddpm", "ddim", "ppn", "ddnm", "medscore", "dps"]
    S: int = Field(50, ge=1)
    eta: Optional[float] = Field(None, ge=0.0, le=1.0)
    lam: float = Field(1.0, ge=0.0, le=1.0, alias="lambda")
    zeta: float = Field(10.0, ge=0.0)
    seed: int = Field(0, ge=0)
    grid_strategy: Optional[Literal["trailing", "uniform"]] = None
    init: Optional[Literal["zero-filled", "noise"]] = None
    noisor: Literal["random", "predicted"] = "random"

    @property
    def resolved_eta(self) -> float:
        if self.eta is not None:
            return self.eta
        return 0.0 if self.kind == "ddim" else 1.0

    @property
    def resolved_grid(self) -> str:
        if self.grid_strategy is not None:
            return self.grid_strategy
        return "trailing" if self.kind == "ppn" else "uniform"

    @property
    def resolved_init(self) -> str:
        if self.init is not None:
            return self.init
        return "zero-filled" if self.kind == "ppn" else "noise"


@dataclass
class StepRecord:
    t: int
    fidelity: float
    ms: float
    note: str = ""


@dataclass
class ReconResult:
    image: np.ndarray
    diagnostics: list
    nfe: int
    seed: int
    kind: str = ""
    grid: tuple = ()
    vjp_calls: int = 0
    guidance_skipped: int = 0
    seconds: float = 0.0


@dataclass
class _Streams:
    seed: int
    shared: Optional[np.random.Generator] = None

    def get(self, stream: int, t: int) -> np.random.Generator:
        if self.shared is not None:
            return self.shared
        return step_rng(self.seed, t, stream)


def step_rng(seed: int, t: int, stream: int = STEP_STREAM) -> np.random.Generator:
    """Counter-based generator for one (seed, stream, t) triple."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(stream, t))))


# -------------------------------------------------------------------
# Single-step operators
# -------------------------------------------------------------------

def _levels(schedule: NoiseSchedule, t: int, t_prev: int):
    if t < 1:
        raise ValueError(f"Reverse steps need t >= 1, got t={t}")
    if not (0 <= t_prev < t):
        raise ValueError(f"Reverse steps need 0 <= t_prev < t, got t={t}, t_prev={t_prev}")
    return schedule.alpha_bar_at(t), schedule.alpha_bar_at(t_prev)


def _x0_from_eps(x_t: np.ndarray, eps: np.ndarray, alpha_bar: float) -> np.ndarray:
    return (x_t - math.sqrt(1.0 - alpha_bar) * eps) / math.sqrt(alpha_bar)


def _draw(rng: np.random.Generator, shape, noise: Optional[np.ndarray]) -> np.ndarray:
    if noise is not None:
        return noise
    return rng.standard_normal(shape)


def ddim_sigma(alpha_bar_t: float, alpha_bar_prev: float, eta: float) -> float:
    """sigma_t = eta * sqrt((1 - ab_prev) / (1 - ab_t)) * sqrt(1 - ab_t / ab_prev)."""
    if eta == 0.0 or alpha_bar_t >= 1.0:
        return 0.0
    ratio = max(1.0 - alpha_bar_t / alpha_bar_prev, 0.0)
    return eta * math.sqrt((1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t)) * math.sqrt(ratio)


def _ddim_update(x0, eps, alpha_bar_prev, sigma, rng, noise):
    direction = 1.0 - alpha_bar_prev - sigma * sigma
    if direction < -1e-12:
        raise ValueError(f"DDIM sigma^2={sigma * sigma} exceeds 1 - alpha_bar_prev={1.0 - alpha_bar_prev}")
    out = math.sqrt(alpha_bar_prev) * x0 + math.sqrt(max(direction, 0.0)) * eps
    if sigma > 0.0:
        out = out + sigma * _draw(rng, x0.shape, noise)
    return out


def predict_x0(x_t: np.ndarray, t: int, denoiser: DenoiserModel, schedule: NoiseSchedule) -> np.ndarray:
    """x_{0|t} = (x_t - sqrt(1 - ab_t) * eps_theta(x_t, t)) / sqrt(ab_t)."""
    if t < 1:
        raise ValueError(f"x_0 prediction needs t >= 1, got t={t}")
    return _x0_from_eps(x_t, denoiser.eps(x_t, t, schedule), schedule.alpha_bar_at(t))


def ddpm_step(x_t: np.ndarray, t: int, denoiser: DenoiserModel, schedule: NoiseSchedule,
              rng: Optional[np.random.Generator] = None, noise: Optional[np.ndarray] = None) -> np.ndarray:
    """x_{t-1} = (x_t - (1 - a_t) / sqrt(1 - ab_t) * eps) / sqrt(a_t) + sqrt(1 - a_t) * eps_t."""
    if t < 1:
        raise ValueError(f"DDPM steps need t >= 1, got t={t}")
    alpha = schedule.alpha_at(t)
    alpha_bar = schedule.alpha_bar_at(t)
    eps = denoiser.eps(x_t, t, schedule)
    mean = (x_t - (1.0 - alpha) / math.sqrt(1.0 - alpha_bar) * eps) / math.sqrt(alpha)
    return mean + math.sqrt(1.0 - alpha) * _draw(rng, x_t.shape, noise)


def ddim_step(x_t: np.ndarray, t: int, t_prev: int, denoiser: DenoiserModel, schedule: NoiseSchedule,
              eta: float = 0.0, rng: Optional[np.random.Generator] = None,
              noise: Optional[np.ndarray] = None) -> np.ndarray:
    """x_{t_prev} = sqrt(ab_prev) x_{0|t} + sqrt(1 - ab_prev - sigma^2) eps_theta + sigma eps_t."""
    if not (0.0 <= eta <= 1.0):
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    alpha_bar, alpha_bar_prev = _levels(schedule, t, t_prev)
    eps = denoiser.eps(x_t, t, schedule)
    x0 = _x0_from_eps(x_t, eps, alpha_bar)
    sigma = ddim_sigma(alpha_bar, alpha_bar_prev, eta)
    return _ddim_update(x0, eps, alpha_bar_prev, sigma, rng, noise)


def ppn_init(y: Measurement, S: int, schedule: NoiseSchedule,
             rng: Optional[np.random.Generator] = None, noise: Optional[np.ndarray] = None) -> np.ndarray:
    """x_S = sqrt(ab_S) x_zf + sqrt(1 - ab_S) eps_S."""
    if S < 1 or S > schedule.T:
        raise ValueError(f"PPN start level must satisfy 1 <= S <= T={schedule.T}, got S={S}")
    alpha_bar = schedule.alpha_bar_at(S)
    x_zf = zero_filled(y)
    return math.sqrt(alpha_bar) * x_zf + math.sqrt(1.0 - alpha_bar) * _draw(rng, x_zf.shape, noise)


def _ppn_update(x_t, t, t_prev, y, denoiser, schedule, rng, noisor, noise):
    alpha_bar, alpha_bar_prev = _levels(schedule, t, t_prev)
    eps = denoiser.eps(x_t, t, schedule)
    x0 = _x0_from_eps(x_t, eps, alpha_bar)   # Prediction
    x0_proj = project(x0, y)                 # Projection
    if alpha_bar_prev >= 1.0:
        return x0_proj, x0_proj
    if noisor == "predicted":                # Noisor
        direction = eps
    else:
        direction = _draw(rng, x0_proj.shape, noise)
    x_prev = math.sqrt(alpha_bar_prev) * x0_proj + math.sqrt(1.0 - alpha_bar_prev) * direction
    return x_prev, x0_proj


def ppn_step(x_t: np.ndarray, t: int, y: Measurement, denoiser: DenoiserModel, schedule: NoiseSchedule,
             rng: Optional[np.random.Generator] = None, t_prev: Optional[int] = None,
             noisor: str = "random", noise: Optional[np.ndarray] = None) -> np.ndarray:
    """x_{t-1} = sqrt(ab_{t-1}) P_y(x_{0|t}) + sqrt(1 - ab_{t-1}) eps_t; returns P_y(x_{0|1}) when ab_{t-1} = 1."""
    t_prev = t - 1 if t_prev is None else t_prev
    return _ppn_update(x_t, t, t_prev, y, denoiser, schedule, rng, noisor, noise)[0]


def _ddnm_update(x_t, t, t_prev, y, denoiser, schedule, eta, rng, noise):
    alpha_bar, alpha_bar_prev = _levels(schedule, t, t_prev)
    eps = denoiser.eps(x_t, t, schedule)
    x0_proj = project(_x0_from_eps(x_t, eps, alpha_bar), y)
    sigma = ddim_sigma(alpha_bar, alpha_bar_prev, eta)
    return _ddim_update(x0_proj, eps, alpha_bar_prev, sigma, rng, noise), x0_proj


def ddnm_step(x_t: np.ndarray, t: int, t_prev: int, y: Measurement, denoiser: DenoiserModel,
              schedule: NoiseSchedule, eta: float = 1.0, rng: Optional[np.random.Generator] = None,
              noise: Optional[np.ndarray] = None) -> np.ndarray:
    """Project x_{0|t}, then take the stochastic DDIM update with the projected prediction."""
    return _ddnm_update(x_t, t, t_prev, y, denoiser, schedule, eta, rng, noise)[0]


def medscore_step(x_t: np.ndarray, t: int, t_prev: int, y: Measurement, denoiser: DenoiserModel,
                  schedule: NoiseSchedule, eta: float = 1.0, lam: float = 1.0,
                  rng: Optional[np.random.Generator] = None, measurement_rng: Optional[np.random.Generator] = None,
                  noise: Optional[np.ndarray] = None) -> np.ndarray:
    """Unconditional DDIM update to x_{t_prev}, then blend its kept k-space columns towards y_{t_prev}."""
    if not (0.0 <= lam <= 1.0):
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    alpha_bar, alpha_bar_prev = _levels(schedule, t, t_prev)
    eps = denoiser.eps(x_t, t, schedule)
    x0 = _x0_from_eps(x_t, eps, alpha_bar)
    x_prev = _ddim_update(x0, eps, alpha_bar_prev, ddim_sigma(alpha_bar, alpha_bar_prev, eta), rng, noise)
    if lam == 0.0:
        return x_prev
    measurement_rng = measurement_rng if measurement_rng is not None else rng
    y_prev = sample_noisy_measurement(y, alpha_bar_prev, measurement_rng)
    return blend_project(x_prev, y_prev, y.mask, lam)


def dps_gradient(x_t: np.ndarray, t: int, y: Measurement, denoiser: DenoiserModel, schedule: NoiseSchedule,
                 eps: Optional[np.ndarray] = None):
    """
    Gradient of ||y - M F x_{0|t}(x_t)||^2 with respect to x_t, taken through the predictor:
    (2 / sqrt(ab_t)) * (g - sqrt(1 - ab_t) * vjp(g)), g = real(F^-1 M r), r = M F x_{0|t} - y.

    Returns (gradient, residual norm); the gradient is None when the residual vanishes.
    """
    alpha_bar = schedule.alpha_bar_at(t)
    if eps is None:
        eps = denoiser.eps(x_t, t, schedule)
    x0 = _x0_from_eps(x_t, eps, alpha_bar)
    residual = apply_mask(fft2c(x0), y.mask) - y.kspace
    norm = float(np.linalg.norm(residual))
    if norm == 0.0:
        return None, 0.0
    g = ifft2c(residual)
    grad = (2.0 / math.sqrt(alpha_bar)) * (g - math.sqrt(1.0 - alpha_bar) * denoiser.vjp(x_t, t, schedule, g))
    return grad, norm


def _dps_update(x_t, t, t_prev, y, denoiser, schedule, eta, zeta, rng, noise):
    alpha_bar, alpha_bar_prev = _levels(schedule, t, t_prev)
    eps = denoiser.eps(x_t, t, schedule)
    x0 = _x0_from_eps(x_t, eps, alpha_bar)
    x_prev = _ddim_update(x0, eps, alpha_bar_prev, ddim_sigma(alpha_bar, alpha_bar_prev, eta), rng, noise)
    fidelity = data_fidelity(x0, y)
    if zeta == 0.0:
        return x_prev, fidelity, False
    grad, norm = dps_gradient(x_t, t, y, denoiser, schedule, eps=eps)
    if grad is None:
        return x_prev, fidelity, True
    return x_prev - (zeta / norm) * grad, fidelity, False


def dps_step(x_t: np.ndarray, t: int, t_prev: int, y: Measurement, denoiser: DenoiserModel,
             schedule: NoiseSchedule, eta: float = 1.0, zeta: float = 10.0,
             rng: Optional[np.random.Generator] = None, noise: Optional[np.ndarray] = None) -> np.ndarray:
    """DDIM update followed by a residual-normalized gradient step zeta / ||r|| * grad."""
    return _dps_update(x_t, t, t_prev, y, denoiser, schedule, eta, zeta, rng, noise)[0]


# -------------------------------------------------------------------
# Full runs
# -------------------------------------------------------------------

def _grid_for(config: SamplerConfig, schedule: NoiseSchedule) -> TimeGrid:
    return make_time_grid(schedule, config.S, config.resolved_grid)


def _initial_state(y: Measurement, config: SamplerConfig, grid: TimeGrid, schedule: NoiseSchedule,
                   streams: _Streams) -> np.ndarray:
    rng = streams.get(INIT_STREAM, grid.steps[0])
    if config.resolved_init == "zero-filled":
        return ppn_init(y, grid.steps[0], schedule, rng)
    return rng.standard_normal(y.shape)


def _loop(config: SamplerConfig, grid: TimeGrid, x: np.ndarray, step: Callable,
          counter: CountingDenoiser, on_step: Optional[Callable]) -> ReconResult:
    diagnostics = []
    skipped = 0
    started = time.perf_counter()
    for t, t_prev in grid.pairs():
        tick = time.perf_counter()
        x, fidelity, note = step(x, t, t_prev)
        if note == "guidance-skipped":
            skipped += 1
        record = StepRecord(t=t, fidelity=fidelity, ms=(time.perf_counter() - tick) * 1000.0, note=note)
        diagnostics.append(record)
        logger.debug(f"{config.kind} t={t}->{t_prev} fidelity={fidelity:.3e} ({record.ms:.2f} ms)")
        if on_step is not None:
            on_step(record)

    return ReconResult(
        image=x,
        diagnostics=diagnostics,
        nfe=counter.eps_calls,
        seed=config.seed,
        kind=config.kind,
        grid=grid.steps,
        vjp_calls=counter.vjp_calls,
        guidance_skipped=skipped,
        seconds=time.perf_counter() - started,
    )


def _require_kind(config: SamplerConfig, kinds):
    if config.kind not in kinds:
        raise ValueError(f"Sampler config kind '{config.kind}' is not one of {kinds}")


def run_ppn(y: Measurement, config: SamplerConfig, denoiser: DenoiserModel, schedule: NoiseSchedule,
            on_step: Optional[Callable] = None) -> ReconResult:
    """Predictor-Projector-Noisor: predict x_{0|t}, project onto the measurement, re-noise to t_prev."""
    _require_kind(config, ("ppn",))
    counter = CountingDenoiser(denoiser)
    streams = _Streams(config.seed)
    grid = _grid_for(config, schedule)
    x = _initial_state(y, config, grid, schedule, streams)

    def step(x_t, t, t_prev):
        x_prev, x0_proj = _ppn_update(
            x_t, t, t_prev, y, counter, schedule, streams.get(STEP_STREAM, t), config.noisor, None
        )
        return x_prev, data_fidelity(x0_proj, y), ""

    return _loop(config, grid, x, step, counter, on_step)


def run_ddnm(y: Measurement, config: SamplerConfig, denoiser: DenoiserModel, schedule: NoiseSchedule,
             on_step: Optional[Callable] = None) -> ReconResult:
    _require_kind(config, ("ddnm",))
    counter = CountingDenoiser(denoiser)
    streams = _Streams(config.seed)
    grid = _grid_for(config, schedule)
    x = _initial_state(y, config, grid, schedule, streams)
    eta = config.resolved_eta

    def step(x_t, t, t_prev):
        x_prev, x0_proj = _ddnm_update(x_t, t, t_prev, y, counter, schedule, eta, streams.get(STEP_STREAM, t), None)
        return x_prev, data_fidelity(x0_proj, y), ""

    return _loop(config, grid, x, step, counter, on_step)


def run_medscore(y: Measurement, config: SamplerConfig, denoiser: DenoiserModel, schedule: NoiseSchedule,
                 on_step: Optional[Callable] = None) -> ReconResult:
    _require_kind(config, ("medscore",))
    counter = CountingDenoiser(denoiser)
    streams = _Streams(config.seed)
    grid = _grid_for(config, schedule)
    x = _initial_state(y, config, grid, schedule, streams)
    eta = config.resolved_eta

    def step(x_t, t, t_prev):
        x_prev = medscore_step(
            x_t, t, t_prev, y, counter, schedule, eta=eta, lam=config.lam,
            rng=streams.get(STEP_STREAM, t), measurement_rng=streams.get(MEASUREMENT_STREAM, t),
        )
        return x_prev, data_fidelity(x_prev, y), ""

    return _loop(config, grid, x, step, counter, on_step)


def run_dps(y: Measurement, config: SamplerConfig, denoiser: DenoiserModel, schedule: NoiseSchedule,
            on_step: Optional[Callable] = None) -> ReconResult:
    _require_kind(config, ("dps",))
    counter = CountingDenoiser(denoiser)
    streams = _Streams(config.seed)
    grid = _grid_for(config, schedule)
    x = _initial_state(y, config, grid, schedule, streams)
    eta = config.resolved_eta

    def step(x_t, t, t_prev):
        x_prev, fidelity, skipped = _dps_update(
            x_t, t, t_prev, y, counter, schedule, eta, config.zeta, streams.get(STEP_STREAM, t), None
        )
        if skipped:
            logger.warning(f"DPS residual vanished at t={t}; guidance skipped")
        return x_prev, fidelity, "guidance-skipped" if skipped else ""

    return _loop(config, grid, x, step, counter, on_step)


def run_unconditional(config: SamplerConfig, denoiser: DenoiserModel, schedule: NoiseSchedule, shape,
                      rng: Optional[np.random.Generator] = None, on_step: Optional[Callable] = None) -> ReconResult:
    """
    Start from x_T ~ N(0, I) of the given shape and apply DDPM or DDIM steps over the grid.
    A leading batch axis in `shape` runs independent chains side by side. With `rng`
    every draw comes from that single generator; otherwise from per-step streams of config.seed.
    """
    _require_kind(config, ("ddpm", "ddim"))
    counter = CountingDenoiser(denoiser)
    streams = _Streams(config.seed, shared=rng)
    grid = _grid_for(config, schedule)
    if config.kind == "ddpm" and any(t - t_prev != 1 for t, t_prev in grid.pairs()):
        raise ValueError(f"DDPM steps are one level at a time; grid {config.resolved_grid} with S={config.S} skips levels")

    x = streams.get(INIT_STREAM, grid.steps[0]).standard_normal(tuple(shape))
    eta = config.resolved_eta

    def step(x_t, t, t_prev):
        rng_t = streams.get(STEP_STREAM, t)
        if config.kind == "ddpm":
            return ddpm_step(x_t, t, counter, schedule, rng_t), math.nan, ""
        return ddim_step(x_t, t, t_prev, counter, schedule, eta, rng_t), math.nan, ""

    return _loop(config, grid, x, step, counter, on_step)


RUNNERS = {
    "ppn": run_ppn,
    "ddnm": run_ddnm,
    "medscore": run_medscore,
    "dps": run_dps,
}


def reconstruct(y: Measurement, config: SamplerConfig, denoiser: DenoiserModel, schedule: NoiseSchedule,
                on_step: Optional[Callable] = None) -> ReconResult:
    """Dispatch a controllable reconstruction by config.kind."""
    if config.kind not in RUNNERS:
        raise ValueError(f"'{config.kind}' is not a controllable sampler; expected one of {CONTROLLABLE_KINDS}")
    return RUNNERS[config.kind](y, config, denoiser, schedule, on_step=on_step)
