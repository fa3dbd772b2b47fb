import asyncio
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from dotenv import load_dotenv
from tqdm import tqdm

from diffusion.denoiser import fit_gaussian_prior, make_denoiser
from diffusion.samplers import SamplerConfig, reconstruct
from diffusion.schedule import NoiseSchedule, build_schedule
from mri.kspace import add_noise, forward, kspace_residual, make_uniform_mask, zero_filled
from mri.phantom import PhantomSpec, generate_phantom, phantom_ensemble
from utils.metrics import psnr, ssim
from utils.plan import ExperimentPlan
from utils.report import export_report, sweep_table, write_rows_csv, write_sweep_csv, write_sweep_svg

load_dotenv()

logging.basicConfig(
    level=os.getenv("PPN_LOG_LEVEL", "INFO").upper(),
    format="%(asctime)s | %(levelname)s | %(name)s | %(message)s",
)
logger = logging.getLogger(__name__)

DATA_RANGE = 1.0
CONSISTENCY_TOL = 1e-8


def default_output_dir() -> Path:
    return Path(os.getenv("PPN_OUTPUT_DIR", "data/output"))


def default_workers() -> int:
    return int(os.getenv("PPN_WORKERS", "4"))


@dataclass
class BenchmarkContext:
    """Everything a cell needs, built once per plan and shared read-only across workers."""
    plan: ExperimentPlan
    schedule: NoiseSchedule
    priors: dict
    masks: dict = field(default_factory=dict)
    truths: dict = field(default_factory=dict)

    def phantom_spec(self, family: str, seed: int) -> PhantomSpec:
        plan = self.plan
        return PhantomSpec(
            size=plan.size,
            center_jitter=plan.center_jitter,
            axis_jitter=plan.axis_jitter,
            rotation_jitter=plan.rotation_jitter,
            intensity_jitter=plan.intensity_jitter,
            seed=seed,
            family=family,
        )


def fit_family_priors(plan: ExperimentPlan) -> dict:
    """One rank-r Gaussian prior per phantom family, fitted on the training seed range."""
    priors = {}
    for family in plan.families:
        base = PhantomSpec(
            size=plan.size,
            center_jitter=plan.center_jitter,
            axis_jitter=plan.axis_jitter,
            rotation_jitter=plan.rotation_jitter,
            intensity_jitter=plan.intensity_jitter,
            family=family,
        )
        ensemble = phantom_ensemble(base, plan.train_seeds)
        priors[family] = fit_gaussian_prior(ensemble, rank=plan.rank, floor=plan.floor)
    return priors


def build_context(plan: ExperimentPlan, priors=None, schedule: NoiseSchedule = None) -> BenchmarkContext:
    if schedule is None:
        schedule = build_schedule(plan.schedule, plan.T)
    if priors is None:
        priors = fit_family_priors(plan)
    elif not isinstance(priors, dict):
        priors = {family: priors for family in plan.families}

    missing = [family for family in plan.families if family not in priors]
    if missing:
        raise ValueError(f"No prior for phantom families {missing}")

    train = set(plan.train_seeds)
    leaked = train.intersection(plan.test_seeds)
    assert not leaked, f"Test phantom seeds {sorted(leaked)[:5]} appear in the prior ensemble"

    context = BenchmarkContext(plan=plan, schedule=schedule, priors=priors)
    for R in plan.accelerations:
        context.masks[R] = make_uniform_mask(plan.size, R, plan.acs_fraction)
    for family in plan.families:
        context.truths[family] = [generate_phantom(context.phantom_spec(family, seed)) for seed in plan.test_seeds]
    return context


def sampler_config(plan: ExperimentPlan, method: str, S: int, seed: int) -> SamplerConfig:
    return SamplerConfig(
        kind=method,
        S=S,
        lam=plan.lam,
        zeta=plan.zeta,
        seed=seed,
        grid_strategy=plan.grid,
        noisor=plan.ppn_noisor if method == "ppn" else "random",
    )


def has_exact_consistency(method: str, plan: ExperimentPlan) -> bool:
    if plan.sigma_e > 0:
        return False
    return method in ("ppn", "ddnm") or (method == "medscore" and plan.lam == 1.0)


def run_cell(context: BenchmarkContext, family: str, method: str, R: float, S: int, trial: int) -> dict:
    """
    Reconstruct one test phantom with one method.

    Failures never propagate: the row comes back with status 'failed' and the error text.
    """
    plan = context.plan
    seed = plan.seed + trial
    row = {
        "family": family,
        "method": method,
        "R": float(R),
        "S": int(S),
        "trial": int(trial),
        "seed": seed,
        "psnr": None,
        "ssim": None,
        "zf_psnr": None,
        "zf_ssim": None,
        "kspace_residual": None,
        "nfe": None,
        "seconds": None,
        "status": "ok",
        "error": "",
    }

    try:
        truth = context.truths[family][trial]
        y = add_noise(forward(truth, context.masks[R]), plan.sigma_e, seed=plan.test_seed + trial)
        x_zf = zero_filled(y)

        started = time.perf_counter()
        denoiser = make_denoiser(context.priors[family])
        result = reconstruct(y, sampler_config(plan, method, S, seed), denoiser, context.schedule)
        row["seconds"] = time.perf_counter() - started

        row["psnr"] = psnr(result.image, truth, DATA_RANGE)
        row["ssim"] = ssim(result.image, truth, DATA_RANGE)
        row["zf_psnr"] = psnr(x_zf, truth, DATA_RANGE)
        row["zf_ssim"] = ssim(x_zf, truth, DATA_RANGE)
        row["kspace_residual"] = kspace_residual(result.image, y)
        row["nfe"] = result.nfe
        logger.debug(f"{family}/{method} R={R:g} S={S} trial={trial}: PSNR {row['psnr']:.2f} dB, SSIM {row['ssim']:.3f}")
    except Exception as e:
        logger.exception(f"Cell {family}/{method} R={R:g} S={S} trial={trial} failed: {e}")
        row["status"] = "failed"
        row["error"] = f"{type(e).__name__}: {e}"

    return row


async def _run_cells(context: BenchmarkContext, cells, workers: int) -> list:
    semaphore = asyncio.Semaphore(workers)
    progress = tqdm(total=len(cells), desc="benchmark cells", leave=False)

    async def bounded(cell):
        async with semaphore:
            row = await asyncio.to_thread(run_cell, context, *cell)
        progress.update(1)
        return row

    try:
        return await asyncio.gather(*(bounded(cell) for cell in cells))
    finally:
        progress.close()


def check_consistency(rows, plan: ExperimentPlan) -> list:
    """
    Check every ok row against its method's consistency contract.
    Violating rows are marked status 'inconsistent' in place and returned.
    """
    violations = []
    for row in rows:
        if row["status"] != "ok" or not has_exact_consistency(row["method"], plan):
            continue
        if not row["kspace_residual"] <= CONSISTENCY_TOL:
            row["status"] = "inconsistent"
            row["error"] = f"k-space residual {row['kspace_residual']:.3e} exceeds {CONSISTENCY_TOL:g}"
            violations.append(row)
            logger.warning(f"{row['method']} R={row['R']:g} S={row['S']} trial={row['trial']}: {row['error']}")
    return violations


def _session_summary(rows, started: float):
    failed = sum(1 for r in rows if r["status"] != "ok")
    logger.info("=" * 50)
    logger.info("SESSION SUMMARY")
    logger.info("=" * 50)
    logger.info(f"Cells run: {len(rows)}, Failed: {failed}, Elapsed: {time.perf_counter() - started:.1f}s")


def run_benchmark(plan: ExperimentPlan, priors=None, schedule: NoiseSchedule = None,
                  workers: int = None, output_dir=None) -> list:
    """
    Run every (family, method, R, S, trial) cell of the plan and return rows sorted by that key.
    With output_dir, also writes results.csv and report.md there.
    """
    started = time.perf_counter()
    context = build_context(plan, priors, schedule)
    workers = workers or plan.workers or default_workers()
    cells = plan.cells()
    logger.info(f"Running {len(cells)} benchmark cells on {workers} workers")

    rows = asyncio.run(_run_cells(context, cells, workers))
    rows.sort(key=lambda r: (r["family"], r["method"], r["R"], r["S"], r["trial"]))
    violations = check_consistency(rows, plan)
    if violations:
        logger.error(f"{len(violations)} of {len(rows)} rows violate their consistency contract")

    if output_dir is not None:
        output_dir = Path(output_dir)
        write_rows_csv(rows, output_dir / "results.csv")
        if any(r["status"] == "ok" for r in rows):
            export_report(rows, output_dir / "report.md")

    _session_summary(rows, started)
    return rows


def sweep_nfe(plan: ExperimentPlan, priors=None, schedule: NoiseSchedule = None,
              workers: int = None, output_dir=None):
    """
    Benchmark the plan across its NFE values and reduce to mean/std curves per method.
    Returns (rows, table); with output_dir, writes sweep.csv plus one SVG per metric and family.
    """
    if len(set(plan.nfes)) < 2:
        raise ValueError(f"An NFE sweep needs at least 2 distinct NFE values, got {plan.nfes}")

    rows = run_benchmark(plan, priors, schedule, workers, output_dir=output_dir)
    table = sweep_table(rows)
    if output_dir is not None and table:
        output_dir = Path(output_dir)
        write_sweep_csv(table, output_dir / "sweep.csv")
        for family in sorted({e["family"] for e in table}):
            for metric in ("psnr", "ssim"):
                write_sweep_svg(table, metric, output_dir / f"sweep_{family}_{metric}.svg", family=family)
    return rows, table


def mean_metric(rows, method: str, metric: str, **match) -> float:
    """Mean of a metric over ok rows of one method, optionally filtered on other columns."""
    values = [
        r[metric] for r in rows
        if r["method"] == method and r["status"] == "ok" and all(r[k] == v for k, v in match.items())
    ]
    if not values:
        raise ValueError(f"No successful rows for method '{method}' matching {match}")
    return float(np.mean(values))
