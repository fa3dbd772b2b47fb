import argparse
import csv
import logging
import os
import sys
from pathlib import Path

from dotenv import load_dotenv

from benchmark import default_output_dir, run_benchmark, sweep_nfe
from diffusion.denoiser import fit_gaussian_prior, fit_gmm_prior, make_denoiser
from diffusion.samplers import CONTROLLABLE_KINDS, SamplerConfig, reconstruct
from diffusion.schedule import build_schedule, make_time_grid, schedule_to_csv
from mri.kspace import add_noise, forward, make_uniform_mask
from mri.phantom import PhantomSpec, generate_phantom
from utils.grid_io import (
    load_image,
    load_mask,
    load_measurement,
    load_prior,
    save_grid,
    save_image,
    save_mask,
    save_measurement,
    save_prior,
)
from utils.metrics import evaluate
from utils.plan import load_plan

load_dotenv()

logging.basicConfig(
    level=os.getenv("PPN_LOG_LEVEL", "INFO").upper(),
    format="%(asctime)s | %(levelname)s | %(name)s | %(message)s",
)
logger = logging.getLogger(__name__)


def cmd_schedule(args):
    schedule = build_schedule(args.schedule, args.T)
    grid = make_time_grid(schedule, args.steps, args.grid)
    logger.info(f"{args.grid} grid with S={grid.S}: {grid.steps[:5]}{' ...' if grid.S > 5 else ''}")
    schedule_to_csv(schedule, args.out)


def _phantom_spec(args, seed: int) -> PhantomSpec:
    return PhantomSpec(
        size=args.size,
        center_jitter=args.center_jitter,
        axis_jitter=args.axis_jitter,
        rotation_jitter=args.rotation_jitter,
        intensity_jitter=args.intensity_jitter,
        seed=seed,
        family=args.family,
    )


def cmd_phantom(args):
    if args.count == 1:
        save_image(generate_phantom(_phantom_spec(args, args.seed)), args.out)
        return
    out_dir = Path(args.out)
    for seed in range(args.seed, args.seed + args.count):
        save_grid(generate_phantom(_phantom_spec(args, seed)), out_dir / f"phantom_{seed:06d}.grd")
    logger.info(f"Wrote {args.count} phantoms to {out_dir}")


def cmd_fit_prior(args):
    ensemble_dir = Path(args.ensemble_dir)
    files = sorted(ensemble_dir.glob("*.grd")) + sorted(ensemble_dir.glob("*.png"))
    if not files:
        raise ValueError(f"No .grd or .png images found in {ensemble_dir}")
    ensemble = [load_image(path) for path in files]
    logger.info(f"Loaded {len(ensemble)} ensemble images from {ensemble_dir}")

    if args.kind == "gmm":
        prior = fit_gmm_prior(ensemble, components=args.components, floor=args.floor, seed=args.seed)
    else:
        prior = fit_gaussian_prior(ensemble, rank=args.rank, floor=args.floor)
    save_prior(prior, args.out)


def cmd_mask(args):
    mask = make_uniform_mask(args.width, args.accel, args.acs)
    logger.info(f"Mask keeps {mask.n_kept}/{mask.width} columns (actual acceleration {mask.actual_acceleration:.3f})")
    save_mask(mask, args.out)


def cmd_simulate(args):
    image = load_image(args.image)
    y = add_noise(forward(image, load_mask(args.mask)), args.sigma, seed=args.seed)
    save_measurement(y, args.out)


def cmd_recon(args):
    y = load_measurement(args.measurement)
    denoiser = make_denoiser(load_prior(args.prior))
    schedule = build_schedule(args.schedule, args.T)
    config = SamplerConfig(
        kind=args.method,
        S=args.nfe,
        eta=args.eta,
        lam=args.lam,
        zeta=args.zeta,
        seed=args.seed,
        grid_strategy=args.grid,
        noisor=args.noisor,
        init=args.init,
    )

    diagnostics_file = None
    on_step = None
    if args.diagnostics:
        path = Path(args.diagnostics)
        path.parent.mkdir(parents=True, exist_ok=True)
        diagnostics_file = open(path, "w", newline="", encoding="utf-8")
        writer = csv.writer(diagnostics_file, lineterminator="\r\n")
        writer.writerow(["t", "fidelity", "ms"])

        def on_step(record):
            writer.writerow([record.t, repr(record.fidelity), f"{record.ms:.3f}"])
            diagnostics_file.flush()

    try:
        result = reconstruct(y, config, denoiser, schedule, on_step=on_step)
    finally:
        if diagnostics_file is not None:
            diagnostics_file.close()

    logger.info(f"{config.kind} finished: {result.nfe} NFEs in {result.seconds:.2f}s")
    if result.guidance_skipped:
        logger.warning(f"Guidance skipped on {result.guidance_skipped} steps (zero residual)")
    save_image(result.image, args.out)


def cmd_eval(args):
    report = evaluate(load_image(args.recon), load_image(args.truth), args.range)
    print("psnr,ssim,data_range")
    print(f"{report.psnr_db!r},{report.ssim!r},{report.data_range!r}")


def cmd_bench(args):
    plan = load_plan(args.plan)
    run_benchmark(plan, workers=args.workers, output_dir=args.out_dir or default_output_dir())


def cmd_sweep(args):
    plan = load_plan(args.plan)
    sweep_nfe(plan, workers=args.workers, output_dir=args.out_dir or default_output_dir())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Accelerated controllable diffusion sampling for undersampled MRI")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("schedule", help="Export a noise schedule as CSV and show its time grid")
    p.add_argument("--schedule", choices=["cosine", "linear"], default="cosine")
    p.add_argument("--T", type=int, default=1000)
    p.add_argument("--steps", type=int, default=50, help="Grid size S")
    p.add_argument("--grid", choices=["trailing", "uniform"], default="trailing")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("phantom", help="Render one phantom, or --count phantoms into a directory")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--family", choices=["modified", "original"], default="modified")
    p.add_argument("--center-jitter", type=float, default=0.0)
    p.add_argument("--axis-jitter", type=float, default=0.0)
    p.add_argument("--rotation-jitter", type=float, default=0.0)
    p.add_argument("--intensity-jitter", type=float, default=0.0)
    p.add_argument("--out", required=True, help=".grd/.png file, or a directory when --count > 1")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("fit-prior", help="Fit a closed-form prior to a directory of images")
    p.add_argument("--ensemble-dir", required=True)
    p.add_argument("--kind", choices=["gaussian", "gmm"], default="gaussian")
    p.add_argument("--rank", type=int, default=32)
    p.add_argument("--components", type=int, default=4)
    p.add_argument("--floor", type=float, default=1e-2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_prior)

    p = sub.add_parser("mask", help="Build a 1-D Cartesian undersampling mask")
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--accel", type=float, default=4)
    p.add_argument("--acs", type=float, default=0.04)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("simulate", help="Simulate a (noisy) undersampled measurement of an image")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("recon", help="Reconstruct an image from a measurement")
    p.add_argument("--method", choices=list(CONTROLLABLE_KINDS), default="ppn")
    p.add_argument("--nfe", type=int, default=50)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--zeta", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", choices=["trailing", "uniform"], default=None)
    p.add_argument("--noisor", choices=["random", "predicted"], default="random")
    p.add_argument("--init", choices=["zero-filled", "noise"], default=None)
    p.add_argument("--schedule", choices=["cosine", "linear"], default="cosine")
    p.add_argument("--T", type=int, default=1000)
    p.add_argument("--measurement", required=True)
    p.add_argument("--prior", required=True)
    p.add_argument("--diagnostics", help="Stream per-step t, fidelity, ms rows to this CSV")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_recon)

    p = sub.add_parser("eval", help="PSNR/SSIM of a reconstruction against ground truth")
    p.add_argument("--recon", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--range", type=float, default=1.0)
    p.set_defaults(func=cmd_eval)

    for name, func, help_text in (
        ("bench", cmd_bench, "Run a benchmark plan and write results.csv + report.md"),
        ("sweep", cmd_sweep, "Run an NFE sweep plan and write sweep.csv + SVG plots"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--plan", required=True)
        p.add_argument("--out-dir", default=None, help="Defaults to PPN_OUTPUT_DIR or data/output")
        p.add_argument("--workers", type=int, default=None)
        p.set_defaults(func=func)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ValueError, FileNotFoundError) as e:
        logger.error(f"{args.command} failed: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
