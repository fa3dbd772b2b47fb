import math

import numpy as np
import pytest
from pydantic import ValidationError

from conftest import FixedEps, random_gaussian_prior
from diffusion.denoiser import (
    GaussianDenoiser,
    ZeroDenoiser,
    eps_gaussian,
    fit_gaussian_prior,
    posterior_mean_gaussian,
)
from diffusion.samplers import (
    INIT_STREAM,
    SamplerConfig,
    ddim_sigma,
    ddim_step,
    ddnm_step,
    ddpm_step,
    dps_gradient,
    dps_step,
    medscore_step,
    ppn_init,
    ppn_step,
    predict_x0,
    reconstruct,
    run_ddnm,
    run_dps,
    run_medscore,
    run_ppn,
    run_unconditional,
    step_rng,
)
from diffusion.schedule import NoiseSchedule, build_cosine_schedule
from mri.kspace import (
    CartesianMask,
    Measurement,
    apply_mask,
    fft2c,
    forward,
    ifft2c,
    kspace_residual,
    make_uniform_mask,
    project,
)


@pytest.fixture(scope="module")
def schedule():
    return build_cosine_schedule(200)


@pytest.fixture(scope="module")
def problem(small_prior, symmetric_mask_8):
    truth = small_prior.sample(np.random.default_rng(21))
    return truth, forward(truth, symmetric_mask_8), GaussianDenoiser(small_prior)


# ── Config ───────────────────────────────────────────────────────────────────

def test_config_defaults_by_kind():
    ppn = SamplerConfig(kind="ppn")
    assert (ppn.resolved_grid, ppn.resolved_init, ppn.resolved_eta) == ("trailing", "zero-filled", 1.0)
    ddnm = SamplerConfig(kind="ddnm")
    assert (ddnm.resolved_grid, ddnm.resolved_init, ddnm.resolved_eta) == ("uniform", "noise", 1.0)
    assert SamplerConfig(kind="ddim").resolved_eta == 0.0
    assert SamplerConfig(kind="medscore", **{"lambda": 0.5}).lam == 0.5
    assert SamplerConfig(kind="medscore", lam=0.25).lam == 0.25


@pytest.mark.parametrize("fields", [
    {"S": 0}, {"eta": 1.5}, {"lam": -0.1}, {"zeta": -1.0}, {"kind": "sde"}, {"noisor": "none"},
])
def test_config_rejects_invalid(fields):
    with pytest.raises(ValidationError):
        SamplerConfig(**{"kind": "ppn", **fields})


# ── Single steps ─────────────────────────────────────────────────────────────

def test_predict_x0_inverts_forward_noising(cosine):
    rng = np.random.default_rng(0)
    for _ in range(100):
        t = int(rng.integers(1, 1001))
        x0, eps = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
        alpha_bar = cosine.alpha_bar_at(t)
        x_t = math.sqrt(alpha_bar) * x0 + math.sqrt(1 - alpha_bar) * eps
        np.testing.assert_allclose(predict_x0(x_t, t, FixedEps(eps), cosine), x0, atol=1e-10)


def test_predict_x0_scalar_and_zero_denoiser():
    schedule = NoiseSchedule.from_alpha_bar([0.25])
    x = np.ones((2, 2))
    np.testing.assert_allclose(predict_x0(x, 1, FixedEps(np.full((2, 2), 0.5)), schedule),
                               (1 - math.sqrt(0.75) * 0.5) / 0.5)
    assert predict_x0(x, 1, FixedEps(np.full((2, 2), 0.5)), schedule)[0, 0] == pytest.approx(1.1340, abs=1e-4)
    np.testing.assert_allclose(predict_x0(x, 1, ZeroDenoiser(), schedule), x / 0.5)
    with pytest.raises(ValueError):
        predict_x0(x, 0, ZeroDenoiser(), schedule)


def test_ddpm_step_scalar_example():
    schedule = NoiseSchedule.from_alpha_bar([0.7, 0.5])
    alpha = 0.5 / 0.7
    out = ddpm_step(np.ones((1, 1)), 2, FixedEps(np.full((1, 1), 0.2)), schedule, noise=np.zeros((1, 1)))
    expected = (1 - (1 - alpha) / math.sqrt(0.5) * 0.2) / math.sqrt(alpha)
    assert out[0, 0] == pytest.approx(expected, rel=1e-14)


def test_ddpm_step_with_unit_alpha_is_identity():
    schedule = NoiseSchedule.from_alpha_bar([0.5, 0.5], validate=False)
    x = np.random.default_rng(1).standard_normal((3, 3))
    out = ddpm_step(x, 2, FixedEps(np.ones((3, 3))), schedule, rng=np.random.default_rng(2))
    np.testing.assert_array_equal(out, x)


def test_ddpm_matches_ddim_with_posterior_sigma(cosine):
    rng = np.random.default_rng(3)
    zero = np.zeros((4, 4))
    for _ in range(100):
        t = int(rng.integers(1, 1001))
        x_t, eps = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
        ab_t, ab_prev = cosine.alpha_bar_at(t), cosine.alpha_bar_at(t - 1)
        sigma = ddim_sigma(ab_t, ab_prev, 1.0)
        assert sigma ** 2 == pytest.approx((1 - ab_prev) / (1 - ab_t) * (1 - cosine.alpha_at(t)), rel=1e-10, abs=1e-300)
        ddpm = ddpm_step(x_t, t, FixedEps(eps), cosine, noise=zero)
        ddim = ddim_step(x_t, t, t - 1, FixedEps(eps), cosine, eta=1.0, noise=zero)
        np.testing.assert_allclose(ddpm, ddim, atol=1e-10, rtol=0)


def test_ddim_deterministic_resynthesis(cosine):
    rng = np.random.default_rng(4)
    x0, eps = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
    t, t_prev = 700, 420
    x_t = math.sqrt(cosine.alpha_bar_at(t)) * x0 + math.sqrt(1 - cosine.alpha_bar_at(t)) * eps
    out = ddim_step(x_t, t, t_prev, FixedEps(eps), cosine, eta=0.0)
    expected = math.sqrt(cosine.alpha_bar_at(t_prev)) * x0 + math.sqrt(1 - cosine.alpha_bar_at(t_prev)) * eps
    np.testing.assert_allclose(out, expected, atol=1e-10)

    final = ddim_step(x_t, t, 0, FixedEps(eps), cosine, eta=0.0)
    np.testing.assert_allclose(final, x0, atol=1e-10)


def test_ddim_step_errors(cosine):
    x = np.zeros((2, 2))
    with pytest.raises(ValueError):
        ddim_step(x, 10, 10, ZeroDenoiser(), cosine)
    with pytest.raises(ValueError):
        ddim_step(x, 10, 5, ZeroDenoiser(), cosine, eta=1.5)
    with pytest.raises(ValueError):
        ddpm_step(x, 0, ZeroDenoiser(), cosine)


def test_ppn_init(problem, schedule):
    _, y, _ = problem
    clean = NoiseSchedule.from_alpha_bar([1.0, 0.5], validate=False)
    np.testing.assert_array_equal(ppn_init(y, 1, clean, np.random.default_rng(0)), ifft2c(y.kspace))
    a = ppn_init(y, 30, schedule, np.random.default_rng(5))
    b = ppn_init(y, 30, schedule, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        ppn_init(y, 0, schedule)
    with pytest.raises(ValueError):
        ppn_init(y, 201, schedule)


def test_ppn_final_step_is_exactly_consistent(problem, schedule):
    _, y, denoiser = problem
    x_t = np.random.default_rng(6).standard_normal((8, 8))
    out = ppn_step(x_t, 1, y, denoiser, schedule, rng=np.random.default_rng(0))
    np.testing.assert_array_equal(out, project(predict_x0(x_t, 1, denoiser, schedule), y))
    assert kspace_residual(out, y) < 1e-10


def test_ppn_full_mask_returns_measurement_image(small_prior, schedule):
    truth = small_prior.sample(np.random.default_rng(7))
    y = forward(truth, make_uniform_mask(8, 1, 0.0))
    x_t = np.random.default_rng(8).standard_normal((8, 8))
    for denoiser in (ZeroDenoiser(), GaussianDenoiser(small_prior)):
        np.testing.assert_array_equal(ppn_step(x_t, 1, y, denoiser, schedule), ifft2c(y.kspace))


def test_ppn_step_hand_example():
    """2x2 grid keeping only the DC column: projection resets each row mean to the measured one."""
    schedule = NoiseSchedule.from_alpha_bar([0.8, 0.5])
    mask = CartesianMask(kept=np.array([False, True]))
    truth = np.array([[1.0, 3.0], [-2.0, 0.0]])
    y = forward(truth, mask)
    x_t = np.array([[0.5, -0.5], [2.0, 1.0]])
    eps_hat = np.array([[0.1, 0.2], [-0.3, 0.4]])

    x0 = (x_t - math.sqrt(0.5) * eps_hat) / math.sqrt(0.5)
    projected = x0 - x0.mean(axis=1, keepdims=True) + truth.mean(axis=1, keepdims=True)
    expected = math.sqrt(0.8) * projected

    out = ppn_step(x_t, 2, y, FixedEps(eps_hat), schedule, noise=np.zeros((2, 2)))
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_ppn_predicted_noisor_reuses_eps(problem, schedule):
    _, y, denoiser = problem
    x_t = np.random.default_rng(9).standard_normal((8, 8))
    t = 40
    eps = denoiser.eps(x_t, t, schedule)
    out = ppn_step(x_t, t, y, denoiser, schedule, noisor="predicted")
    x0p = project(predict_x0(x_t, t, denoiser, schedule), y)
    ab = schedule.alpha_bar_at(t - 1)
    np.testing.assert_allclose(out, math.sqrt(ab) * x0p + math.sqrt(1 - ab) * eps, atol=1e-12)


def test_ddnm_and_ppn_share_mean_and_noise_direction(problem, schedule):
    _, y, _ = problem
    rng = np.random.default_rng(10)
    x_t, noise = rng.standard_normal((8, 8)), rng.standard_normal((8, 8))
    t, t_prev = 120, 80
    zero = ZeroDenoiser()
    ab_t, ab_prev = schedule.alpha_bar_at(t), schedule.alpha_bar_at(t_prev)
    mean = math.sqrt(ab_prev) * project(x_t / math.sqrt(ab_t), y)

    ppn = ppn_step(x_t, t, y, zero, schedule, t_prev=t_prev, noise=noise)
    ddnm = ddnm_step(x_t, t, t_prev, y, zero, schedule, eta=1.0, noise=noise)
    np.testing.assert_allclose((ppn - mean) / math.sqrt(1 - ab_prev), noise, atol=1e-10)
    np.testing.assert_allclose((ddnm - mean) / ddim_sigma(ab_t, ab_prev, 1.0), noise, atol=1e-10)


def test_medscore_step_lambda_zero_is_ddim(problem, schedule):
    _, y, denoiser = problem
    x_t = np.random.default_rng(11).standard_normal((8, 8))
    noise = np.random.default_rng(12).standard_normal((8, 8))
    a = medscore_step(x_t, 50, 30, y, denoiser, schedule, eta=1.0, lam=0.0, noise=noise)
    b = ddim_step(x_t, 50, 30, denoiser, schedule, eta=1.0, noise=noise)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        medscore_step(x_t, 50, 30, y, denoiser, schedule, lam=2.0)


def test_medscore_step_lambda_one_pins_kept_columns(problem, schedule):
    _, y, denoiser = problem
    x_t = np.random.default_rng(13).standard_normal((8, 8))
    out = medscore_step(x_t, 3, 0, y, denoiser, schedule, lam=1.0, rng=np.random.default_rng(0),
                        measurement_rng=np.random.default_rng(1))
    assert kspace_residual(out, y) < 1e-10


def test_dps_gradient_matches_finite_differences(schedule):
    rng = np.random.default_rng(14)
    prior = random_gaussian_prior((8, 8), rank=6, seed=3)
    denoiser = GaussianDenoiser(prior)
    mask = make_uniform_mask(8, 2, 0.0)
    y = forward(prior.sample(rng), mask)
    t = 60
    ab = schedule.alpha_bar_at(t)

    def loss(x):
        x0 = (x - math.sqrt(1 - ab) * eps_gaussian(prior, x, t, schedule)) / math.sqrt(ab)
        return float(np.sum(np.abs(apply_mask(fft2c(x0), mask) - y.kspace) ** 2))

    for _ in range(20):
        x_t = rng.standard_normal((8, 8))
        grad, norm = dps_gradient(x_t, t, y, denoiser, schedule)
        assert norm > 0
        h = 1e-5
        numeric = np.zeros_like(x_t)
        for index in np.ndindex(*x_t.shape):
            plus, minus = x_t.copy(), x_t.copy()
            plus[index] += h
            minus[index] -= h
            numeric[index] = (loss(plus) - loss(minus)) / (2 * h)
        assert np.linalg.norm(grad - numeric) <= 1e-4 * np.linalg.norm(numeric)


def test_dps_skips_guidance_on_zero_residual(small_prior, schedule):
    denoiser = GaussianDenoiser(small_prior)
    x_t = np.random.default_rng(15).standard_normal((8, 8))
    t = 25
    x0 = predict_x0(x_t, t, denoiser, schedule)
    mask = make_uniform_mask(8, 2, 0.0)
    y = Measurement(kspace=apply_mask(fft2c(x0), mask), mask=mask)

    grad, norm = dps_gradient(x_t, t, y, denoiser, schedule)
    assert grad is None and norm == 0.0
    noise = np.random.default_rng(16).standard_normal((8, 8))
    np.testing.assert_array_equal(
        dps_step(x_t, t, 10, y, denoiser, schedule, eta=1.0, zeta=10.0, noise=noise),
        ddim_step(x_t, t, 10, denoiser, schedule, eta=1.0, noise=noise),
    )


# ── Full runs ────────────────────────────────────────────────────────────────

def test_run_ppn_contract(problem, schedule):
    _, y, denoiser = problem
    seen = []
    result = run_ppn(y, SamplerConfig(kind="ppn", S=12, seed=3), denoiser, schedule, on_step=seen.append)
    assert result.nfe == 12
    assert len(result.diagnostics) == 12 and len(seen) == 12
    assert [r.t for r in result.diagnostics] == list(range(12, 0, -1))
    assert kspace_residual(result.image, y) <= 1e-8
    assert max(r.fidelity for r in result.diagnostics) <= 1e-8
    assert result.grid == tuple(range(12, 0, -1))


def test_run_ppn_is_deterministic(problem, schedule):
    _, y, denoiser = problem
    config = SamplerConfig(kind="ppn", S=10, seed=4)
    a = run_ppn(y, config, denoiser, schedule)
    b = run_ppn(y, config, denoiser, schedule)
    np.testing.assert_array_equal(a.image, b.image)
    c = run_ppn(y, SamplerConfig(kind="ppn", S=10, seed=5), denoiser, schedule)
    assert not np.array_equal(a.image, c.image)


def test_run_ppn_single_step(problem, schedule):
    _, y, denoiser = problem
    result = run_ppn(y, SamplerConfig(kind="ppn", S=1, seed=6), denoiser, schedule)
    x_1 = ppn_init(y, 1, schedule, step_rng(6, 1, INIT_STREAM))
    np.testing.assert_array_equal(result.image, ppn_step(x_1, 1, y, denoiser, schedule))
    assert result.nfe == 1


def test_single_step_ddnm_equals_ppn(problem, schedule):
    _, y, _ = problem
    zero = ZeroDenoiser()
    ppn = run_ppn(y, SamplerConfig(kind="ppn", S=1, seed=7), zero, schedule)
    ddnm = run_ddnm(y, SamplerConfig(kind="ddnm", S=1, seed=7, grid_strategy="trailing", init="zero-filled"),
                    zero, schedule)
    np.testing.assert_array_equal(ppn.image, ddnm.image)


@pytest.mark.parametrize("kind", ["ddnm", "medscore"])
def test_projection_baselines_end_consistent(problem, schedule, kind):
    _, y, denoiser = problem
    result = reconstruct(y, SamplerConfig(kind=kind, S=10, seed=8), denoiser, schedule)
    assert result.nfe == 10
    assert len(result.diagnostics) == 10
    assert result.grid[0] == 200
    assert kspace_residual(result.image, y) <= 1e-8


def test_ddnm_full_length_full_mask_pins_measurement(small_prior):
    schedule = build_cosine_schedule(30)
    truth = small_prior.sample(np.random.default_rng(17))
    y = forward(truth, make_uniform_mask(8, 1, 0.0))
    result = run_ddnm(y, SamplerConfig(kind="ddnm", S=30, seed=1), GaussianDenoiser(small_prior), schedule)
    np.testing.assert_array_equal(result.image, ifft2c(y.kspace))


def test_medscore_lambda_zero_is_unconditional_ddim(problem, schedule):
    _, y, denoiser = problem
    medscore = run_medscore(y, SamplerConfig(kind="medscore", S=8, seed=9, lam=0.0), denoiser, schedule)
    ddim = run_unconditional(SamplerConfig(kind="ddim", S=8, seed=9, eta=1.0), denoiser, schedule, y.shape)
    np.testing.assert_array_equal(medscore.image, ddim.image)


def test_dps_zeta_zero_is_unconditional_ddim(problem, schedule):
    _, y, denoiser = problem
    dps = run_dps(y, SamplerConfig(kind="dps", S=8, seed=10, zeta=0.0), denoiser, schedule)
    ddim = run_unconditional(SamplerConfig(kind="ddim", S=8, seed=10, eta=1.0), denoiser, schedule, y.shape)
    np.testing.assert_array_equal(dps.image, ddim.image)
    assert dps.vjp_calls == 0


def test_dps_counts_vjp_calls(problem, schedule):
    _, y, denoiser = problem
    result = run_dps(y, SamplerConfig(kind="dps", S=6, seed=11), denoiser, schedule)
    assert result.nfe == 6
    assert result.vjp_calls == 6
    assert result.guidance_skipped == 0
    assert np.all(np.isfinite(result.image))


def test_reconstruct_rejects_unconditional_kinds(problem, schedule):
    _, y, denoiser = problem
    with pytest.raises(ValueError):
        reconstruct(y, SamplerConfig(kind="ddim"), denoiser, schedule)
    with pytest.raises(ValueError):
        run_ppn(y, SamplerConfig(kind="ddnm"), denoiser, schedule)


def test_unconditional_ddpm_needs_adjacent_grid(small_prior, schedule):
    denoiser = GaussianDenoiser(small_prior)
    with pytest.raises(ValueError):
        run_unconditional(SamplerConfig(kind="ddpm", S=10), denoiser, schedule, (8, 8))
    result = run_unconditional(SamplerConfig(kind="ddpm", S=10, grid_strategy="trailing"), denoiser, schedule, (8, 8))
    assert result.nfe == 10


def test_unconditional_single_level_returns_posterior_mean(small_prior):
    schedule = build_cosine_schedule(1)
    denoiser = GaussianDenoiser(small_prior)
    result = run_unconditional(SamplerConfig(kind="ddim", S=1), denoiser, schedule, (8, 8), rng=np.random.default_rng(0))
    x_1 = np.random.default_rng(0).standard_normal((8, 8))
    np.testing.assert_allclose(result.image, posterior_mean_gaussian(small_prior, x_1, 1, schedule), atol=1e-10)


def test_unconditional_batched_chains(small_prior, schedule):
    denoiser = GaussianDenoiser(small_prior)
    result = run_unconditional(SamplerConfig(kind="ddim", S=5), denoiser, schedule, (3, 8, 8),
                               rng=np.random.default_rng(1))
    assert result.image.shape == (3, 8, 8)
    assert result.nfe == 5


def test_ppn_init_mean_is_scaled_zero_filled(problem, schedule):
    _, y, _ = problem
    S = 60
    draws = np.stack([ppn_init(y, S, schedule, step_rng(seed, S, INIT_STREAM)) for seed in range(1000)])
    alpha_bar = schedule.alpha_bar_at(S)
    standard_error = math.sqrt((1 - alpha_bar) / 1000)
    z = (draws.mean(axis=0) - math.sqrt(alpha_bar) * ifft2c(y.kspace)) / standard_error
    assert np.max(np.abs(z)) < 4.5


def test_ppn_leaves_less_null_space_noise_than_ddnm_at_default_floor(cosine):
    # y = 0 under a pure-floor prior: whatever survives in the output is unmeasured noise
    prior = fit_gaussian_prior(np.zeros((2, 16, 16)), rank=0)
    denoiser = GaussianDenoiser(prior)
    y = forward(np.zeros((16, 16)), make_uniform_mask(16, 4, 0.0))

    def energy(kind):
        images = [reconstruct(y, SamplerConfig(kind=kind, S=50, seed=seed), denoiser, cosine).image
                  for seed in range(20)]
        return float(np.mean(np.square(images)))

    ppn, ddnm = energy("ppn"), energy("ddnm")
    # stationary floor variance of the t=1 chain is about floor / 2
    assert ppn == pytest.approx(0.75 * prior.floor / 2, rel=0.15)
    assert ppn < 0.95 * ddnm
