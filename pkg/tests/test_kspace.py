import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mri.kspace import (
    CartesianMask,
    Measurement,
    add_noise,
    apply_mask,
    blend_project,
    data_fidelity,
    fft2c,
    forward,
    ifft2c,
    kspace_residual,
    make_uniform_mask,
    project,
    sample_noisy_measurement,
    zero_filled,
)


def test_fft_roundtrip_and_parseval():
    x = np.random.default_rng(0).standard_normal((16, 12))
    k = fft2c(x)
    assert np.linalg.norm(k) == pytest.approx(np.linalg.norm(x), rel=1e-12)
    np.testing.assert_allclose(ifft2c(k), x, atol=1e-12)


def test_dc_sits_at_centre():
    k = fft2c(np.ones((8, 8)))
    assert k[4, 4] == pytest.approx(8.0)
    k[4, 4] = 0
    assert np.max(np.abs(k)) < 1e-12


def test_fft_batched_matches_single():
    x = np.random.default_rng(1).standard_normal((3, 8, 8))
    np.testing.assert_allclose(fft2c(x)[1], fft2c(x[1]), atol=1e-14)


def test_fft_rejects_bad_input():
    with pytest.raises(ValueError):
        fft2c(np.ones(8))
    with pytest.raises(ValueError):
        fft2c(np.full((4, 4), np.nan))


def test_mask_reference_example():
    # 4 requested ACS columns grow to 5 (48..52) around DC
    mask = make_uniform_mask(100, 4, 0.04)
    assert mask.n_kept == 25 + 5 - 1
    assert mask.actual_acceleration == pytest.approx(100 / 29)
    assert all(mask.kept[c] for c in range(48, 53))
    assert not mask.kept[47] and not mask.kept[53]
    assert mask.is_symmetric


@pytest.mark.parametrize("width, acs", [(100, 0.04), (32, 0.04), (64, 0.1), (65, 0.05), (128, 0.08)])
def test_acs_block_is_centred_on_dc(width, acs):
    mask = make_uniform_mask(width, width, acs)
    block = np.flatnonzero(mask.kept)
    assert len(block) % 2 == 1
    assert len(block) >= math.ceil(acs * width)
    assert block.mean() == width // 2
    assert mask.is_symmetric


def test_mask_without_acs_and_full_mask():
    mask = make_uniform_mask(64, 4, 0.0)
    assert mask.n_kept == 16
    assert mask.is_symmetric
    full = make_uniform_mask(64, 1, 0.0)
    assert full.n_kept == 64
    assert full.actual_acceleration == 1.0


@pytest.mark.parametrize("R", [4, 8, 12])
def test_benchmark_masks_are_symmetric(R):
    assert make_uniform_mask(64, R, 0.04).is_symmetric


def test_mask_errors():
    with pytest.raises(ValueError):
        make_uniform_mask(0)
    with pytest.raises(ValueError):
        make_uniform_mask(16, 0.5)
    with pytest.raises(ValueError):
        make_uniform_mask(16, 17)
    with pytest.raises(ValueError):
        make_uniform_mask(16, 4, 1.0)


def test_empty_mask_has_infinite_acceleration():
    mask = CartesianMask(kept=np.zeros(8, dtype=bool))
    assert math.isinf(mask.actual_acceleration)


def test_measurement_rejects_unkept_entries():
    mask = make_uniform_mask(8, 2, 0.0)
    with pytest.raises(ValueError):
        Measurement(kspace=np.ones((8, 8), dtype=complex), mask=mask)
    with pytest.raises(ValueError):
        Measurement(kspace=np.zeros((8, 6), dtype=complex), mask=mask)


def test_full_mask_zero_filled_is_exact():
    x = np.random.default_rng(2).standard_normal((8, 8))
    y = forward(x, make_uniform_mask(8, 1, 0.0))
    np.testing.assert_allclose(zero_filled(y), x, atol=1e-12)


def test_projection_consistency_and_idempotence(symmetric_mask_8):
    rng = np.random.default_rng(3)
    y = forward(rng.standard_normal((8, 8)), symmetric_mask_8)
    x = rng.standard_normal((8, 8))
    p = project(x, y)
    assert kspace_residual(p, y) < 1e-12
    np.testing.assert_allclose(project(p, y), p, atol=1e-12)
    assert data_fidelity(p, y) < 1e-12


def test_projection_shape_mismatch(symmetric_mask_8):
    y = forward(np.zeros((8, 8)), symmetric_mask_8)
    with pytest.raises(ValueError):
        project(np.zeros((6, 8)), y)


def test_blend_project_limits(symmetric_mask_8):
    rng = np.random.default_rng(4)
    y = forward(rng.standard_normal((8, 8)), symmetric_mask_8)
    x = rng.standard_normal((8, 8))
    assert blend_project(x, y.kspace, y.mask, 0.0) is x
    np.testing.assert_array_equal(blend_project(x, y.kspace, y.mask, 1.0), project(x, y))

    half = fft2c(blend_project(x, y.kspace, y.mask, 0.5))
    kept = y.mask.kept
    np.testing.assert_allclose(half[:, kept], 0.5 * y.kspace[:, kept] + 0.5 * fft2c(x)[:, kept], atol=1e-12)


def test_add_noise():
    mask = make_uniform_mask(64, 2, 0.0)
    y = forward(np.zeros((64, 64)), mask)
    assert add_noise(y, 0.0, seed=1) is y

    noisy = add_noise(y, 0.2, seed=1)
    assert noisy.sigma_e == pytest.approx(0.2)
    assert np.all(noisy.kspace[:, ~mask.kept] == 0)
    kept = noisy.kspace[:, mask.kept]
    assert np.std(kept.real) == pytest.approx(0.2 / math.sqrt(2), rel=0.1)
    assert np.std(kept.imag) == pytest.approx(0.2 / math.sqrt(2), rel=0.1)

    again = add_noise(noisy, 0.2, seed=2)
    assert again.sigma_e == pytest.approx(math.sqrt(0.08))
    with pytest.raises(ValueError):
        add_noise(y, -1.0, seed=0)


def test_noisy_measurement_at_clean_level_is_y(symmetric_mask_8):
    y = forward(np.random.default_rng(5).standard_normal((8, 8)), symmetric_mask_8)
    sample = sample_noisy_measurement(y, 1.0, np.random.default_rng(0))
    np.testing.assert_array_equal(sample, y.kspace)


def test_noisy_measurement_is_masked_and_scaled(symmetric_mask_8):
    y = forward(np.ones((8, 8)), symmetric_mask_8)
    sample = sample_noisy_measurement(y, 0.25, np.random.default_rng(0))
    assert np.all(sample[:, ~symmetric_mask_8.kept] == 0)
    expected_mean = 0.5 * y.kspace
    assert np.abs(sample - expected_mean).max() > 0


def test_apply_mask_broadcasts_over_batch(symmetric_mask_8):
    k = np.ones((3, 8, 8), dtype=complex)
    masked = apply_mask(k, symmetric_mask_8)
    assert masked.shape == (3, 8, 8)
    assert masked[:, :, ~symmetric_mask_8.kept].sum() == 0


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float64, (8, 8), elements=st.floats(-5, 5)),
    arrays(np.float64, (8, 8), elements=st.floats(-5, 5)),
)
def test_projection_properties(x, truth):
    mask = make_uniform_mask(8, 2, 0.0)
    y = forward(truth, mask)
    p = project(x, y)
    assert kspace_residual(p, y) <= 1e-10
    np.testing.assert_allclose(project(p, y), p, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (6, 10), elements=st.floats(-10, 10)))
def test_parseval_property(x):
    assert np.linalg.norm(fft2c(x)) == pytest.approx(np.linalg.norm(x), rel=1e-12, abs=1e-12)
