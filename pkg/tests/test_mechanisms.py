"""Noise primitive moments and privacy certificates."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ldpbandit.mechanisms import (
    LAPLACE_SPLIT,
    WISHART_SCALE,
    DensityRatioCheck,
    NoiseSpec,
    PrivacyBudget,
    centered_wishart_noise,
    oracle_channel_certificates,
    sample_laplace,
    sample_wishart,
    sum_centered_wishart,
    sum_laplace,
    verify_density_ratio,
)

N_DRAWS = 100_000


def test_budget_validation():
    assert PrivacyBudget(1.0).alpha == 1.0
    assert PrivacyBudget(0.25).alpha == 0.25
    for bad in (0.0, -0.5, 1.0001, 2.0):
        with pytest.raises(ValueError):
            PrivacyBudget(bad)


def test_noise_spec_validation():
    NoiseSpec("laplace_scalar", scale=3.0)
    NoiseSpec("wishart", scale=1.5, dim=2, degrees=3)
    with pytest.raises(ValueError):
        NoiseSpec("gaussian", scale=1.0)
    with pytest.raises(ValueError):
        NoiseSpec("laplace_vector", scale=0.0)
    with pytest.raises(ValueError):
        NoiseSpec("wishart", scale=1.0, dim=2, degrees=4)


def test_laplace_moments_within_five_se():
    rng = np.random.default_rng(11)
    for scale in (0.5, 1.0, 3.0, 6.0):
        x = sample_laplace(N_DRAWS, scale, rng)
        se_mean = math.sqrt(2.0) * scale / math.sqrt(N_DRAWS)
        assert abs(x.mean()) < 5.0 * se_mean
        # var(X) = 2 scale^2; var of the sample variance ~ 20 scale^4 / N
        se_var = math.sqrt(20.0 / N_DRAWS) * scale ** 2
        assert abs(x.var(ddof=1) - 2.0 * scale ** 2) < 5.0 * se_var


def test_laplace_rejects_bad_args():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        sample_laplace(0, 1.0, rng)
    with pytest.raises(ValueError):
        sample_laplace(3, 0.0, rng)


def test_wishart_mean_and_variance():
    # E[W] = dof * V; Var(W_ij) = dof * (V_ij^2 + V_ii V_jj).
    rng = np.random.default_rng(12)
    d, dof, c = 2, 3, 1.5
    draws = np.empty((20_000, d, d))
    for i in range(draws.shape[0]):
        draws[i] = sample_wishart(d, dof, c * np.eye(d), rng)
    mean = draws.mean(axis=0)
    expected = dof * c * np.eye(d)
    sd_diag = math.sqrt(2.0 * dof) * c
    sd_off = math.sqrt(dof) * c
    tol = 5.0 / math.sqrt(draws.shape[0])
    assert abs(mean[0, 0] - expected[0, 0]) < tol * sd_diag
    assert abs(mean[1, 1] - expected[1, 1]) < tol * sd_diag
    assert abs(mean[0, 1]) < tol * sd_off
    var_diag = draws[:, 0, 0].var(ddof=1)
    assert abs(var_diag - 2.0 * dof * c * c) / (2.0 * dof * c * c) < 0.1


def test_wishart_is_psd_and_validates():
    rng = np.random.default_rng(13)
    for _ in range(50):
        w = sample_wishart(3, 4, np.eye(3), rng)
        assert np.linalg.eigvalsh(w)[0] >= -1e-12
    with pytest.raises(ValueError):
        sample_wishart(2, 2, np.eye(2), rng)       # dof must exceed dim
    with pytest.raises(ValueError):
        sample_wishart(2, 3, np.array([[1.0, 2.0], [0.0, 1.0]]), rng)


def test_centered_wishart_mean_zero():
    rng = np.random.default_rng(14)
    d, alpha, mag = 2, 1.0, 1.0
    draws = np.empty((40_000, d, d))
    for i in range(draws.shape[0]):
        draws[i] = centered_wishart_noise(d, alpha, mag, rng)
    mean_op = float(np.abs(np.linalg.eigvalsh(draws.mean(axis=0))).max())
    # entry sd = mag * (1.5/alpha) * sqrt(dof * (1 + delta_ij)), dof = d + 1
    entry_sd = mag * (WISHART_SCALE / alpha) * math.sqrt(2.0 * (d + 1))
    assert mean_op < 5.0 * d * entry_sd / math.sqrt(draws.shape[0])


def test_centered_wishart_magnitude_zero_is_exact_zero():
    rng = np.random.default_rng(15)
    assert np.array_equal(centered_wishart_noise(3, 1.0, 0.0, rng),
                          np.zeros((3, 3)))


def test_sum_laplace_matches_per_sample_accumulation():
    # Summing count draws at once is the same law as count single draws.
    rng = np.random.default_rng(16)
    count, scale = 7, 2.0
    x = np.array([sum_laplace(count, scale, (1,), rng)[0]
                  for _ in range(N_DRAWS // 5)])
    var = 2.0 * count * scale ** 2
    assert abs(x.mean()) < 5.0 * math.sqrt(var / len(x))
    # sample-variance se: var * sqrt((2 + excess kurtosis)/N); a sum of
    # `count` Laplace terms has excess kurtosis 3/count
    kurt_excess = 3.0 / count
    se_var = var * math.sqrt((2.0 + kurt_excess) / len(x))
    assert abs(x.var(ddof=1) - var) < 5.0 * se_var
    assert np.array_equal(sum_laplace(0, scale, (2, 3), rng), np.zeros((2, 3)))


def test_sum_centered_wishart_matches_sum_of_draws():
    rng = np.random.default_rng(17)
    d, alpha, mag, count = 2, 0.5, 1.25, 9
    reps = 8_000
    pooled = np.empty((reps, d, d))
    for i in range(reps):
        pooled[i] = sum_centered_wishart(d, alpha, mag, count, rng)
    entry_sd = mag * (WISHART_SCALE / alpha) \
        * math.sqrt(count * (d + 1) * 2.0)
    mean = pooled.mean(axis=0)
    assert np.abs(mean).max() < 5.0 * entry_sd / math.sqrt(reps)
    # diag variance = mag^2 scale^2 * 2 * count * (d+1)
    var_expected = (mag * WISHART_SCALE / alpha) ** 2 * 2.0 * count * (d + 1)
    var_obs = pooled[:, 0, 0].var(ddof=1)
    assert abs(var_obs - var_expected) / var_expected < 0.12
    assert np.array_equal(sum_centered_wishart(d, alpha, mag, 0, rng),
                          np.zeros((d, d)))


# ---------------------------------------------------------------------------
# Density-ratio certificates
# ---------------------------------------------------------------------------

def test_density_ratio_closed_form_and_grid_agree():
    chk = verify_density_ratio(scale=3.0, sensitivity=1.0,
                               alpha_target=1.0 / 3.0)
    assert isinstance(chk, DensityRatioCheck)
    assert chk.ok
    assert chk.worst_ratio == math.exp(1.0 / 3.0)
    assert chk.budget_bound == math.exp(1.0 / 3.0)
    # the grid includes the regime where the bound is attained
    assert math.isclose(chk.grid_ratio, chk.worst_ratio, rel_tol=1e-12)


def test_density_ratio_negative_control():
    chk = verify_density_ratio(scale=0.9, sensitivity=1.0, alpha_target=1.0,
                               label="too-small-scale")
    assert not chk.ok
    assert chk.worst_ratio > chk.budget_bound
    assert chk.label == "too-small-scale"


@settings(max_examples=60, deadline=None)
@given(scale=st.floats(0.1, 50.0), sens=st.floats(0.01, 10.0))
def test_density_ratio_certifies_iff_scale_large_enough(scale, sens):
    target = 0.7
    chk = verify_density_ratio(scale, sens, target)
    assert chk.ok == (sens / scale <= target + 1e-9)


def test_channel_certificates_frozen_scales():
    # d=2, gamma=2, k=1, alpha=0.5, s_hat=0.25:
    #   count  scale 3/alpha = 6, sensitivity 1        -> ratio e^(1/6)
    #   moment scale 3*sqrt(2)*0.5/0.5 = 3*sqrt(2),
    #          sensitivity sqrt(2)*0.5                 -> ratio e^(1/6)
    #   ci     scale (0.5/sqrt(0.25))/0.5 = 2, sens 1  -> ratio e^(1/2)
    checks = oracle_channel_certificates(d=2, gamma=2.0, k=1, alpha=0.5,
                                         s_hat=0.25)
    assert [c.label.split()[0] for c in checks] == ["count", "moment", "ci"]
    count, moment, ci = checks
    assert count.worst_ratio == math.exp(1.0 / 6.0)
    assert moment.worst_ratio == math.exp((math.sqrt(2.0) * 0.5)
                                          / (3.0 * math.sqrt(2.0) * 0.5 / 0.5))
    assert abs(moment.worst_ratio - math.exp(1.0 / 6.0)) < 1e-15
    assert ci.worst_ratio == math.exp(0.5)
    assert all(c.ok for c in checks)


def test_channel_certificates_sweep_all_ok():
    for d in (1, 2, 3):
        for gamma in (2.0, 2.3, 3.25, 4.0):
            for k in (0, 1, 2, 3):
                for alpha in (0.2, 1.0):
                    for s_hat in (0.04, 0.25, 1.0):
                        checks = oracle_channel_certificates(
                            d, gamma, k, alpha, s_hat)
                        assert len(checks) == 3
                        assert all(c.ok for c in checks), (d, gamma, k, alpha)


def test_channel_certificates_skip_ci_when_unfitted():
    checks = oracle_channel_certificates(2, 2.0, 0, 1.0, s_hat=0.0)
    assert [c.label.split()[0] for c in checks] == ["count", "moment"]


def test_split_constants():
    assert LAPLACE_SPLIT == 3
    assert WISHART_SCALE == 1.5
