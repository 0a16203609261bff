import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cadslab.schedule import (
    AnnealSchedule,
    CadsConfig,
    apply_corruption,
    build_cosine_vp_schedule,
    corrupt_condition,
    dynamic_cfg_weight,
    gamma,
    rescale_condition,
    sample_unit_noise,
)


def test_cosine_schedule_shape_and_monotone():
    for n in (2, 10, 1000, 5000):
        s = build_cosine_vp_schedule(n)
        assert len(s.alphas) == n + 1
        np.testing.assert_allclose(s.alphas**2 + s.sigmas**2, 1.0, atol=1e-12)
        assert np.all(np.diff(s.alphas) < 0)
        assert np.all(s.alphas > 0) and np.all(s.sigmas > 0)


def test_cosine_schedule_midpoint():
    s = build_cosine_vp_schedule(2)
    assert s.alphas[1] == pytest.approx(math.sqrt(0.5), abs=1e-15)


def test_schedule_rejects_small_n():
    with pytest.raises(ValueError):
        build_cosine_vp_schedule(1)


def test_linear_gamma_examples():
    a = AnnealSchedule.linear(0.6, 0.9)
    assert gamma(a, 0.0) == 1.0
    assert gamma(a, 0.6) == 1.0
    assert gamma(a, 0.75) == pytest.approx(0.5)
    assert gamma(a, 0.9) == 0.0
    assert gamma(a, 1.0) == 0.0


def test_polynomial_gamma_examples():
    p = AnnealSchedule.polynomial(0.5, 2)
    assert gamma(p, 0.25) == 1.0
    assert gamma(p, 0.75) == pytest.approx(0.25)
    assert gamma(p, 1.0) == 0.0


def test_anneal_validation_names_both_taus():
    with pytest.raises(ValueError, match="tau1.*tau2"):
        AnnealSchedule.linear(0.9, 0.9)
    with pytest.raises(ValueError):
        AnnealSchedule.polynomial(1.0, 2)
    with pytest.raises(ValueError):
        AnnealSchedule.polynomial(0.5, 0.5)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 0.98), st.floats(0.01, 1.0), st.floats(0, 1), st.floats(0, 1))
def test_linear_gamma_monotone_and_bounded(t1, gap, ta, tb):
    t2 = min(t1 + gap, 1.0)
    if t2 <= t1:
        return
    a = AnnealSchedule.linear(t1, t2)
    lo, hi = sorted((ta, tb))
    assert 0.0 <= gamma(a, hi) <= gamma(a, lo) <= 1.0


def test_dynamic_cfg_weight():
    a = AnnealSchedule.linear(0.5, 0.9)
    assert dynamic_cfg_weight(5.0, 0.1, a) == 5.0
    assert dynamic_cfg_weight(5.0, 0.95, a) == 0.0
    assert dynamic_cfg_weight(5.0, 0.7, a) == pytest.approx(2.5)
    with pytest.raises(ValueError):
        dynamic_cfg_weight(-1.0, 0.5, a)


@pytest.mark.parametrize("dist", ["gaussian", "uniform", "laplace", "gamma"])
def test_unit_noise_is_standardized(dist):
    x = sample_unit_noise(dist, 200_000, np.random.default_rng(1))
    assert abs(x.mean()) < 0.01
    assert x.var() == pytest.approx(1.0, rel=0.02)


def test_unknown_noise_family():
    with pytest.raises(ValueError):
        sample_unit_noise("cauchy", 3, np.random.default_rng(0))
    with pytest.raises(ValueError):
        CadsConfig(noise_distribution="cauchy")


def test_gamma_one_is_identity():
    y = np.random.default_rng(0).standard_normal(16)
    cfg = CadsConfig(noise_scale=0.5)
    out = corrupt_condition(y, 0.1, cfg, np.random.default_rng(3))
    np.testing.assert_allclose(out, y, atol=1e-12)


def test_zero_noise_scale_without_rescale_scales_by_sqrt_gamma():
    y = np.arange(4.0)
    cfg = CadsConfig(noise_scale=0.0, rescale=False, anneal=AnnealSchedule.linear(0.5, 0.9))
    np.testing.assert_allclose(corrupt_condition(y, 0.7, cfg, np.random.default_rng(0)), math.sqrt(0.5) * y)


def test_rescale_restores_moments():
    rng = np.random.default_rng(2)
    y = rng.standard_normal(64) * 3 + 1
    y_hat = rng.standard_normal(64)
    out = rescale_condition(y_hat, y.mean(), y.std(), 1.0)
    assert out.mean() == pytest.approx(y.mean(), abs=1e-12)
    assert out.std() == pytest.approx(y.std(), rel=1e-12)
    np.testing.assert_array_equal(rescale_condition(y_hat, y.mean(), y.std(), 0.0), y_hat)


def test_rescale_degenerate_input():
    out = rescale_condition(np.full(4, 2.0), 0.5, 1.0, 1.0)
    np.testing.assert_array_equal(out, np.full(4, 0.5))


def test_rescale_needs_two_entries():
    with pytest.raises(ValueError):
        apply_corruption(np.ones(1), 0.5, CadsConfig(), np.zeros(1))
    with pytest.raises(ValueError):
        corrupt_condition(np.array([]), 0.5, CadsConfig(rescale=False), np.random.default_rng(0))


def test_batched_corruption_matches_rows():
    rng = np.random.default_rng(5)
    y = rng.standard_normal((3, 8))
    noise = rng.standard_normal((3, 8))
    cfg = CadsConfig(noise_scale=0.3, mixing_factor=0.7)
    batch = apply_corruption(y, 0.4, cfg, noise)
    for r in range(3):
        np.testing.assert_allclose(batch[r], apply_corruption(y[r], 0.4, cfg, noise[r]), rtol=1e-14)
