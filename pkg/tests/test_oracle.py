import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cadslab.oracle import (
    GmmSpec,
    analytic_score,
    gmm_log_density,
    gmm_sample,
    make_grid_gmm,
    mixture_score,
    perturbed_spec,
    posterior_label,
)


def random_spec(rng, k=3):
    w = rng.dirichlet(np.ones(k))
    mu = rng.normal(0, 2, (k, 2))
    a = rng.normal(0, 0.5, (k, 2, 2))
    cov = a @ a.transpose(0, 2, 1) + 0.05 * np.eye(2)
    return GmmSpec(w, mu, cov)


def naive_log_density(spec, z):
    # direct transliteration of the mixture density, one component at a time
    total = 0.0
    for w, mu, cov in zip(spec.weights, spec.means, spec.covariances):
        d = z - mu
        total += w * math.exp(-0.5 * d @ np.linalg.solve(cov, d)) / (2 * math.pi * math.sqrt(np.linalg.det(cov)))
    return math.log(total)


def test_grid_layout():
    spec = make_grid_gmm()
    assert spec.K == 25
    np.testing.assert_array_equal(spec.means[0], [-4, -4])
    np.testing.assert_array_equal(spec.means[1], [-2, -4])
    np.testing.assert_array_equal(spec.means[5], [-4, -2])
    np.testing.assert_allclose(spec.weights.sum(), 1.0)
    assert spec.bounding_box() == pytest.approx(4.5)


def test_spec_is_immutable():
    spec = make_grid_gmm(2)
    with pytest.raises(ValueError):
        spec.means[0, 0] = 3.0


@pytest.mark.parametrize(
    "w, mu, cov",
    [
        ([0.5, 0.6], [[0, 0], [1, 1]], [np.eye(2)] * 2),
        ([1.0], [[0, 0]], [[[1, 2], [2, 1]]]),
        ([1.0], [[0, 0]], [[[1, 0.5], [0.4, 1]]]),
        ([], [], []),
    ],
)
def test_spec_validation(w, mu, cov):
    with pytest.raises(ValueError):
        GmmSpec(np.array(w), np.array(mu), np.array(cov))


def test_log_density_matches_naive():
    rng = np.random.default_rng(0)
    spec = random_spec(rng, 4)
    z = rng.normal(0, 2, (20, 2))
    got = gmm_log_density(spec, z)
    for zi, gi in zip(z, got):
        assert gi == pytest.approx(naive_log_density(spec, zi), rel=1e-12, abs=1e-12)


def test_density_normalizes():
    spec = make_grid_gmm(side=2, spacing=1.0, std=0.3)
    xs = np.linspace(-4, 4, 801)
    gx, gy = np.meshgrid(xs, xs)
    dens = np.exp(gmm_log_density(spec, np.stack([gx.ravel(), gy.ravel()], -1)))
    area = (xs[1] - xs[0]) ** 2
    assert dens.sum() * area == pytest.approx(1.0, rel=0.01)


def test_far_point_is_finite():
    spec = make_grid_gmm()
    z = np.array([[1e3, -1e3]])
    assert np.isfinite(gmm_log_density(spec, z)).all()
    assert np.isfinite(mixture_score(spec, z)).all()


def test_score_matches_finite_differences():
    rng = np.random.default_rng(1)
    for _ in range(20):
        spec = random_spec(rng)
        alpha = rng.uniform(0.05, 1.0)
        sigma = math.sqrt(1 - alpha**2)
        label = None if rng.random() < 0.5 else int(rng.integers(spec.K))
        p = perturbed_spec(spec, alpha, sigma, label)
        z = rng.normal(0, 1.5, 2)
        h = 1e-5
        fd = np.array([
            (gmm_log_density(p, z + h * e) - gmm_log_density(p, z - h * e)) / (2 * h) for e in np.eye(2)
        ])
        np.testing.assert_allclose(analytic_score(spec, z, alpha, sigma, label), fd, rtol=1e-6, atol=1e-7)


def test_single_gaussian_score_closed_form():
    spec = GmmSpec(np.ones(1), np.array([[1.0, -2.0]]), np.array([np.diag([0.5, 2.0])]))
    z = np.array([0.3, 0.4])
    alpha, sigma = 0.6, 0.8
    cov = alpha**2 * np.diag([0.5, 2.0]) + sigma**2 * np.eye(2)
    want = -np.linalg.solve(cov, z - alpha * np.array([1.0, -2.0]))
    np.testing.assert_allclose(analytic_score(spec, z, alpha, sigma), want, rtol=1e-13)


def test_weight_override_selects_component():
    spec = make_grid_gmm(side=2)
    z = np.array([[0.1, 0.2]])
    onehot = np.eye(spec.K)[[3]]
    only = GmmSpec(np.ones(1), spec.means[3:4], spec.covariances[3:4])
    np.testing.assert_allclose(mixture_score(spec, z, onehot), mixture_score(only, z), rtol=1e-12)


def test_sampling_moments():
    spec = make_grid_gmm(side=2, std=0.3)
    s = gmm_sample(spec, 2, 50_000, np.random.default_rng(2))
    np.testing.assert_allclose(s.points.mean(0), spec.means[2], atol=0.01)
    np.testing.assert_allclose(np.cov(s.points.T), spec.covariances[2], atol=0.005)
    assert len(list(s)) == 50_000
    mixed = gmm_sample(spec, None, 40_000, np.random.default_rng(3))
    np.testing.assert_allclose(np.bincount(mixed.labels) / 40_000, spec.weights, atol=0.01)


def test_label_range_checked():
    spec = make_grid_gmm(side=2)
    with pytest.raises(ValueError):
        gmm_sample(spec, 4, 1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        perturbed_spec(spec, 1.0, 0.1, -1)


def test_posterior_label_recovers_components():
    spec = make_grid_gmm()
    assert np.array_equal(posterior_label(spec, spec.means), np.arange(25))
    assert posterior_label(spec, np.zeros(2)) == 12


def test_posterior_label_tie_goes_to_lowest_index():
    spec = GmmSpec(np.array([0.5, 0.5]), np.array([[-1.0, 0], [1.0, 0]]), np.array([np.eye(2)] * 2))
    assert posterior_label(spec, np.zeros(2)) == 0


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 100.0))
def test_posterior_label_invariant_to_weight_rescaling(c):
    rng = np.random.default_rng(4)
    spec = random_spec(rng, 4)
    z = rng.normal(0, 2, (30, 2))
    raw = spec.weights * c
    scaled = GmmSpec(raw / raw.sum(), spec.means, spec.covariances)
    np.testing.assert_array_equal(posterior_label(spec, z), posterior_label(scaled, z))
