"""Ground-truth 2D Gaussian mixture with exact scores under the VP forward process."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Optional

import numpy as np
from scipy.special import logsumexp

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GmmSpec:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.asarray(self.means, dtype=np.float64).reshape(-1, 2)
        cov = np.asarray(self.covariances, dtype=np.float64).reshape(-1, 2, 2)
        if not (len(w) == len(mu) == len(cov)) or len(w) == 0:
            raise ValueError("weights, means and covariances must have the same non-zero length")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be non-negative and sum to 1")
        det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
        if np.any(det <= 0) or np.any(cov[:, 0, 0] + cov[:, 1, 1] <= 0):
            raise ValueError("covariances must be positive definite")
        if not np.allclose(cov, cov.transpose(0, 2, 1), rtol=0, atol=1e-12):
            raise ValueError("covariances must be symmetric")
        for name, arr in (("weights", w), ("means", mu), ("covariances", cov)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def K(self) -> int:
        return len(self.weights)

    def bounding_box(self) -> float:
        """Half-width of the square used to clip denoised predictions."""
        std = np.sqrt(np.max(np.linalg.eigvalsh(self.covariances)))
        return float(np.max(np.abs(self.means)) + 5.0 * std)


class LabeledSample(NamedTuple):
    point: np.ndarray
    label: int


@dataclass(frozen=True)
class LabeledSet:
    """Array-backed collection of labeled points; iterates as ``LabeledSample``."""

    points: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[LabeledSample]:
        for p, y in zip(self.points, self.labels):
            yield LabeledSample(p, int(y))


def make_grid_gmm(side: int = 5, spacing: float = 2.0, std: float = 0.1) -> GmmSpec:
    if side < 1:
        raise ValueError("side must be >= 1")
    coords = (np.arange(side) - (side - 1) / 2.0) * spacing
    # row-major over (y, x) so label = row * side + col
    means = np.array([(x, y) for y in coords for x in coords], dtype=np.float64)
    k = side * side
    weights = np.full(k, 1.0 / k)
    cov = np.tile(np.eye(2) * std**2, (k, 1, 1))
    return GmmSpec(weights, means, cov)


def _check_label(spec: GmmSpec, label) -> None:
    if label is not None and not (0 <= int(label) < spec.K):
        raise ValueError(f"label {label} out of range for {spec.K} components")


def gmm_sample(spec: GmmSpec, label: Optional[int], n: int, rng: np.random.Generator) -> LabeledSet:
    if n < 1:
        raise ValueError("n must be >= 1")
    _check_label(spec, label)
    if label is None:
        labels = rng.choice(spec.K, size=n, p=spec.weights)
    else:
        labels = np.full(n, int(label))
    chol = np.linalg.cholesky(spec.covariances)
    eps = rng.standard_normal((n, 2))
    points = spec.means[labels] + np.einsum("nij,nj->ni", chol[labels], eps)
    return LabeledSet(points, labels.astype(np.int64))


def perturbed_spec(spec: GmmSpec, alpha: float, sigma: float, label: Optional[int] = None) -> GmmSpec:
    """Marginal of ``alpha * x + sigma * eps`` for ``x`` drawn from ``spec``."""
    _check_label(spec, label)
    means = alpha * spec.means
    covs = alpha**2 * spec.covariances + sigma**2 * np.eye(2)
    if label is None:
        return GmmSpec(spec.weights, means, covs)
    label = int(label)
    return GmmSpec(np.ones(1), means[label : label + 1], covs[label : label + 1])


def _inverse_and_logdet(covs):
    a, b, c, d = covs[:, 0, 0], covs[:, 0, 1], covs[:, 1, 0], covs[:, 1, 1]
    det = a * d - b * c
    inv = np.stack([np.stack([d, -b], -1), np.stack([-c, a], -1)], -2) / det[:, None, None]
    return inv, np.log(det)


def _component_terms(spec: GmmSpec, z):
    """Per-component log(w_k N(z; mu_k, S_k)) and precision-weighted residuals."""
    z = np.asarray(z, dtype=np.float64)
    inv, logdet = _inverse_and_logdet(spec.covariances)
    diff = z[..., None, :] - spec.means  # (..., K, 2)
    prec_diff = np.einsum("kij,...kj->...ki", inv, diff)
    maha = np.sum(diff * prec_diff, axis=-1)
    with np.errstate(divide="ignore"):
        logw = np.log(spec.weights)
    log_terms = logw - 0.5 * maha - 0.5 * logdet - LOG_2PI
    return log_terms, prec_diff


def gmm_log_density(spec: GmmSpec, z) -> np.ndarray:
    log_terms, _ = _component_terms(spec, z)
    return logsumexp(log_terms, axis=-1)


def mixture_score(spec: GmmSpec, z, weights=None) -> np.ndarray:
    """Score of ``spec`` at ``z``; ``weights`` optionally overrides the mixture weights.

    ``weights`` may carry leading batch dimensions matching ``z``.
    """
    if weights is not None:
        with np.errstate(divide="ignore"):
            shift = np.log(np.asarray(weights, dtype=np.float64)) - np.log(spec.weights)
    log_terms, prec_diff = _component_terms(spec, z)
    if weights is not None:
        log_terms = log_terms + shift
    resp = np.exp(log_terms - logsumexp(log_terms, axis=-1, keepdims=True))
    return -np.sum(resp[..., None] * prec_diff, axis=-2)


def analytic_score(spec: GmmSpec, z, alpha: float, sigma: float, label: Optional[int] = None) -> np.ndarray:
    return mixture_score(perturbed_spec(spec, alpha, sigma, label), z)


def posterior_label(spec: GmmSpec, z):
    log_terms, _ = _component_terms(spec, z)
    # argmax returns the first maximum, i.e. the lowest index on ties
    out = np.argmax(log_terms, axis=-1)
    return int(out) if np.ndim(out) == 0 else out
