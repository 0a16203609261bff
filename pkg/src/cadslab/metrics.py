"""Quality and diversity metrics for 2D point sets."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional

import numpy as np

from .oracle import GmmSpec, gmm_log_density, posterior_label

EIG_CLAMP = 1e-10
EIG_REJECT = -1e-6


def _pairwise_sq_dists(a, b):
    d = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def _median_distance(points) -> float:
    sq = _pairwise_sq_dists(points, points)
    iu = np.triu_indices(len(points), 1)
    h = float(np.median(np.sqrt(sq[iu])))
    return h if h > 0 else 1.0


def similarity_matrix(points, bandwidth: Optional[float] = None) -> np.ndarray:
    """RBF kernel matrix; ``bandwidth=None`` uses the median pairwise distance."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n < 2:
        raise ValueError("need at least 2 points")
    sq = _pairwise_sq_dists(points, points)
    if bandwidth is None:
        bandwidth = _median_distance(points)
    elif bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    k = np.exp(-sq / (2.0 * bandwidth**2))
    k = 0.5 * (k + k.T)
    np.fill_diagonal(k, 1.0)
    return k


def vendi_score(k) -> float:
    k = np.asarray(k, dtype=np.float64)
    n = k.shape[0]
    lam = np.linalg.eigvalsh(k / n)
    if lam.min() < EIG_REJECT:
        raise ValueError(f"similarity matrix is not PSD (eigenvalue {lam.min():.3g})")
    lam = lam[lam > EIG_CLAMP]
    return float(np.exp(-np.sum(lam * np.log(lam))))


def mss(k) -> float:
    return float(np.mean(k))


def _kth_neighbor_radius(points, k):
    radii = np.empty(len(points))
    for s in range(0, len(points), 1024):
        d = _pairwise_sq_dists(points[s : s + 1024], points)
        # column k of the sorted row skips the zero self-distance
        radii[s : s + 1024] = np.sqrt(np.partition(d, k, axis=1)[:, k])
    return radii


def _inside_fraction(queries, centers, radii):
    hits = 0
    for s in range(0, len(queries), 1024):
        d = np.sqrt(_pairwise_sq_dists(queries[s : s + 1024], centers))
        hits += int(np.count_nonzero(np.any(d <= radii[None, :], axis=1)))
    return hits / len(queries)


def knn_precision_recall(real, generated, k: int = 3):
    real = np.asarray(real, dtype=np.float64)
    generated = np.asarray(generated, dtype=np.float64)
    if len(real) < k + 1 or len(generated) < k + 1:
        raise ValueError(f"both sets need at least k+1 = {k + 1} points")
    precision = _inside_fraction(generated, real, _kth_neighbor_radius(real, k))
    recall = _inside_fraction(real, generated, _kth_neighbor_radius(generated, k))
    return precision, recall


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    covariance: np.ndarray
    count: int

    @classmethod
    def from_points(cls, points) -> "GaussianStats":
        points = np.asarray(points, dtype=np.float64)
        if len(points) < 2:
            raise ValueError("need at least 2 points")
        return cls(points.mean(axis=0), np.cov(points, rowvar=False, bias=False), len(points))


def frechet_2d(a: GaussianStats, b: GaussianStats) -> float:
    """Squared 2-Wasserstein distance between two 2D Gaussians.

    Uses ``tr sqrt(M) = sqrt(tr M + 2 sqrt(det M))`` for the 2x2 product
    ``M = Sa Sb``, whose eigenvalues are real and non-negative for PSD inputs.
    """
    m = a.covariance @ b.covariance
    det = float(np.linalg.det(m))
    tr = float(np.trace(m))
    disc = tr * tr - 4.0 * det
    lam_min = 0.5 * (tr - math.sqrt(max(disc, 0.0)))
    if det < -1e-8 or lam_min < -1e-8:
        raise ValueError("covariance product has a negative eigenvalue")
    tr_sqrt = math.sqrt(max(tr + 2.0 * math.sqrt(max(det, 0.0)), 0.0))
    diff = a.mean - b.mean
    val = float(diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2.0 * tr_sqrt)
    return max(val, 0.0)


def alignment_accuracy(points, labels, spec: GmmSpec) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("no samples")
    return float(np.mean(posterior_label(spec, np.asarray(points)) == labels))


def support_coverage(points, spec: GmmSpec, reference) -> float:
    """Fraction of points below the 1st percentile of reference log density (lower is better)."""
    reference = np.asarray(reference, dtype=np.float64)
    if len(reference) == 0:
        raise ValueError("empty reference set")
    threshold = np.percentile(gmm_log_density(spec, reference), 1.0)
    return float(np.mean(gmm_log_density(spec, np.asarray(points)) < threshold))


@dataclass
class MetricsReport:
    recall: float
    precision: float
    vendi: float
    mss: float
    fd2d: float
    alignment_accuracy: Optional[float]
    support_coverage_rate: Optional[float]
    per_condition: Dict[int, Dict[str, float]] = field(default_factory=dict)

    SUMMARY_KEYS = ("recall", "precision", "vendi", "mss", "fd2d", "alignment_accuracy", "support_coverage_rate")

    def summary(self) -> Dict[str, Optional[float]]:
        return {k: getattr(self, k) for k in self.SUMMARY_KEYS}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_condition"] = {str(k): v for k, v in sorted(self.per_condition.items())}
        return d


def evaluate(
    points,
    labels,
    real_points,
    real_labels=None,
    spec: Optional[GmmSpec] = None,
    k: int = 3,
    bandwidth: Optional[float] = None,
) -> MetricsReport:
    """Full metric suite for generated ``points`` (conditioned on ``labels``) against real data."""
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    real_points = np.asarray(real_points, dtype=np.float64)
    precision, recall = knn_precision_recall(real_points, points, k)
    fd = frechet_2d(GaussianStats.from_points(real_points), GaussianStats.from_points(points))
    per = {}
    for lab in np.unique(labels):
        sel = points[labels == lab]
        row = {"count": float(len(sel))}
        h = bandwidth
        if h is None and real_labels is not None:
            # a bandwidth fitted to the generated set itself would hide shrinkage
            ref = real_points[np.asarray(real_labels) == lab]
            if len(ref) >= 2:
                h = _median_distance(ref)
        if len(sel) >= 2:
            kmat = similarity_matrix(sel, h)
            row["vendi"] = vendi_score(kmat)
            row["mss"] = mss(kmat)
        else:
            row["vendi"], row["mss"] = 1.0, 1.0
        row["std"] = float(np.sqrt(np.mean(np.var(sel, axis=0)))) if len(sel) > 1 else 0.0
        if spec is not None:
            row["alignment"] = alignment_accuracy(sel, np.full(len(sel), lab), spec)
        per[int(lab)] = row
    vendi = float(np.mean([r["vendi"] for r in per.values()]))
    mean_sim = float(np.mean([r["mss"] for r in per.values()]))
    align = cover = None
    if spec is not None:
        align = alignment_accuracy(points, labels, spec)
        cover = support_coverage(points, spec, real_points)
    return MetricsReport(recall, precision, vendi, mean_sim, fd, align, cover, per)
