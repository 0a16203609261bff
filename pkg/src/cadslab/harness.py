"""Experiment pipelines shared by the CLI and the acceptance suite."""

from __future__ import annotations

import dataclasses
import itertools
from typing import Dict, List, Optional, Sequence

import numpy as np

from .metrics import MetricsReport, evaluate
from .model import Denoiser
from .oracle import GmmSpec, gmm_sample
from .sampler import DenoiserSource, OracleSource, SamplerConfig, results_to_arrays, sample_batch
from .schedule import AnnealSchedule, CadsConfig

# grid keys accepted by ablate, mapped to how they alter a SamplerConfig
GRID_KEYS = ("s", "tau1", "tau2", "psi", "d", "noise-dist", "cfg", "steps")
_CADS_KEYS = {"s", "tau1", "tau2", "psi", "d", "noise-dist"}


def make_source(spec: GmmSpec, net: Optional[Denoiser] = None):
    """Denoiser source when ``net`` is given, otherwise the exact oracle. Both clip to the data box."""
    if net is None:
        return OracleSource(spec)
    if net.num_classes != spec.K:
        raise ValueError(f"checkpoint has {net.num_classes} classes but the mixture has {spec.K}")
    return DenoiserSource(net, clip=spec.bounding_box())


def balanced_labels(num_classes: int, per_class: int) -> np.ndarray:
    """Label of chain ``c`` is ``c // per_class``."""
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    return np.repeat(np.arange(num_classes, dtype=np.int64), per_class)


def reference_set(spec: GmmSpec, per_class: int, seed: int):
    """Held-out real data, ``per_class`` points per label, drawn label by label."""
    rng = np.random.default_rng(seed)
    pts, labs = [], []
    for k in range(spec.K):
        s = gmm_sample(spec, k, per_class, rng)
        pts.append(s.points)
        labs.append(s.labels)
    return np.concatenate(pts), np.concatenate(labs)


def run_sampler(source, cfg: SamplerConfig, per_class: int, workers: int = 1):
    labels = balanced_labels(source.num_classes, per_class)
    return results_to_arrays(sample_batch(source, labels, cfg, workers=workers))


def check_label_sets(sample_labels, reference_labels) -> None:
    got, want = set(np.unique(sample_labels).tolist()), set(np.unique(reference_labels).tolist())
    if got != want:
        missing = sorted(want - got)
        extra = sorted(got - want)
        raise ValueError(f"label sets differ: missing from samples {missing}, absent from reference {extra}")


def evaluate_samples(points, labels, ref_points, ref_labels, spec: GmmSpec, k: int = 3, bandwidth=None) -> MetricsReport:
    check_label_sets(labels, ref_labels)
    return evaluate(points, labels, ref_points, ref_labels, spec=spec, k=k, bandwidth=bandwidth)


def parse_grid(items: Sequence[str]) -> Dict[str, list]:
    """Parse ``key=v1,v2`` entries into an ordered mapping of typed values."""
    grid: Dict[str, list] = {}
    for item in items:
        key, sep, rest = item.partition("=")
        key = key.strip()
        if not sep or key not in GRID_KEYS:
            raise ValueError(f"bad grid entry {item!r}; keys are {', '.join(GRID_KEYS)}")
        raw = [v.strip() for v in rest.split(",") if v.strip()]
        if not raw:
            raise ValueError(f"grid key {key!r} has no values")
        if key in grid:
            raise ValueError(f"grid key {key!r} given twice")
        try:
            if key == "noise-dist":
                vals = raw
            elif key == "steps":
                vals = [int(v) for v in raw]
            else:
                vals = [float(v) for v in raw]
        except ValueError:
            raise ValueError(f"grid key {key!r}: cannot parse {rest!r}") from None
        grid[key] = vals
    if not grid:
        raise ValueError("empty ablation grid")
    return grid


def grid_points(grid: Dict[str, list]) -> List[dict]:
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def apply_grid_point(base: SamplerConfig, point: dict) -> SamplerConfig:
    """``base`` with one grid point applied; CADS keys switch CADS on if it was off."""
    cfg = base
    if "cfg" in point:
        cfg = dataclasses.replace(cfg, guidance_weight=point["cfg"])
    if "steps" in point:
        cfg = dataclasses.replace(cfg, num_steps=point["steps"])
    if _CADS_KEYS & set(point):
        cads = cfg.cads or CadsConfig()
        anneal = cads.anneal
        if "d" in point:
            anneal = AnnealSchedule.polynomial(anneal.tau, point["d"])
        if "tau1" in point or "tau2" in point:
            anneal = AnnealSchedule.linear(point.get("tau1", anneal.tau1), point.get("tau2", anneal.tau2))
        cads = dataclasses.replace(
            cads,
            noise_scale=point.get("s", cads.noise_scale),
            mixing_factor=point.get("psi", cads.mixing_factor),
            noise_distribution=point.get("noise-dist", cads.noise_distribution),
            anneal=anneal,
        )
        cfg = dataclasses.replace(cfg, cads=cads)
    return cfg


def run_ablation(source, spec: GmmSpec, base: SamplerConfig, grid: Dict[str, list], per_class: int,
                 ref_points, ref_labels, k: int = 3, bandwidth=None, workers: int = 1) -> List[dict]:
    """One row per grid point: the point's values followed by the summary metrics. Seed is shared."""
    rows = []
    for point in grid_points(grid):
        cfg = apply_grid_point(base, point)
        pts, labs = run_sampler(source, cfg, per_class, workers)
        report = evaluate_samples(pts, labs, ref_points, ref_labels, spec, k, bandwidth)
        rows.append({**point, **report.summary()})
    return rows
