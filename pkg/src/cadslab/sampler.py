"""DDPM / DDIM reverse samplers with classifier-free guidance, CADS and dynamic CFG.

Chains are processed in fixed-size chunks of consecutive chain indices. Every
chain owns three random streams (initial noise, ancestral noise, condition
corruption) derived from ``(seed, chain, stream)``. With the chunk size fixed
the output is bitwise independent of the number of workers; a different chunk
size changes only the matrix-product batching, hence agrees to rounding.
Enabling CADS or dynamic CFG never changes the initial or ancestral noise.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .model import Denoiser, prediction_to_eps_and_x
from .oracle import GmmSpec, mixture_score, perturbed_spec
from .schedule import (
    AnnealSchedule,
    CadsConfig,
    DiffusionSchedule,
    apply_corruption,
    build_cosine_vp_schedule,
    gamma,
    sample_unit_noise,
)

STREAM_INIT, STREAM_ANCESTRAL, STREAM_CONDITION = 0, 1, 2
CHUNK_SIZE = 256


class ChainAborted(RuntimeError):
    def __init__(self, message: str, chains: Sequence[int] = ()):
        super().__init__(message)
        self.chains = list(chains)


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "ddpm"
    num_steps: int = 100
    guidance_weight: float = 1.0
    eta: float = 0.0
    cads: Optional[CadsConfig] = None
    dynamic_cfg: Optional[AnnealSchedule] = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("ddpm", "ddim"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.num_steps < 2:
            raise ValueError("num_steps must be >= 2")
        if self.guidance_weight < 0:
            raise ValueError("guidance_weight must be >= 0")
        if not (0.0 <= self.eta <= 1.0):
            raise ValueError("eta must lie in [0, 1]")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @property
    def cads_active(self) -> bool:
        # s = 0 leaves the condition untouched, so the hook is skipped entirely
        return self.cads is not None and self.cads.noise_scale > 0

    @property
    def uses_ancestral_noise(self) -> bool:
        return self.kind == "ddpm" or self.eta > 0


@dataclass
class ChainResult:
    point: np.ndarray
    label: int
    chain: int
    seed: int
    trajectory: Optional[np.ndarray] = None


class DenoiserSource:
    """Guided noise predictions from a trained :class:`Denoiser`."""

    def __init__(self, net: Denoiser, clip: Optional[float] = None):
        self.net = net
        self.clip = clip

    @property
    def num_classes(self) -> int:
        return self.net.num_classes

    def condition(self, labels) -> np.ndarray:
        return self.net.embed(labels)

    def guided_eps(self, z, t, alpha, sigma, cond, weight, gamma_t=1.0, noise_scale=0.0):
        n = len(z)
        null = np.broadcast_to(self.net.null_embedding(), cond.shape)
        pred = self.net.predict(np.concatenate([z, z]), t, np.concatenate([cond, null]))
        eps, _ = prediction_to_eps_and_x(pred, np.concatenate([z, z]), alpha, sigma, self.net.target_type)
        eps_c, eps_u = eps[:n], eps[n:]
        return eps_u + weight * (eps_c - eps_u)


class OracleSource:
    """Exact guided scores of a Gaussian mixture, with one-hot label conditions.

    A corrupted one-hot condition is decoded into a posterior over components
    under the corruption model ``sqrt(g) e_k + s sqrt(1 - g) n``; the
    conditional score is then the mixture score with those weights. At
    ``g = 0`` the weights equal the prior, i.e. the unconditional score.
    """

    def __init__(self, spec: GmmSpec):
        self.spec = spec
        self.clip = spec.bounding_box()

    @property
    def num_classes(self) -> int:
        return self.spec.K

    def condition(self, labels) -> np.ndarray:
        return np.eye(self.spec.K)[np.asarray(labels)]

    def label_weights(self, cond, gamma_t: float, noise_scale: float) -> np.ndarray:
        var = noise_scale**2 * (1.0 - gamma_t)
        if var == 0.0:
            return np.eye(self.spec.K)[np.argmax(cond, axis=-1)]
        logits = np.log(self.spec.weights) + math.sqrt(gamma_t) * cond / var
        logits -= logits.max(axis=-1, keepdims=True)
        w = np.exp(logits)
        return w / w.sum(axis=-1, keepdims=True)

    def guided_eps(self, z, t, alpha, sigma, cond, weight, gamma_t=1.0, noise_scale=0.0):
        pspec = perturbed_spec(self.spec, alpha, sigma)
        score_u = mixture_score(pspec, z)
        score_c = mixture_score(pspec, z, self.label_weights(cond, gamma_t, noise_scale))
        return -sigma * (score_u + weight * (score_c - score_u))


def guided_prediction(
    source,
    z,
    i: int,
    labels,
    cfg: SamplerConfig,
    schedule: DiffusionSchedule,
    cond_noise=None,
    cond_rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Guided noise prediction at grid step ``i`` for a batch of chains.

    The guidance weight is modulated first (dynamic CFG), then the condition
    is corrupted (CADS). ``cond_noise`` supplies unit noise for the corruption;
    otherwise it is drawn from ``cond_rng``.
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels))
    if np.any(labels < 0) or np.any(labels >= source.num_classes):
        raise ValueError(f"labels must lie in [0, {source.num_classes})")
    t = schedule.t(i)
    alpha, sigma = schedule.alphas[i], schedule.sigmas[i]
    weight = cfg.guidance_weight
    if cfg.dynamic_cfg is not None:
        weight = gamma(cfg.dynamic_cfg, t) * weight
    cond = source.condition(labels)
    g, s = 1.0, 0.0
    if cfg.cads_active:
        g, s = gamma(cfg.cads.anneal, t), cfg.cads.noise_scale
        if cond_noise is None:
            if cond_rng is None:
                raise ValueError("CADS needs cond_noise or cond_rng")
            cond_noise = sample_unit_noise(cfg.cads.noise_distribution, cond.shape, cond_rng)
        cond = apply_corruption(cond, g, cfg.cads, cond_noise)
    return source.guided_eps(z, t, alpha, sigma, cond, weight, g, s)


def _denoised(z, eps_hat, alpha, sigma, clip):
    x_hat = (z - sigma * eps_hat) / alpha
    if clip is not None:
        x_hat = np.clip(x_hat, -clip, clip)
    return x_hat


def _posterior(schedule: DiffusionSchedule, i: int):
    a_t, s_t = schedule.alphas[i], schedule.sigmas[i]
    a_s, s_s = schedule.alphas[i - 1], schedule.sigmas[i - 1]
    a_ts = a_t / a_s
    var_ts = s_t**2 - a_ts**2 * s_s**2
    coef_z = a_ts * s_s**2 / s_t**2
    coef_x = a_s * var_ts / s_t**2
    var = var_ts * s_s**2 / s_t**2
    return coef_z, coef_x, var


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ChainAborted("non-finite value in sampler state")


def ddpm_step(z, eps_hat, i: int, schedule: DiffusionSchedule, noise=None, rng=None, clip=None):
    """Ancestral step from grid index ``i`` to ``i - 1``; returns x_hat at ``i == 1``."""
    if not (1 <= i <= schedule.num_steps):
        raise ValueError(f"step index {i} outside [1, {schedule.num_steps}]")
    z = np.asarray(z, dtype=np.float64)
    _check_finite(z, eps_hat)
    x_hat = _denoised(z, eps_hat, schedule.alphas[i], schedule.sigmas[i], clip)
    if i == 1:
        return x_hat
    coef_z, coef_x, var = _posterior(schedule, i)
    if noise is None:
        noise = rng.standard_normal(z.shape)
    return coef_z * z + coef_x * x_hat + math.sqrt(var) * noise


def ddim_step(z, eps_hat, i: int, schedule: DiffusionSchedule, eta: float = 0.0, noise=None, rng=None, clip=None):
    if not (1 <= i <= schedule.num_steps):
        raise ValueError(f"step index {i} outside [1, {schedule.num_steps}]")
    if not (0.0 <= eta <= 1.0):
        raise ValueError("eta must lie in [0, 1]")
    z = np.asarray(z, dtype=np.float64)
    _check_finite(z, eps_hat)
    a_t, s_t = schedule.alphas[i], schedule.sigmas[i]
    x_hat = _denoised(z, eps_hat, a_t, s_t, clip)
    if i == 1:
        return x_hat
    eps_hat = (z - a_t * x_hat) / s_t
    a_s, s_s = schedule.alphas[i - 1], schedule.sigmas[i - 1]
    out = a_s * x_hat
    if eta == 0.0:
        return out + s_s * eps_hat
    _, _, var = _posterior(schedule, i)
    std = eta * math.sqrt(var)
    if noise is None:
        noise = rng.standard_normal(z.shape)
    return out + math.sqrt(max(s_s**2 - std**2, 0.0)) * eps_hat + std * noise


def chain_rng(seed: int, chain: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(chain, stream)))


def _run_chunk(source, labels, chains, cfg: SamplerConfig, schedule, keep_trajectory):
    n_steps = schedule.num_steps
    z = np.stack([chain_rng(cfg.seed, c, STREAM_INIT).standard_normal(2) for c in chains])
    anc = None
    if cfg.uses_ancestral_noise:
        anc = np.stack([chain_rng(cfg.seed, c, STREAM_ANCESTRAL).standard_normal((n_steps, 2)) for c in chains])
    cnoise = None
    if cfg.cads_active:
        dim = source.condition(labels[:1]).shape[-1]
        cnoise = np.stack([
            sample_unit_noise(cfg.cads.noise_distribution, (n_steps, dim), chain_rng(cfg.seed, c, STREAM_CONDITION))
            for c in chains
        ])
    traj = [z.copy()] if keep_trajectory else None
    for i in range(n_steps, 0, -1):
        row = n_steps - i
        eps = guided_prediction(
            source, z, i, labels, cfg, schedule,
            cond_noise=None if cnoise is None else cnoise[:, row],
        )
        noise = None if anc is None else anc[:, row]
        try:
            if cfg.kind == "ddpm":
                z = ddpm_step(z, eps, i, schedule, noise=noise, clip=source.clip)
            else:
                z = ddim_step(z, eps, i, schedule, cfg.eta, noise=noise, clip=source.clip)
        except ChainAborted as exc:
            bad = [c for c, zz, ee in zip(chains, z, eps) if not (np.all(np.isfinite(zz)) and np.all(np.isfinite(ee)))]
            raise ChainAborted(f"{exc} at step {i}; chains {bad}", bad) from None
        if keep_trajectory:
            traj.append(z.copy())
    if keep_trajectory:
        traj = np.stack(traj, axis=1)
    return [
        ChainResult(z[j].copy(), int(labels[j]), int(c), cfg.seed, None if traj is None else traj[j])
        for j, c in enumerate(chains)
    ]


def sample_batch(
    source,
    labels: Sequence[int],
    cfg: SamplerConfig,
    schedule: Optional[DiffusionSchedule] = None,
    workers: int = 1,
    keep_trajectory: bool = False,
    chunk_size: int = CHUNK_SIZE,
) -> List[ChainResult]:
    """Run one chain per entry of ``labels``; chain ``c`` conditions on ``labels[c]``."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or len(labels) == 0:
        raise ValueError("labels must be a non-empty 1-D sequence")
    if np.any(labels < 0) or np.any(labels >= source.num_classes):
        raise ValueError(f"labels must lie in [0, {source.num_classes})")
    if schedule is None:
        schedule = build_cosine_vp_schedule(cfg.num_steps)
    elif schedule.num_steps != cfg.num_steps:
        raise ValueError("schedule.num_steps does not match the sampler config")
    chunks = [np.arange(s, min(s + chunk_size, len(labels))) for s in range(0, len(labels), chunk_size)]

    def run(chains):
        return _run_chunk(source, labels[chains], chains, cfg, schedule, keep_trajectory)

    if workers <= 1:
        parts = [run(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    return [r for part in parts for r in part]


def results_to_arrays(results: Sequence[ChainResult]):
    points = np.array([r.point for r in results], dtype=np.float64).reshape(-1, 2)
    labels = np.array([r.label for r in results], dtype=np.int64)
    return points, labels
