"""Noise schedules and the condition-annealing formulas.

Everything here is a pure function of its arguments. Randomness always comes
from an explicit ``numpy.random.Generator`` so that the corruption stream can
be kept separate from the sampler's ancestral stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

T_MIN = 0.001
T_MAX = 0.999

NOISE_FAMILIES = ("gaussian", "uniform", "laplace", "gamma")
GAMMA_SHAPE = 2.0


def cosine_alpha_sigma(t):
    """Signal and noise scale of the cosine VP process at continuous time ``t``.

    The unit interval is squeezed affinely onto ``[T_MIN, T_MAX]`` so the
    endpoints never reach pure signal or pure noise while the map stays
    strictly monotone.
    """
    u = T_MIN + (T_MAX - T_MIN) * np.asarray(t, dtype=np.float64)
    angle = 0.5 * math.pi * u
    return np.cos(angle), np.sin(angle)


@dataclass(frozen=True)
class DiffusionSchedule:
    num_steps: int
    alphas: np.ndarray = field(repr=False)
    sigmas: np.ndarray = field(repr=False)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.num_steps + 1, dtype=np.float64) / self.num_steps

    def t(self, i: int) -> float:
        return i / self.num_steps


def build_cosine_vp_schedule(num_steps: int) -> DiffusionSchedule:
    if int(num_steps) != num_steps or num_steps < 2:
        raise ValueError(f"num_steps must be an integer >= 2, got {num_steps!r}")
    num_steps = int(num_steps)
    t = np.arange(num_steps + 1, dtype=np.float64) / num_steps
    alphas, sigmas = cosine_alpha_sigma(t)
    alphas.setflags(write=False)
    sigmas.setflags(write=False)
    return DiffusionSchedule(num_steps, alphas, sigmas)


@dataclass(frozen=True)
class AnnealSchedule:
    """Annealing schedule gamma(t): 1 keeps the clean condition, 0 drops it.

    ``kind`` is ``"linear"`` (uses ``tau1``/``tau2``) or ``"polynomial"``
    (uses ``tau``/``degree``).
    """

    kind: str = "linear"
    tau1: float = 0.5
    tau2: float = 0.9
    tau: float = 0.5
    degree: float = 1.0

    def __post_init__(self):
        if self.kind == "linear":
            if not (0.0 <= self.tau1 < self.tau2 <= 1.0):
                raise ValueError(
                    f"tau1 and tau2 must satisfy 0 <= tau1 < tau2 <= 1, "
                    f"got tau1={self.tau1}, tau2={self.tau2}"
                )
        elif self.kind == "polynomial":
            if not (0.0 <= self.tau < 1.0):
                raise ValueError(f"tau must lie in [0, 1), got {self.tau}")
            if self.degree < 1:
                raise ValueError(f"degree must be >= 1, got {self.degree}")
        else:
            raise ValueError(f"unknown anneal schedule kind {self.kind!r}")

    @classmethod
    def linear(cls, tau1: float, tau2: float) -> "AnnealSchedule":
        return cls(kind="linear", tau1=tau1, tau2=tau2)

    @classmethod
    def polynomial(cls, tau: float, degree: float) -> "AnnealSchedule":
        return cls(kind="polynomial", tau=tau, degree=degree)


def gamma(anneal: AnnealSchedule, t: float) -> float:
    if anneal.kind == "linear":
        if t <= anneal.tau1:
            return 1.0
        if t >= anneal.tau2:
            return 0.0
        return (anneal.tau2 - t) / (anneal.tau2 - anneal.tau1)
    if t <= anneal.tau:
        return 1.0
    return ((1.0 - t) / (1.0 - anneal.tau)) ** anneal.degree


@dataclass(frozen=True)
class CadsConfig:
    noise_scale: float = 0.15
    mixing_factor: float = 1.0
    rescale: bool = True
    noise_distribution: str = "gaussian"
    anneal: AnnealSchedule = field(default_factory=AnnealSchedule)

    def __post_init__(self):
        if not self.noise_scale >= 0:
            raise ValueError(f"noise_scale must be >= 0, got {self.noise_scale}")
        if not (0.0 <= self.mixing_factor <= 1.0):
            raise ValueError(f"mixing_factor must lie in [0, 1], got {self.mixing_factor}")
        if self.noise_distribution not in NOISE_FAMILIES:
            raise ValueError(f"unknown noise distribution {self.noise_distribution!r}")


def sample_unit_noise(distribution: str, dim, rng: np.random.Generator) -> np.ndarray:
    """Draw noise of shape ``dim`` standardized to zero mean and unit variance."""
    if distribution == "gaussian":
        return rng.standard_normal(dim)
    if distribution == "uniform":
        return rng.uniform(-math.sqrt(3.0), math.sqrt(3.0), dim)
    if distribution == "laplace":
        return rng.laplace(0.0, 1.0 / math.sqrt(2.0), dim)
    if distribution == "gamma":
        # shape k, unit scale: mean k, variance k
        return (rng.gamma(GAMMA_SHAPE, 1.0, dim) - GAMMA_SHAPE) / math.sqrt(GAMMA_SHAPE)
    raise ValueError(f"unknown noise distribution {distribution!r}")


def rescale_condition(y_hat, mu_in, sigma_in, psi):
    """Pull a corrupted condition back toward the clean statistics.

    Works along the last axis, so a batch of conditions can be passed with
    per-row ``mu_in``/``sigma_in`` of shape ``(..., 1)``.
    """
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y_hat.shape[-1] < 2:
        raise ValueError("rescaling needs a condition vector with at least 2 entries")
    mean = y_hat.mean(axis=-1, keepdims=True)
    std = y_hat.std(axis=-1, keepdims=True)
    degenerate = std < 1e-12
    safe_std = np.where(degenerate, 1.0, std)
    rescaled = np.where(degenerate, mu_in, (y_hat - mean) / safe_std * sigma_in + mu_in)
    return psi * rescaled + (1.0 - psi) * y_hat


def apply_corruption(y, g: float, cfg: CadsConfig, noise):
    """Corrupt ``y`` at annealing level ``g`` using pre-drawn unit ``noise``."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = math.sqrt(g) * y + cfg.noise_scale * math.sqrt(1.0 - g) * noise
    if not cfg.rescale:
        return y_hat
    if y.shape[-1] < 2:
        raise ValueError("rescaling needs a condition vector with at least 2 entries")
    mu_in = y.mean(axis=-1, keepdims=True)
    sigma_in = y.std(axis=-1, keepdims=True)
    return rescale_condition(y_hat, mu_in, sigma_in, cfg.mixing_factor)


def corrupt_condition(y, t: float, cfg: CadsConfig, rng: np.random.Generator):
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0:
        raise ValueError("cannot corrupt an empty condition")
    if cfg.rescale and y.shape[-1] < 2:
        raise ValueError("rescaling needs a condition vector with at least 2 entries")
    g = gamma(cfg.anneal, t)
    if cfg.noise_scale == 0:
        noise = np.zeros_like(y)
    else:
        noise = sample_unit_noise(cfg.noise_distribution, y.shape, rng)
    return apply_corruption(y, g, cfg, noise)


def dynamic_cfg_weight(w_cfg: float, t: float, anneal: AnnealSchedule) -> float:
    if w_cfg < 0:
        raise ValueError(f"guidance weight must be >= 0, got {w_cfg}")
    return gamma(anneal, t) * w_cfg
