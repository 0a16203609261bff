"""INI experiment configuration.

Grammar: standard ``configparser`` INI. Sections and keys::

    [gmm]          side, spacing, std
    [train]        epochs, batch_size, learning_rate, beta1, beta2,
                   uncond_dropout_prob, target_type, per_class, seed, hidden
    [sampler]      kind, num_steps, guidance_weight, eta, seed, per_class, workers
    [cads]         enabled, noise_scale, mixing_factor, rescale,
                   noise_distribution, schedule, tau1, tau2, tau, degree
    [dynamic_cfg]  enabled, schedule, tau1, tau2, tau, degree
    [metrics]      k, bandwidth, reference_per_class, reference_seed
    [output]       dir

Booleans are ``true``/``false``; ``hidden`` is a comma-separated list of
widths; ``bandwidth`` is ``auto`` or a positive number. Every key is optional
and missing keys take their defaults. Unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .model import TrainConfig
from .oracle import GmmSpec, make_grid_gmm
from .sampler import SamplerConfig
from .schedule import AnnealSchedule, CadsConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GmmConfig:
    side: int = 5
    spacing: float = 2.0
    std: float = 0.1

    def build(self) -> GmmSpec:
        return make_grid_gmm(self.side, self.spacing, self.std)


@dataclass(frozen=True)
class SamplerSettings:
    kind: str = "ddpm"
    num_steps: int = 100
    guidance_weight: float = 5.0
    eta: float = 0.0
    seed: int = 0
    per_class: int = 100
    workers: int = 1


@dataclass(frozen=True)
class MetricsConfig:
    k: int = 3
    bandwidth: Optional[float] = None
    reference_per_class: int = 100
    reference_seed: int = 12345


@dataclass(frozen=True)
class ExperimentConfig:
    gmm: GmmConfig = field(default_factory=GmmConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerSettings = field(default_factory=SamplerSettings)
    cads_enabled: bool = False
    cads: CadsConfig = field(default_factory=CadsConfig)
    dynamic_cfg_enabled: bool = False
    dynamic_cfg: AnnealSchedule = field(default_factory=AnnealSchedule)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    output_dir: str = "runs"

    def sampler_config(self) -> SamplerConfig:
        s = self.sampler
        return SamplerConfig(
            kind=s.kind,
            num_steps=s.num_steps,
            guidance_weight=s.guidance_weight,
            eta=s.eta,
            cads=self.cads if self.cads_enabled else None,
            dynamic_cfg=self.dynamic_cfg if self.dynamic_cfg_enabled else None,
            seed=s.seed,
        )


_ANNEAL_KEYS = ("schedule", "tau1", "tau2", "tau", "degree")


def _bool(section, key, raw):
    low = raw.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ConfigError(f"[{section}] {key}: expected true/false, got {raw!r}")


def _convert(section, key, raw, kind):
    try:
        if kind is bool:
            return _bool(section, key, raw)
        if kind == "hidden":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if kind == "bandwidth":
            return None if raw.strip().lower() == "auto" else float(raw)
        return kind(raw.strip())
    except ConfigError:
        raise
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from None


def _section_values(cp, section, spec):
    """Typed values for ``section``; ``spec`` maps allowed keys to converters."""
    if not cp.has_section(section):
        return {}
    out = {}
    for key, raw in cp.items(section):
        if key not in spec:
            raise ConfigError(f"unknown config key [{section}] {key}")
        out[key] = _convert(section, key, raw, spec[key])
    return out


def _anneal(values) -> AnnealSchedule:
    kind = values.pop("schedule", "linear")
    if kind not in ("linear", "polynomial"):
        raise ConfigError(f"unknown anneal schedule {kind!r}")
    return AnnealSchedule(kind=kind, **values)


_SECTIONS = {
    "gmm": {"side": int, "spacing": float, "std": float},
    "train": {
        "epochs": int, "batch_size": int, "learning_rate": float, "beta1": float, "beta2": float,
        "uncond_dropout_prob": float, "target_type": str, "per_class": int, "seed": int, "hidden": "hidden",
    },
    "sampler": {
        "kind": str, "num_steps": int, "guidance_weight": float, "eta": float, "seed": int,
        "per_class": int, "workers": int,
    },
    "cads": {
        "enabled": bool, "noise_scale": float, "mixing_factor": float, "rescale": bool,
        "noise_distribution": str, "schedule": str, "tau1": float, "tau2": float, "tau": float, "degree": float,
    },
    "dynamic_cfg": {"enabled": bool, "schedule": str, "tau1": float, "tau2": float, "tau": float, "degree": float},
    "metrics": {"k": int, "bandwidth": "bandwidth", "reference_per_class": int, "reference_seed": int},
    "output": {"dir": str},
}


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
    v = {name: _section_values(cp, name, spec) for name, spec in _SECTIONS.items()}
    try:
        cads_enabled = v["cads"].pop("enabled", False)
        anneal_vals = {k: v["cads"].pop(k) for k in _ANNEAL_KEYS if k in v["cads"]}
        cads = CadsConfig(anneal=_anneal(anneal_vals), **v["cads"])
        dyn_enabled = v["dynamic_cfg"].pop("enabled", False)
        cfg = ExperimentConfig(
            gmm=GmmConfig(**v["gmm"]),
            train=TrainConfig(**v["train"]),
            sampler=SamplerSettings(**v["sampler"]),
            cads_enabled=cads_enabled,
            cads=cads,
            dynamic_cfg_enabled=dyn_enabled,
            dynamic_cfg=_anneal(v["dynamic_cfg"]),
            metrics=MetricsConfig(**v["metrics"]),
            output_dir=v["output"].get("dir", "runs"),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    # surface sampler-level validation errors before any work starts
    try:
        cfg.sampler_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if value is None:
        return "auto"
    return str(value)


def _anneal_items(a: AnnealSchedule):
    return {"schedule": a.kind, "tau1": a.tau1, "tau2": a.tau2, "tau": a.tau, "degree": a.degree}


def config_to_dict(cfg: ExperimentConfig) -> dict:
    cads = {k: getattr(cfg.cads, k) for k in ("noise_scale", "mixing_factor", "rescale", "noise_distribution")}
    return {
        "gmm": dataclasses.asdict(cfg.gmm),
        "train": dataclasses.asdict(cfg.train),
        "sampler": dataclasses.asdict(cfg.sampler),
        "cads": {"enabled": cfg.cads_enabled, **cads, **_anneal_items(cfg.cads.anneal)},
        "dynamic_cfg": {"enabled": cfg.dynamic_cfg_enabled, **_anneal_items(cfg.dynamic_cfg)},
        "metrics": dataclasses.asdict(cfg.metrics),
        "output": {"dir": cfg.output_dir},
    }


def serialize_config(cfg: ExperimentConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    for section, values in config_to_dict(cfg).items():
        cp[section] = {k: _fmt(v) for k, v in values.items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
