"""Small fully-connected denoiser, trained with hand-written backprop and Adam.

All arithmetic is float64. The network sees ``concat(z, time_features(t), cond)``
where ``cond`` is a row of the learned class table (the last row is the null
condition used for the unconditional branch of classifier-free guidance).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .oracle import GmmSpec, gmm_sample
from .schedule import T_MIN, cosine_alpha_sigma

DATA_DIM = 2
TIME_DIM = 16
EMBED_DIM = 16
TARGET_TYPES = ("epsilon", "velocity")

CHECKPOINT_MAGIC = b"CADS"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


def time_features(t, dim: int = TIME_DIM) -> np.ndarray:
    """Sinusoidal features of ``t`` in [0, 1], shape ``(..., dim)``."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    arg = 1000.0 * np.asarray(t, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


def _silu(a):
    s = 1.0 / (1.0 + np.exp(-a))
    return a * s, s


@dataclass
class Denoiser:
    class_table: np.ndarray
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    target_type: str = "epsilon"
    loss_curve: List[float] = field(default_factory=list, compare=False)

    @property
    def num_classes(self) -> int:
        return self.class_table.shape[0] - 1

    @property
    def null_index(self) -> int:
        return self.class_table.shape[0] - 1

    @property
    def layer_sizes(self) -> List[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def parameters(self) -> List[np.ndarray]:
        """All parameter arrays in checkpoint order."""
        out = [self.class_table]
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "Denoiser":
        return Denoiser(
            self.class_table.copy(),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.target_type,
            list(self.loss_curve),
        )

    def embed(self, labels) -> np.ndarray:
        return self.class_table[np.asarray(labels)]

    def null_embedding(self) -> np.ndarray:
        return self.class_table[self.null_index]

    def predict(self, z, t, cond) -> np.ndarray:
        out, _ = _forward(self, z, t, cond)
        return out


def init_denoiser(
    num_classes: int,
    rng: np.random.Generator,
    hidden: Sequence[int] = (128, 128, 128),
    target_type: str = "epsilon",
) -> Denoiser:
    if target_type not in TARGET_TYPES:
        raise ValueError(f"unknown target type {target_type!r}")
    sizes = [DATA_DIM + TIME_DIM + EMBED_DIM, *hidden, DATA_DIM]
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.standard_normal((n_in, n_out)) * math.sqrt(1.0 / n_in))
        biases.append(np.zeros(n_out))
    class_table = rng.standard_normal((num_classes + 1, EMBED_DIM))
    return Denoiser(class_table, weights, biases, target_type)


def _forward(net: Denoiser, z, t, cond):
    z = np.asarray(z, dtype=np.float64)
    cond = np.asarray(cond, dtype=np.float64)
    if cond.shape[-1] != EMBED_DIM:
        raise ValueError(f"condition must have dimension {EMBED_DIM}, got {cond.shape[-1]}")
    if z.shape[-1] != DATA_DIM:
        raise ValueError(f"z must have dimension {DATA_DIM}, got {z.shape[-1]}")
    squeeze = z.ndim == 1
    z2 = np.atleast_2d(z)
    n = z2.shape[0]
    tf = np.broadcast_to(time_features(t), (n, TIME_DIM))
    c2 = np.broadcast_to(cond, (n, EMBED_DIM))
    h = np.concatenate([z2, tf, c2], axis=1)
    cache = [h]
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        a = h @ w + b
        if i == last:
            h = a
        else:
            h, s = _silu(a)
            cache.append((a, s, h))
    out = h[0] if squeeze else h
    return out, cache


def _backward(net: Denoiser, cache, dout):
    """Gradients of ``sum(dout * output)`` w.r.t. weights, biases and the condition input."""
    dout = np.atleast_2d(dout)
    gw = [None] * len(net.weights)
    gb = [None] * len(net.biases)
    delta = dout
    for i in range(len(net.weights) - 1, -1, -1):
        h_in = cache[0] if i == 0 else cache[i][2]
        gw[i] = h_in.T @ delta
        gb[i] = delta.sum(axis=0)
        dh = delta @ net.weights[i].T
        if i > 0:
            a, s, _ = cache[i]
            delta = dh * (s + a * s * (1.0 - s))
    dcond = dh[:, DATA_DIM + TIME_DIM :]
    return gw, gb, dcond


def forward(net: Denoiser, z, t, cond) -> np.ndarray:
    return net.predict(z, t, cond)


def prediction_to_eps_and_x(pred, z, alpha, sigma, target_type: str = "epsilon"):
    if np.any(np.asarray(alpha) <= 0):
        raise ValueError("alpha must be positive")
    pred = np.asarray(pred, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if target_type == "epsilon":
        eps = pred
        x = (z - sigma * eps) / alpha
    elif target_type == "velocity":
        x = alpha * z - sigma * pred
        eps = sigma * z + alpha * pred
    else:
        raise ValueError(f"unknown target type {target_type!r}")
    return eps, x


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 256
    learning_rate: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    uncond_dropout_prob: float = 0.1
    target_type: str = "epsilon"
    per_class: int = 400
    seed: int = 0
    hidden: tuple = (128, 128, 128)

    def __post_init__(self):
        if not (0.0 <= self.uncond_dropout_prob < 1.0):
            raise ValueError("uncond_dropout_prob must lie in [0, 1)")
        if self.target_type not in TARGET_TYPES:
            raise ValueError(f"unknown target type {self.target_type!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.per_class < 1:
            raise ValueError("epochs must be >= 0, batch_size and per_class >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class Gradients:
    class_table: np.ndarray
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def as_list(self) -> List[np.ndarray]:
        out = [self.class_table]
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


@dataclass
class NoiseDraw:
    """The random quantities of one loss evaluation, fixed so it can be replayed."""

    t: np.ndarray
    eps: np.ndarray
    drop: np.ndarray


def draw_training_noise(n: int, rng: np.random.Generator, cfg: TrainConfig) -> NoiseDraw:
    t = rng.uniform(T_MIN, 1.0, n)
    eps = rng.standard_normal((n, DATA_DIM))
    drop = rng.random(n) < cfg.uncond_dropout_prob
    return NoiseDraw(t, eps, drop)


def loss_and_grads(net: Denoiser, x, labels, noise: NoiseDraw):
    """MSE diffusion loss and exact gradients for a fixed noise draw."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(x)
    if n == 0:
        raise ValueError("empty batch")
    alpha, sigma = cosine_alpha_sigma(noise.t)
    alpha, sigma = alpha[:, None], sigma[:, None]
    zt = alpha * x + sigma * noise.eps
    rows = np.where(noise.drop, net.null_index, labels)
    cond = net.class_table[rows]
    pred, cache = _forward(net, zt, noise.t, cond)
    target = noise.eps if net.target_type == "epsilon" else alpha * noise.eps - sigma * x
    resid = pred - target
    loss = float(np.mean(resid**2))
    gw, gb, dcond = _backward(net, cache, 2.0 * resid / resid.size)
    gtable = np.zeros_like(net.class_table)
    np.add.at(gtable, rows, dcond)
    return loss, Gradients(gtable, gw, gb)


def training_loss(net: Denoiser, batch, rng: np.random.Generator, cfg: TrainConfig):
    """Draw times, noise and dropout for ``batch = (x, labels)``; return loss and gradients."""
    x, labels = batch
    if len(x) == 0:
        raise ValueError("empty batch")
    return loss_and_grads(net, x, labels, draw_training_noise(len(x), rng, cfg))


class Adam:
    def __init__(self, params: Sequence[np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.step_count = 0

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        self.step_count += 1
        c1 = 1.0 - self.beta1**self.step_count
        c2 = 1.0 - self.beta2**self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_dataset(spec: GmmSpec, per_class: int, rng: np.random.Generator):
    pts, labs = [], []
    for k in range(spec.K):
        s = gmm_sample(spec, k, per_class, rng)
        pts.append(s.points)
        labs.append(s.labels)
    return np.concatenate(pts), np.concatenate(labs)


def train(spec: GmmSpec, cfg: TrainConfig, log=None) -> Denoiser:
    """Train a denoiser on samples from ``spec``; deterministic given ``cfg.seed``.

    The time grid is continuous, so no ``DiffusionSchedule`` is needed here.
    """
    init_ss, data_ss, noise_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    net = init_denoiser(spec.K, np.random.default_rng(init_ss), cfg.hidden, cfg.target_type)
    x, labels = make_dataset(spec, cfg.per_class, np.random.default_rng(data_ss))
    rng = np.random.default_rng(noise_ss)
    params = net.parameters()
    opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2)
    n = len(x)
    total_steps = cfg.epochs * math.ceil(n / cfg.batch_size)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        losses, sizes = [], []
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            loss, grads = training_loss(net, (x[idx], labels[idx]), rng, cfg)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {opt.step_count}")
            # cosine decay to 10% of the base rate
            frac = opt.step_count / max(total_steps, 1)
            opt.lr = cfg.learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * frac)))
            opt.step(params, grads.as_list())
            losses.append(loss)
            sizes.append(len(idx))
        net.loss_curve.append(float(np.average(losses, weights=sizes)))
        if log is not None:
            log(f"epoch {epoch + 1}/{cfg.epochs} loss {net.loss_curve[-1]:.5f}")
    return net


def save_checkpoint(net: Denoiser, path) -> None:
    """Write the binary checkpoint.

    Layout (little-endian): ``b"CADS"``, u32 version, u32 number of linear
    layers L, L+1 u32 layer widths, u32 number of classes K (excluding null),
    u32 embedding dim, u32 time-feature dim, u32 target tag (0 epsilon,
    1 velocity), then float64 parameters: class table ``(K+1, E)``, followed by
    ``W_i (in, out)`` and ``b_i (out,)`` for each layer, all row-major.
    """
    sizes = net.layer_sizes
    header = CHECKPOINT_MAGIC + struct.pack(
        f"<II{len(sizes)}IIIII",
        CHECKPOINT_VERSION,
        len(net.weights),
        *sizes,
        net.num_classes,
        net.class_table.shape[1],
        TIME_DIM,
        TARGET_TYPES.index(net.target_type),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for p in net.parameters():
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_checkpoint(path) -> Denoiser:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, n_layers = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    sizes = struct.unpack_from(f"<{n_layers + 1}I", data, off)
    off += 4 * (n_layers + 1)
    k, emb, tdim, tag = struct.unpack_from("<IIII", data, off)
    off += 16
    if emb != EMBED_DIM or tdim != TIME_DIM or sizes[0] != DATA_DIM + TIME_DIM + EMBED_DIM:
        raise ValueError(f"{path}: incompatible architecture header")

    def take(shape):
        nonlocal off
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        return arr.astype(np.float64)

    table = take((k + 1, emb))
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        weights.append(take((n_in, n_out)))
        biases.append(take((n_out,)))
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes after parameters")
    return Denoiser(table, weights, biases, TARGET_TYPES[tag])
