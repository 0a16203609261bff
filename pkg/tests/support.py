"""Helpers shared by the unit and acceptance tests."""

import numpy as np

from cadslab.model import Denoiser, NoiseDraw, TrainConfig, draw_training_noise, init_denoiser, loss_and_grads


def random_instance(seed: int, hidden=(8, 8), num_classes=4, batch=6, target_type="epsilon"):
    """A random network and a fixed batch with replayable noise."""
    rng = np.random.default_rng(seed)
    net = init_denoiser(num_classes, rng, hidden, target_type)
    # non-zero biases so every parameter block carries gradient signal
    for b in net.biases:
        b += rng.normal(0, 0.1, b.shape)
    x = rng.normal(0, 2, (batch, 2))
    labels = rng.integers(0, num_classes, batch)
    noise = draw_training_noise(batch, rng, TrainConfig(uncond_dropout_prob=0.3))
    return net, x, labels, noise


def fd_max_rel_error(net: Denoiser, x, labels, noise: NoiseDraw, h=1e-5, floor=1e-7, coords=None, rng=None):
    """Largest relative error between analytic and central-difference gradients.

    ``coords`` limits the check to that many random entries per parameter array.
    """
    _, grads = loss_and_grads(net, x, labels, noise)
    worst = 0.0
    for p, g in zip(net.parameters(), grads.as_list()):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        idx = np.arange(flat.size)
        if coords is not None and flat.size > coords:
            idx = rng.choice(flat.size, coords, replace=False)
        for j in idx:
            old = flat[j]
            flat[j] = old + h
            up, _ = loss_and_grads(net, x, labels, noise)
            flat[j] = old - h
            dn, _ = loss_and_grads(net, x, labels, noise)
            flat[j] = old
            fd = (up - dn) / (2 * h)
            err = abs(fd - gflat[j]) / max(abs(fd), abs(gflat[j]), floor)
            worst = max(worst, err)
    return worst
