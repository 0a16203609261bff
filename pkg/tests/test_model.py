import hashlib
import math

import numpy as np
import pytest

from cadslab.model import (
    Adam,
    TrainConfig,
    TrainingDiverged,
    init_denoiser,
    load_checkpoint,
    loss_and_grads,
    prediction_to_eps_and_x,
    save_checkpoint,
    time_features,
    train,
)
from cadslab.oracle import GmmSpec, analytic_score, make_grid_gmm
from support import fd_max_rel_error, random_instance


def test_time_features_shape_and_range():
    f = time_features(np.linspace(0, 1, 7))
    assert f.shape == (7, 16)
    assert np.all(np.abs(f) <= 1)
    np.testing.assert_allclose(f[:, :8] ** 2 + f[:, 8:] ** 2, 1.0)


def test_forward_shapes_and_validation():
    net = init_denoiser(5, np.random.default_rng(0))
    assert net.layer_sizes == [34, 128, 128, 128, 2]
    assert net.num_classes == 5 and net.null_index == 5
    out = net.predict(np.zeros((4, 2)), 0.3, net.embed([0, 1, 2, 3]))
    assert out.shape == (4, 2)
    assert net.predict(np.zeros(2), 0.3, net.null_embedding()).shape == (2,)
    with pytest.raises(ValueError):
        net.predict(np.zeros((4, 2)), 0.3, np.zeros((4, 3)))
    with pytest.raises(ValueError):
        init_denoiser(5, np.random.default_rng(0), target_type="x0")


@pytest.mark.parametrize("target", ["epsilon", "velocity"])
def test_gradients_match_finite_differences(target):
    net, x, labels, noise = random_instance(0, target_type=target)
    assert fd_max_rel_error(net, x, labels, noise) < 1e-4


def test_gradients_default_width_sampled():
    rng = np.random.default_rng(1)
    net, x, labels, noise = random_instance(1, hidden=(128, 128, 128), num_classes=25, batch=4)
    assert fd_max_rel_error(net, x, labels, noise, coords=40, rng=rng) < 1e-4


def test_taylor_remainder_is_second_order():
    net, x, labels, noise = random_instance(2)
    loss0, grads = loss_and_grads(net, x, labels, noise)
    rng = np.random.default_rng(3)
    dirs = [rng.standard_normal(p.shape) for p in net.parameters()]
    slope = sum(float(np.sum(g * d)) for g, d in zip(grads.as_list(), dirs))
    base = [p.copy() for p in net.parameters()]

    def remainder(h):
        for p, b, d in zip(net.parameters(), base, dirs):
            p[...] = b + h * d
        val, _ = loss_and_grads(net, x, labels, noise)
        return abs(val - loss0 - h * slope)

    r1, r2 = remainder(1e-3), remainder(5e-4)
    assert 3.0 < r1 / r2 < 5.0


def test_unused_class_rows_get_zero_gradient():
    net, x, labels, noise = random_instance(4, num_classes=6)
    labels[:] = 1
    noise.drop[:] = False
    _, grads = loss_and_grads(net, x, labels, noise)
    table = grads.class_table
    assert np.any(table[1] != 0)
    assert np.all(table[[0, 2, 3, 4, 5, 6]] == 0)


def test_prediction_conversions_roundtrip():
    rng = np.random.default_rng(5)
    x, eps = rng.standard_normal((10, 2)), rng.standard_normal((10, 2))
    a, s = 0.6, 0.8
    z = a * x + s * eps
    e1, x1 = prediction_to_eps_and_x(eps, z, a, s, "epsilon")
    e2, x2 = prediction_to_eps_and_x(a * eps - s * x, z, a, s, "velocity")
    for e, xx in ((e1, x1), (e2, x2)):
        np.testing.assert_allclose(e, eps, atol=1e-12)
        np.testing.assert_allclose(xx, x, atol=1e-12)
    with pytest.raises(ValueError):
        prediction_to_eps_and_x(eps, z, 0.0, 1.0)


def test_adam_zero_gradient_is_noop():
    p = [np.arange(3.0)]
    opt = Adam(p, 0.1)
    opt.step(p, [np.zeros(3)])
    np.testing.assert_array_equal(p[0], np.arange(3.0))


def test_adam_first_step_moves_by_lr():
    p = [np.zeros(2)]
    Adam(p, 0.01).step(p, [np.array([3.0, -0.5])])
    np.testing.assert_allclose(p[0], [-0.01, 0.01], rtol=1e-6)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(uncond_dropout_prob=1.0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)


def test_training_is_deterministic_and_records_loss(tmp_path):
    spec = make_grid_gmm(side=2)
    cfg = TrainConfig(epochs=3, per_class=50, hidden=(16, 16))
    a, b = train(spec, cfg), train(spec, cfg)
    assert len(a.loss_curve) == 3 and all(math.isfinite(v) for v in a.loss_curve)
    save_checkpoint(a, tmp_path / "a.bin")
    save_checkpoint(b, tmp_path / "b.bin")
    ha = hashlib.sha256((tmp_path / "a.bin").read_bytes()).hexdigest()
    assert ha == hashlib.sha256((tmp_path / "b.bin").read_bytes()).hexdigest()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    spec = make_grid_gmm(side=2)
    with pytest.raises(TrainingDiverged):
        train(spec, TrainConfig(epochs=5, per_class=50, hidden=(16,), learning_rate=1e300))


def test_checkpoint_roundtrip(tmp_path):
    net = init_denoiser(7, np.random.default_rng(6), (12, 9), "velocity")
    path = tmp_path / "net.bin"
    save_checkpoint(net, path)
    back = load_checkpoint(path)
    assert back.target_type == "velocity"
    for p, q in zip(net.parameters(), back.parameters()):
        np.testing.assert_array_equal(p, q)
    z = np.random.default_rng(0).standard_normal((3, 2))
    np.testing.assert_array_equal(net.predict(z, 0.4, net.embed([0, 1, 2])), back.predict(z, 0.4, back.embed([0, 1, 2])))


def test_checkpoint_rejects_corruption(tmp_path):
    net = init_denoiser(3, np.random.default_rng(7), (4,))
    path = tmp_path / "net.bin"
    save_checkpoint(net, path)
    data = path.read_bytes()
    for bad in (b"XXXX" + data[4:], data + b"\0" * 8):
        path.write_bytes(bad)
        with pytest.raises(ValueError):
            load_checkpoint(path)
    path.write_bytes(data[:-8])
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_trained_model_recovers_single_gaussian_score():
    spec = GmmSpec(np.ones(1), np.array([[0.5, -0.5]]), np.array([np.eye(2) * 0.25]))
    net = train(spec, TrainConfig(epochs=40, per_class=4000, hidden=(64, 64), seed=1))
    rng = np.random.default_rng(8)
    for t in (0.3, 0.6):
        alpha, sigma = math.cos(math.pi * t / 2), math.sin(math.pi * t / 2)
        z = alpha * spec.means[0] + rng.normal(0, 0.5, (200, 2))
        eps = net.predict(z, t, net.embed(np.zeros(200, dtype=int)))
        want = -sigma * analytic_score(spec, z, alpha, sigma)
        assert np.sqrt(np.mean((eps - want) ** 2)) < 0.1
