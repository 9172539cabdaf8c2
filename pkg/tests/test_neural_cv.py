"""MLP trial networks and the centered/regularized training objective."""

import numpy as np
import pytest
from scipy.special import expit

from steincv.neural_cv import (Mlp, TrainConfig, cncv_loss, load_checkpoint,
                               mlp_forward, ncv_loss, save_checkpoint,
                               train_cncv)
from steincv.samplers import SampleBatch, sample_mixture_iid
from steincv.stein_cv import stein_g_batch, variance_reduction_ratio
from steincv.targets import standard_normal, symmetric_mixture


def _random_net(dim, hidden=(7, 5), seed=0):
    return Mlp.random(dim, hidden, "sigmoid",
                      np.random.Generator(np.random.PCG64(seed)))


def test_mlp_forward_matches_manual_computation():
    net = _random_net(3)
    x = np.random.Generator(np.random.PCG64(1)).standard_normal((6, 3))
    h = expit(x @ net.weights[0] + net.biases[0])
    h = expit(h @ net.weights[1] + net.biases[1])
    ref = h @ net.weights[2] + net.biases[2]
    np.testing.assert_allclose(net(x), ref, rtol=1e-12)
    assert net(x).shape == (6, 3)                 # square field
    np.testing.assert_allclose(mlp_forward(net, x[0]), ref[0], rtol=1e-12)


def test_mlp_sizes_and_parameters():
    net = _random_net(4, hidden=(10, 8))
    assert net.sizes == (4, 10, 8, 4)
    shapes = [p.shape for p in net.parameters()]
    assert shapes == [(4, 10), (10,), (10, 8), (8,), (8, 4), (4,)]


def _toy_batch(n=40, dim=3, seed=2, offset=0.0):
    target = standard_normal(dim)
    thetas = target.sample(n, seed)
    batch = SampleBatch(thetas, target.score_batch(thetas))
    return batch.with_f(lambda th: np.sin(th.sum(axis=1)) + offset)


def test_ncv_loss_matches_direct_stein_evaluation():
    net = _random_net(3, seed=3)
    batch = _toy_batch()
    g = stein_g_batch(net, batch.thetas, batch.scores)
    expected = np.mean((batch.f_values + g) ** 2)
    out = ncv_loss(batch, net)
    assert abs(out.total - expected) < 1e-10
    assert out.regularizer == pytest.approx(np.mean(g ** 2))


def test_cncv_loss_decomposition():
    net = _random_net(3, seed=4)
    batch = _toy_batch(offset=5.0)
    out = cncv_loss(batch, net, mu=5.0, lam=0.3)
    g = stein_g_batch(net, batch.thetas, batch.scores)
    fit = np.mean((batch.f_values + g - 5.0) ** 2)
    reg = np.mean(g ** 2)
    assert out.fit == pytest.approx(fit)
    assert out.regularizer == pytest.approx(reg)
    assert out.total == pytest.approx(fit + 0.3 * reg)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lam=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(mu_init="warm")
    with pytest.raises(ValueError):
        TrainConfig(mu_init="pretrain", pretrain_lam=0.05, lam=0.1)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")


def test_training_reduces_the_objective_and_is_deterministic():
    mix = symmetric_mixture(2)
    train = sample_mixture_iid(mix, 200, seed=5).with_f(
        lambda th: np.sin(th.sum(axis=1)))
    cfg = TrainConfig(lam=0.1, epochs=150, minibatch=50, learning_rate=3e-3,
                      optimizer="adam", hidden=(10, 10), seed=6)
    model = train_cncv(train, cfg)
    curve = model.payload["loss_curve"]
    assert curve[-1] < 0.5 * curve[0]

    again = train_cncv(train, cfg)
    np.testing.assert_array_equal(model.g_tilde(train.thetas, train.scores),
                                  again.g_tilde(train.thetas, train.scores))
    assert model.mu == again.mu


def test_mu_initialization_strategies():
    train = _toy_batch(n=120, offset=4.0)
    base = dict(epochs=5, minibatch=40, hidden=(6, 6), seed=7)
    zero = train_cncv(train, TrainConfig(mu_init="zero", **base))
    mean = train_cncv(train, TrainConfig(mu_init="sample-mean", **base))
    # after 5 epochs mu has barely moved from its starting point
    assert abs(zero.mu) < 1.0
    assert abs(mean.mu - train.f_values.mean()) < 1.0
    uncentered = train_cncv(train, TrainConfig(center=False, **base))
    assert uncentered.mu == 0.0

    pre = train_cncv(train, TrainConfig(mu_init="pretrain", pretrain_lam=1.0,
                                        lam=0.1, **base))
    assert np.isfinite(pre.mu)


def test_trained_model_reduces_variance_out_of_sample():
    mix = symmetric_mixture(2)
    f = lambda th: np.sin(np.pi / 2 * th.sum(axis=1))
    train = sample_mixture_iid(mix, 500, seed=8).with_f(f)
    test = sample_mixture_iid(mix, 500, seed=9).with_f(f)
    cfg = TrainConfig(lam=0.05, epochs=400, minibatch=64, learning_rate=3e-3,
                      optimizer="adam", seed=10)
    model = train_cncv(train, cfg)
    report = variance_reduction_ratio(model, test, train_batch=train)
    assert report.ratio_test < 0.5


def test_checkpoint_round_trip(tmp_path):
    net = _random_net(3, seed=11)
    cfg = TrainConfig()
    path = tmp_path / "ckpt.txt"
    save_checkpoint(path, net, 2.5, cfg)
    loaded, mu = load_checkpoint(path)
    assert mu == 2.5
    x = np.random.Generator(np.random.PCG64(12)).standard_normal((5, 3))
    np.testing.assert_array_equal(net(x), loaded(x))

    bad = tmp_path / "bad.txt"
    bad.write_text("something else\n")
    with pytest.raises(ValueError):
        load_checkpoint(bad)
