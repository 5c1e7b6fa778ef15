import numpy as np
import pytest

from utils import tensorgrad as tg
from utils.diffusion import (NoiseSchedule, ScoreNetwork, TrainConfig, ddpm_loss, forward_marginal_sample,
                             make_cosine_logsnr_schedule, make_linear_beta_schedule, make_schedule, predict_eps,
                             time_embedding, train_ddpm)
from utils.errors import ScheduleError, TensorShapeError
from utils.tensorgrad import Tape


def test_linear_schedule_examples():
    one = make_linear_beta_schedule(1, 0.1, 0.1)
    np.testing.assert_allclose(one.beta, [0.1])
    np.testing.assert_allclose(one.alpha_bar, [0.9])
    two = make_linear_beta_schedule(2, 0.1, 0.1)
    np.testing.assert_allclose(two.alpha_bar, [0.9, 0.81])


@pytest.mark.parametrize('kind', ['linear', 'cosine'])
def test_alpha_bar_strictly_decreasing(kind):
    s = make_schedule(kind, 64, beta_min=1e-3, beta_max=0.1)
    assert s.alpha_bar[-1] < s.alpha_bar[0]
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all((s.beta > 0) & (s.beta < 1))


def test_cosine_logsnr_endpoints_and_snr_consistency():
    s = make_cosine_logsnr_schedule(64)
    assert s.logsnr[0] == pytest.approx(20.0, abs=1e-6)
    assert s.logsnr[-1] == pytest.approx(-20.0, abs=1e-6)
    assert np.all(np.diff(s.logsnr) < 0)
    np.testing.assert_allclose(s.snr, np.exp(s.logsnr), rtol=1e-9)


def test_schedule_rejects_bad_inputs():
    with pytest.raises(ScheduleError):
        make_linear_beta_schedule(4, 0.2, 0.1)
    with pytest.raises(ScheduleError):
        make_cosine_logsnr_schedule(8, logsnr_max=-1.0, logsnr_min=1.0)
    with pytest.raises(ScheduleError):
        make_schedule('sigmoid', 8)
    with pytest.raises(ScheduleError):
        NoiseSchedule(T=2, beta=np.array([0.1, 0.1]), alpha_bar=np.array([0.5, 0.6]))


def test_fingerprint_tracks_schedule_content():
    a = make_linear_beta_schedule(16, 1e-3, 0.2)
    b = make_linear_beta_schedule(16, 1e-3, 0.2)
    c = make_linear_beta_schedule(16, 1e-3, 0.21)
    assert a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != c.fingerprint()
    assert len(a.fingerprint()) == 16


def test_alpha_bar_continuous_hits_integer_knots(toy_schedule):
    t = np.arange(1, toy_schedule.T + 1, dtype=np.float64)
    np.testing.assert_allclose(toy_schedule.alpha_bar_continuous(t).data, toy_schedule.alpha_bar, rtol=1e-12)
    mid = toy_schedule.alpha_bar_continuous(np.array([3.5])).data[0]
    assert toy_schedule.alpha_bar[3] < mid < toy_schedule.alpha_bar[2]


def test_forward_marginal_sample_examples(quarter_schedule):
    x0 = np.array([2.0, 0.0])
    out = forward_marginal_sample(quarter_schedule, x0, 2, np.array([0.0, 1.0])).data
    np.testing.assert_allclose(out, [1.0, 0.866025], atol=1e-6)
    same = forward_marginal_sample(quarter_schedule, x0, 0, np.array([9.0, -9.0])).data
    np.testing.assert_array_equal(same, x0)


def test_forward_marginal_sample_mean(quarter_schedule):
    x0 = np.array([[2.0, -1.0]])
    noise = np.random.default_rng(0).standard_normal((100_000, 2))
    out = forward_marginal_sample(quarter_schedule, x0, 2, noise).data
    se = np.sqrt(0.75 / len(noise))
    assert np.all(np.abs(out.mean(axis=0) - 0.5 * x0[0]) < 3 * se)


def test_time_embedding_at_zero():
    e = time_embedding(0.0, 16, 128).data
    np.testing.assert_array_equal(e[0, :8], np.zeros(8))
    np.testing.assert_array_equal(e[0, 8:], np.ones(8))


def test_time_embedding_depends_on_t_over_T():
    e = time_embedding(0.5, 4, 1).data[0]
    np.testing.assert_allclose(e, [np.sin(500.0), np.sin(5.0), np.cos(500.0), np.cos(5.0)], atol=1e-12)
    t = np.array([3.0, 17.25, 64.0])
    np.testing.assert_allclose(time_embedding(t, 16, 64).data, time_embedding(2 * t, 16, 128).data, atol=1e-9)


def test_time_embedding_distinct_on_integer_grid():
    e = time_embedding(np.arange(1, 129, dtype=np.float64), 32, 128).data
    d2 = ((e[:, None, :] - e[None, :, :]) ** 2).sum(-1)
    off = d2[~np.eye(128, dtype=bool)]
    assert off.min() > 1e-6


def test_time_embedding_is_continuous():
    a = time_embedding(10.0, 32, 128).data
    b = time_embedding(10.0 + 1e-9, 32, 128).data
    assert np.linalg.norm(a - b) < 1e-5


def test_time_embedding_needs_even_dim():
    with pytest.raises(TensorShapeError):
        time_embedding(1.0, 7, 10)


def test_zero_output_layer_predicts_zero():
    net = ScoreNetwork.init(2, 10, hidden=8, depth=2, time_dim=4)
    x = np.random.default_rng(0).standard_normal((5, 2))
    out = predict_eps(net, x, 3.0)
    assert out.shape == x.shape
    np.testing.assert_array_equal(out.data, np.zeros_like(x))


def test_predict_eps_gradient_wrt_input(toy_model):
    rng = np.random.default_rng(4)
    x0 = rng.standard_normal((4, 2))
    weights = rng.standard_normal((4, 2))
    t = np.array([[3.0], [7.5], [12.0], [19.0]])
    with Tape() as tape:
        x = tape.variable(x0)
        loss = tg.sum_(tg.mul(predict_eps(toy_model, x, t), weights))
    auto = tape.backward(loss).of(x)
    num = tg.numerical_grad(lambda a: tg.sum_(tg.mul(predict_eps(toy_model, a, t), weights)).item(), x0)
    rel = np.max(np.abs(auto - num)) / np.max(np.abs(num))
    assert rel < 1e-6


def test_predict_eps_gradient_wrt_time(toy_model):
    x = np.random.default_rng(8).standard_normal((3, 2))
    with Tape() as tape:
        t = tape.variable(6.3)
        loss = tg.sum_(predict_eps(toy_model, x, t))
    auto = tape.backward(loss).of(t)
    num = tg.numerical_grad(lambda a: tg.sum_(predict_eps(toy_model, x, a)).item(), np.array(6.3))
    assert auto == pytest.approx(float(num), rel=1e-6)


def test_predict_eps_rejects_wrong_width(toy_model):
    with pytest.raises(TensorShapeError):
        predict_eps(toy_model, np.ones((3, 5)), 1.0)


def test_loss_at_initialization_is_dimension():
    rng = np.random.default_rng(0)
    s = make_linear_beta_schedule(50, 1e-3, 0.1)
    net = ScoreNetwork.init(2, 50, hidden=8, depth=1, time_dim=4)
    n = 20_000
    x0 = rng.standard_normal((n, 2))
    t = rng.integers(1, 51, size=n)
    loss = ddpm_loss(net, s, x0, t, rng.standard_normal((n, 2))).item()
    assert loss == pytest.approx(2.0, rel=0.05)


def test_max1snr_equals_simple_when_snr_below_one(toy_model):
    s = make_linear_beta_schedule(20, 0.5, 0.6)
    assert np.all(s.snr <= 1.0)
    rng = np.random.default_rng(1)
    x0, noise = rng.standard_normal((32, 2)), rng.standard_normal((32, 2))
    t = rng.integers(1, 21, size=32)
    a = ddpm_loss(toy_model, s, x0, t, noise, 'simple').item()
    b = ddpm_loss(toy_model, s, x0, t, noise, 'max1snr').item()
    assert a == b


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(weighting='vlb')
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)


def test_training_is_deterministic_and_reduces_loss(toy_schedule):
    from utils.datasets import make_eight_gaussians

    data, _ = make_eight_gaussians(2000, seed=0)
    net = ScoreNetwork.init(2, toy_schedule.T, hidden=32, depth=2, time_dim=8, seed=0)
    cfg = TrainConfig(steps=150, batch_size=128, lr=3e-3, warmup_steps=10, log_every=0)
    a = train_ddpm(net, toy_schedule, data, cfg, seed=3, progress=False)
    b = train_ddpm(net, toy_schedule, data, cfg, seed=3, progress=False)
    assert a.network.fingerprint() == b.network.fingerprint()
    assert a.ema.fingerprint() == b.ema.fingerprint()
    assert len(a.losses) == 150
    assert np.mean(a.losses[-30:]) < np.mean(a.losses[:10])
    # the input network is untouched
    assert net.fingerprint() == ScoreNetwork.init(2, toy_schedule.T, hidden=32, depth=2, time_dim=8).fingerprint()


@pytest.mark.slow
def test_point_mass_data_learns_scaled_input():
    s = make_linear_beta_schedule(20, 1e-2, 0.3)
    data = np.zeros((256, 2))
    net = ScoreNetwork.init(2, 20, hidden=64, depth=2, time_dim=16, seed=0)
    cfg = TrainConfig(steps=3000, batch_size=256, lr=2e-3, warmup_steps=50, ema_decay=0.999, log_every=0)
    trained = train_ddpm(net, s, data, cfg, seed=0, progress=False).ema
    rng = np.random.default_rng(5)
    for t in (5, 10, 20):
        xt = np.sqrt(1.0 - s.alpha_bar[t - 1]) * rng.standard_normal((64, 2))
        target = xt / np.sqrt(1.0 - s.alpha_bar[t - 1])
        err = predict_eps(trained, xt, float(t)).data - target
        assert np.sqrt(np.mean(err ** 2)) < 0.15
