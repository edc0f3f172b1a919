"""DP-SGD tests: sampling, clipping, noise calibration, degenerate limits."""

import math

import numpy as np
import pytest

from candledp import accountant, dpsgd, gaf, nn
from candledp.errors import ConfigInvalid, NonFiniteGradient


# ---------------------------------------------------------------------------
# poisson_sample
# ---------------------------------------------------------------------------

def test_poisson_full_rate_takes_everything():
    rng = np.random.default_rng(0)
    for _ in range(5):
        np.testing.assert_array_equal(dpsgd.poisson_sample(50, 50, rng),
                                      np.arange(50))


def test_poisson_mean_size_within_three_standard_errors():
    rng = np.random.default_rng(1)
    n, group = 1000, 100
    draws = 10_000
    sizes = [len(dpsgd.poisson_sample(n, group, rng)) for _ in range(draws)]
    q = group / n
    se = math.sqrt(n * q * (1 - q) / draws)
    assert abs(np.mean(sizes) - group) <= 3 * se


def test_poisson_deterministic_per_seed():
    a = dpsgd.poisson_sample(200, 20, np.random.default_rng(7))
    b = dpsgd.poisson_sample(200, 20, np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)


def test_poisson_rejects_bad_sizes():
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigInvalid):
        dpsgd.poisson_sample(10, 0, rng)
    with pytest.raises(ConfigInvalid):
        dpsgd.poisson_sample(10, 11, rng)


# ---------------------------------------------------------------------------
# clip_gradient
# ---------------------------------------------------------------------------

def test_clip_three_four_five():
    np.testing.assert_allclose(dpsgd.clip_gradient(np.array([3.0, 4.0]), 1.0),
                               [0.6, 0.8], rtol=1e-15)


def test_clip_passes_short_vectors_through():
    g = np.array([0.3, 0.4])
    out = dpsgd.clip_gradient(g, 1.0)
    np.testing.assert_array_equal(out, g)


def test_clip_zero_vector():
    np.testing.assert_array_equal(dpsgd.clip_gradient(np.zeros(5), 2.0),
                                  np.zeros(5))


def test_clip_norm_bound_randomized():
    rng = np.random.default_rng(2)
    for _ in range(500):
        dim = int(rng.integers(1, 40))
        g = rng.normal(size=dim) * rng.uniform(0.01, 100)
        c = rng.uniform(0.1, 5.0)
        clipped = dpsgd.clip_gradient(g, c)
        assert np.linalg.norm(clipped) <= c + 1e-9
        if np.linalg.norm(g) > 1e-12:
            cos = np.dot(clipped, g) / (np.linalg.norm(clipped)
                                        * np.linalg.norm(g) + 1e-300)
            assert cos == pytest.approx(1.0, abs=1e-9)  # direction preserved


def test_clip_rejects_non_finite():
    with pytest.raises(NonFiniteGradient):
        dpsgd.clip_gradient(np.array([1.0, math.nan]), 1.0)
    with pytest.raises(NonFiniteGradient):
        dpsgd.clip_gradient(np.array([math.inf]), 1.0)


# ---------------------------------------------------------------------------
# noisy_mean
# ---------------------------------------------------------------------------

def test_noisy_mean_zero_noise_is_exact_mean_with_configured_divisor():
    grads = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = dpsgd.noisy_mean(grads, 0.0, 1.0, group_size=8,
                           rng=np.random.default_rng(0))
    np.testing.assert_allclose(out, [0.5, 0.75])  # /8, not /2


def test_noisy_mean_empty_group_is_pure_noise():
    rng = np.random.default_rng(3)
    sigma, c, group = 1.0, 2.0, 4
    draws = np.stack([
        dpsgd.noisy_mean(np.zeros((0, 6)), sigma, c, group, rng)
        for _ in range(20_000)])
    target = sigma * c / group
    assert np.std(draws, axis=0) == pytest.approx(target, rel=0.05)
    assert np.mean(draws) == pytest.approx(0.0, abs=5 * target / math.sqrt(20_000 * 6))


def test_noisy_mean_deterministic_per_seed():
    grads = np.ones((3, 5))
    a = dpsgd.noisy_mean(grads.copy(), 0.7, 1.5, 4, np.random.default_rng(11))
    b = dpsgd.noisy_mean(grads.copy(), 0.7, 1.5, 4, np.random.default_rng(11))
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# config validation
# ---------------------------------------------------------------------------

def test_config_rejects_out_of_domain():
    with pytest.raises(ConfigInvalid):
        dpsgd.DpSgdConfig(group_size=0)
    with pytest.raises(ConfigInvalid):
        dpsgd.DpSgdConfig(noise_multiplier=-0.1)
    with pytest.raises(ConfigInvalid):
        dpsgd.DpSgdConfig(clip_bound=0.0)
    with pytest.raises(ConfigInvalid):
        dpsgd.DpSgdConfig(clip_bound=math.inf, noise_multiplier=1.0)
    with pytest.raises(ConfigInvalid):
        dpsgd.DpSgdConfig(target_delta=0.0)
    with pytest.raises(ConfigInvalid):
        dpsgd.DpSgdConfig(learning_rate=0.0)
    # the degenerate plain-SGD sentinel is allowed
    dpsgd.DpSgdConfig(clip_bound=math.inf, noise_multiplier=0.0)


# ---------------------------------------------------------------------------
# dp_sgd_train
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def micro_encoded(micro_dataset):
    xtr, ytr = gaf.encode_dataset(micro_dataset.train)
    xte, yte = gaf.encode_dataset(micro_dataset.test)
    return xtr, ytr, xte, yte


def test_zero_steps_returns_init_and_zero_epsilon(micro_encoded):
    xtr, ytr, _, _ = micro_encoded
    config = dpsgd.DpSgdConfig(group_size=8, steps=0, seed=5)
    params, record = dpsgd.dp_sgd_train(xtr, ytr, config)
    init_seed = np.random.SeedSequence(5).spawn(3)[0]
    expected = nn.init_params(nn.Architecture(), np.random.default_rng(init_seed))
    assert params.flat.tobytes() == expected.flat.tobytes()
    assert record.guarantee.epsilon == 0.0
    assert record.steps == 0 and record.step_losses == []


def test_degenerate_mode_matches_plain_full_batch_sgd(micro_encoded):
    # sigma = 0, C = inf, q = 1: the loop must reproduce plain SGD exactly.
    xtr, ytr, _, _ = micro_encoded
    n = len(ytr)
    steps = 50
    lr = 0.02
    dp_config = dpsgd.DpSgdConfig(group_size=n, noise_multiplier=0.0,
                                  clip_bound=math.inf, learning_rate=lr,
                                  steps=steps, seed=3)
    dp_params, dp_record = dpsgd.dp_sgd_train(xtr, ytr, dp_config)
    base_config = nn.TrainConfig(learning_rate=lr, momentum=0.0,
                                 batch_size=n, epochs=steps, seed=3)
    base_params, base_history = nn.train_classifier(xtr, ytr, base_config)
    assert len(dp_record.step_losses) == len(base_history.step_losses) == steps
    np.testing.assert_allclose(dp_record.step_losses,
                               base_history.step_losses, atol=1e-9)
    np.testing.assert_allclose(dp_params.flat, base_params.flat, atol=1e-9)


def test_training_is_pure_function_of_config(micro_encoded):
    xtr, ytr, xte, yte = micro_encoded
    config = dpsgd.DpSgdConfig(group_size=16, noise_multiplier=1.0,
                               clip_bound=1.0, steps=12, seed=9)
    p1, r1 = dpsgd.dp_sgd_train(xtr, ytr, config, x_eval=xte, y_eval=yte)
    p2, r2 = dpsgd.dp_sgd_train(xtr, ytr, config, x_eval=xte, y_eval=yte)
    assert p1.flat.tobytes() == p2.flat.tobytes()
    assert r1.step_losses == r2.step_losses
    assert r1.epoch_accuracy == r2.epoch_accuracy


def test_reported_epsilon_matches_accountant(micro_encoded):
    xtr, ytr, _, _ = micro_encoded
    config = dpsgd.DpSgdConfig(group_size=16, noise_multiplier=1.2,
                               clip_bound=1.0, steps=37, seed=1)
    _, record = dpsgd.dp_sgd_train(xtr, ytr, config)
    expected = accountant.dpsgd_epsilon(16 / len(ytr), 1.2, 37, 1e-5)
    assert record.guarantee.epsilon == pytest.approx(expected.epsilon, rel=1e-12)
    assert record.guarantee.alpha == expected.alpha
    # the cumulative schedule ends at the final value and never decreases
    assert record.epsilon_per_step[-1] == pytest.approx(record.guarantee.epsilon)
    assert np.all(np.diff(record.epsilon_per_step) >= -1e-12)


def test_epsilon_monotone_in_steps_and_noise(micro_encoded):
    xtr, ytr, _, _ = micro_encoded

    def eps(steps, sigma):
        config = dpsgd.DpSgdConfig(group_size=16, noise_multiplier=sigma,
                                   clip_bound=1.0, steps=steps, seed=0)
        return dpsgd.dp_sgd_train(xtr, ytr, config)[1].guarantee.epsilon

    assert eps(10, 1.0) <= eps(40, 1.0)
    assert eps(20, 1.5) <= eps(20, 0.8)


def test_zero_noise_reports_infinite_epsilon(micro_encoded):
    xtr, ytr, _, _ = micro_encoded
    config = dpsgd.DpSgdConfig(group_size=16, noise_multiplier=0.0,
                               clip_bound=1.0, steps=3, seed=0)
    _, record = dpsgd.dp_sgd_train(xtr, ytr, config)
    assert math.isinf(record.guarantee.epsilon)
    assert not accountant.flag_private(record.guarantee)


def test_empty_draws_still_count_steps(micro_encoded):
    xtr, ytr, _, _ = micro_encoded
    # group_size 1 over 64 samples: q = 1/64, empty draws are common
    config = dpsgd.DpSgdConfig(group_size=1, noise_multiplier=1.0,
                               clip_bound=1.0, steps=40, seed=2)
    _, record = dpsgd.dp_sgd_train(xtr, ytr, config)
    assert record.steps == 40
    assert len(record.step_losses) == 40
    assert any(math.isnan(v) for v in record.step_losses)
    expected = accountant.dpsgd_epsilon(1 / len(ytr), 1.0, 40, 1e-5)
    assert record.guarantee.epsilon == pytest.approx(expected.epsilon)


def test_post_clip_norms_bounded_during_run(micro_encoded):
    xtr, ytr, _, _ = micro_encoded
    params = nn.init_params(nn.Architecture(), 0)
    grads = nn.backward_per_example(params, xtr[:32], ytr[:32])
    clipped = dpsgd._clip_rows(grads.copy(), 0.7)
    assert np.all(np.linalg.norm(clipped, axis=1) <= 0.7 + 1e-9)


def test_run_record_csv(tmp_path, micro_encoded):
    xtr, ytr, xte, yte = micro_encoded
    config = dpsgd.DpSgdConfig(group_size=16, noise_multiplier=1.0,
                               clip_bound=1.0, steps=8, seed=4)
    _, record = dpsgd.dp_sgd_train(xtr, ytr, config, x_eval=xte, y_eval=yte)
    path = tmp_path / "run.csv"
    dpsgd.write_run_record(path, record, config, steps_per_epoch=4)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,loss,epoch,test_accuracy,epsilon_so_far"
    assert len(lines) == 1 + 8
    sidecar = (tmp_path / "run.config.txt").read_text()
    assert "noise_multiplier=1.0" in sidecar
    assert "final_guarantee=" in sidecar
    # deterministic rewrite
    dpsgd.write_run_record(tmp_path / "run2.csv", record, config,
                           steps_per_epoch=4)
    assert (tmp_path / "run2.csv").read_bytes() == path.read_bytes()
