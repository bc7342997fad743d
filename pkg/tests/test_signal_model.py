"""Tests for the synthetic signal generator."""

import math

import numpy as np
import pytest

from bregmix import signal_model
from bregmix.signal_model import SignalModelConfig

W_O_SPARSE = [0.25, -0.47, -0.37, 0.045, -0.18, 0.78, 0.147]


class _ForcedRng:
    """Stub generator that returns preset regressor/noise draws."""

    def __init__(self, a, n=0.0):
        self._a = np.asarray(a, dtype=float)
        self._n = n

    def standard_normal(self, size=None):
        if size is None:
            return self._n
        return self._a.copy()


def test_noiseless_identity_system():
    cfg = SignalModelConfig(w_o=np.array([1.0]), tau=1.0, noise_variance=0.0)
    sample = signal_model.next_sample(cfg, _ForcedRng([2.0]))
    assert sample.y == 2.0
    assert sample.a.tolist() == [2.0]


def test_seventh_order_config_is_valid():
    cfg = SignalModelConfig(w_o=np.array(W_O_SPARSE), tau=1.0, noise_variance=0.3)
    assert cfg.filter_order == 7


def test_invalid_configs_rejected():
    with pytest.raises(ValueError):
        SignalModelConfig(w_o=np.array([1.0]), tau=0.0, noise_variance=0.1)
    with pytest.raises(ValueError):
        SignalModelConfig(w_o=np.array([1.0]), tau=1.0, noise_variance=-0.1)
    with pytest.raises(ValueError):
        SignalModelConfig(w_o=np.array([[1.0]]), tau=1.0, noise_variance=0.1)


def test_same_seed_reproduces_sequence_bit_for_bit():
    cfg = SignalModelConfig(w_o=np.array(W_O_SPARSE), tau=0.8, noise_variance=0.3)
    r1 = np.random.default_rng(1234)
    r2 = np.random.default_rng(1234)
    for _ in range(50):
        s1 = signal_model.next_sample(cfg, r1)
        s2 = signal_model.next_sample(cfg, r2)
        assert s1.y == s2.y
        assert np.array_equal(s1.a, s2.a)

    b1 = signal_model.generate_block(cfg, np.random.default_rng(5),
                                     np.random.default_rng(6), 200)
    b2 = signal_model.generate_block(cfg, np.random.default_rng(5),
                                     np.random.default_rng(6), 200)
    assert np.array_equal(b1[0], b2[0]) and np.array_equal(b1[1], b2[1])


def test_mean_of_y_obeys_law_of_large_numbers():
    cfg = SignalModelConfig(w_o=np.array(W_O_SPARSE), tau=1.0, noise_variance=0.3)
    n = 1_000_000
    _, y = signal_model.generate_block(cfg, np.random.default_rng(77),
                                       np.random.default_rng(78), n)
    mean = math.fsum(y) / n
    var_y = cfg.tau**2 * float(cfg.w_o @ cfg.w_o) + cfg.noise_variance
    stderr = math.sqrt(var_y / n)
    assert abs(mean) <= 3 * stderr


def test_regressor_covariance_converges_to_identity():
    cfg = SignalModelConfig(w_o=np.array(W_O_SPARSE), tau=1.0, noise_variance=0.3)
    n = 200_000
    A, _ = signal_model.generate_block(cfg, np.random.default_rng(9),
                                       np.random.default_rng(10), n)
    cov = A.T @ A / n
    assert np.abs(cov - np.eye(7)).max() <= 5 / math.sqrt(n)


def test_second_moment_of_y_matches_model():
    cfg = SignalModelConfig(w_o=np.array(W_O_SPARSE), tau=0.6, noise_variance=0.3)
    n = 400_000
    _, y = signal_model.generate_block(cfg, np.random.default_rng(21),
                                       np.random.default_rng(22), n)
    y2 = y * y
    expected = cfg.tau**2 * float(cfg.w_o @ cfg.w_o) + cfg.noise_variance
    stderr = y2.std(ddof=1) / math.sqrt(n)
    assert abs(y2.mean() - expected) <= 3 * stderr


def test_snr_equal_powers_is_zero_db():
    w_o = np.array([0.6, 0.8])  # norm 1
    cfg = SignalModelConfig(w_o=w_o, tau=np.sqrt(0.3), noise_variance=0.3)
    assert signal_model.snr_db(cfg) == pytest.approx(0.0, abs=1e-12)


def test_snr_decade_ratio_is_ten_db():
    w_o = np.array([1.0, 0.0])
    cfg = SignalModelConfig(w_o=w_o, tau=np.sqrt(2.0), noise_variance=0.2)
    assert signal_model.snr_db(cfg) == pytest.approx(10.0, abs=1e-12)


def test_tau_for_target_snr_round_trips():
    w_o = np.array(W_O_SPARSE)
    tau = signal_model.tau_for_snr_db(w_o, 0.3, -10.0)
    assert tau == pytest.approx(math.sqrt(0.03 / float(w_o @ w_o)), rel=1e-12)
    cfg = SignalModelConfig(w_o=w_o, tau=tau, noise_variance=0.3)
    assert signal_model.snr_db(cfg) == pytest.approx(-10.0, abs=1e-10)


def test_zero_noise_snr_is_an_error():
    cfg = SignalModelConfig(w_o=np.array([1.0]), tau=1.0, noise_variance=0.0)
    with pytest.raises(ValueError, match="infinite SNR"):
        signal_model.snr_db(cfg)
