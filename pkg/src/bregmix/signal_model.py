"""Synthetic desired-signal generator.

Data model: ``y(t) = tau * dot(w_o, a(t)) + n(t)`` where ``a(t)`` is an
i.i.d. zero-mean unit-variance Gaussian vector and ``n(t)`` is i.i.d.
zero-mean Gaussian noise with variance ``noise_variance``.  ``tau`` scales
the SNR of the desired signal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Sample",
    "SignalModelConfig",
    "generate_block",
    "next_sample",
    "snr_db",
    "tau_for_snr_db",
]


@dataclass(frozen=True)
class SignalModelConfig:
    """Parameters of the data model.  ``w_o`` is the true system."""

    w_o: np.ndarray
    tau: float
    noise_variance: float

    def __post_init__(self):
        w_o = np.asarray(self.w_o, dtype=float)
        if w_o.ndim != 1 or w_o.size == 0:
            raise ValueError("w_o must be a non-empty 1-D vector")
        if not np.all(np.isfinite(w_o)):
            raise ValueError("w_o must be finite")
        object.__setattr__(self, "w_o", w_o)
        if not (self.tau > 0):
            raise ValueError("tau must be > 0")
        if self.noise_variance < 0:
            raise ValueError("noise_variance must be >= 0")

    @property
    def filter_order(self) -> int:
        return self.w_o.size


@dataclass(frozen=True)
class Sample:
    """One draw from the data model: regressor ``a`` and desired value ``y``."""

    a: np.ndarray
    y: float


def next_sample(config: SignalModelConfig, rng: np.random.Generator) -> Sample:
    """Draw the next (a, y) pair from a single random stream.

    The regressor is drawn first, then the noise, so a fixed seed yields a
    bit-for-bit reproducible sequence.
    """
    a = rng.standard_normal(config.filter_order)
    n = rng.standard_normal() * np.sqrt(config.noise_variance)
    y = config.tau * float(a @ config.w_o) + n
    return Sample(a=a, y=float(y))


def generate_block(
    config: SignalModelConfig,
    rng_regressor: np.random.Generator,
    rng_noise: np.random.Generator,
    horizon: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Generate ``horizon`` samples at once from two independent streams.

    Returns ``(A, y)`` with ``A`` of shape ``(horizon, filter_order)`` and
    ``y`` of shape ``(horizon,)``.  Row ``t`` of ``A`` is ``a(t)``.
    """
    A = rng_regressor.standard_normal((horizon, config.filter_order))
    n = rng_noise.standard_normal(horizon) * np.sqrt(config.noise_variance)
    y = config.tau * (A @ config.w_o) + n
    return A, y


def snr_db(config: SignalModelConfig) -> float:
    """SNR of the desired signal: 10*log10(tau^2*||w_o||^2 / noise_variance)."""
    if config.noise_variance == 0:
        raise ValueError("infinite SNR: noise_variance is zero")
    power = config.tau**2 * float(config.w_o @ config.w_o)
    return 10.0 * np.log10(power / config.noise_variance)


def tau_for_snr_db(w_o: np.ndarray, noise_variance: float, target_snr_db: float) -> float:
    """Solve the SNR formula for tau at a given target SNR in dB."""
    w_o = np.asarray(w_o, dtype=float)
    if noise_variance <= 0:
        raise ValueError("target SNR requires noise_variance > 0")
    norm_sq = float(w_o @ w_o)
    if norm_sq == 0:
        raise ValueError("w_o must be nonzero to set an SNR")
    return float(np.sqrt(noise_variance * 10.0 ** (target_snr_db / 10.0) / norm_sq))
