"""First-stage bank of LMS filters running in parallel on the same input.

The bank output ``x(t) = [y_hat_1(t), ..., y_hat_m(t)]`` is the regressor
seen by the second-stage combiner.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DivergenceError

__all__ = ["FilterBank", "LmsFilterState", "bank_adapt", "bank_predict", "make_bank"]


@dataclass(frozen=True)
class LmsFilterState:
    weights: np.ndarray
    mu: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1:
            raise ValueError("weights must be a 1-D vector")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        if not (self.mu > 0):
            raise ValueError("mu must be > 0")
        object.__setattr__(self, "weights", w)


@dataclass(frozen=True)
class FilterBank:
    filters: tuple[LmsFilterState, ...]

    def __post_init__(self):
        filters = tuple(self.filters)
        if len(filters) < 2:
            raise ValueError("a mixture needs at least two constituent filters")
        order = filters[0].weights.size
        if any(f.weights.size != order for f in filters):
            raise ValueError("all filters must share the same order")
        object.__setattr__(self, "filters", filters)

    @property
    def size(self) -> int:
        return len(self.filters)

    @property
    def filter_order(self) -> int:
        return self.filters[0].weights.size


def make_bank(filter_order: int, step_sizes) -> FilterBank:
    """Bank of zero-initialized LMS filters with the given step sizes."""
    return FilterBank(tuple(
        LmsFilterState(weights=np.zeros(filter_order), mu=float(mu))
        for mu in step_sizes
    ))


def _check_input(bank: FilterBank, a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.shape != (bank.filter_order,):
        raise ValueError(
            f"input has shape {a.shape}, expected ({bank.filter_order},)"
        )
    return a


def bank_predict(bank: FilterBank, a: np.ndarray) -> np.ndarray:
    """Outputs of all filters for input ``a``; the bank is unchanged."""
    a = _check_input(bank, a)
    return np.array([float(f.weights @ a) for f in bank.filters])


def bank_adapt(bank: FilterBank, a: np.ndarray, y: float) -> FilterBank:
    """One LMS step per filter: w <- w + mu * (y - dot(w, a)) * a."""
    a = _check_input(bank, a)
    updated = []
    for f in bank.filters:
        e = y - float(f.weights @ a)
        w = f.weights + f.mu * e * a
        if not np.all(np.isfinite(w)):
            raise DivergenceError("divergence detected")
        updated.append(LmsFilterState(weights=w, mu=f.mu))
    return FilterBank(tuple(updated))
