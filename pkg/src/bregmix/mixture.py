"""Second-stage combiners for a bank of constituent filters.

Two families of multiplicative updates act on an augmented, strictly
positive weight vector so that signed combination weights can be trained
multiplicatively:

* EGU (unnormalized exponentiated gradient): each augmented entry is
  scaled by ``exp(+/- mu * e * r)`` where ``r`` is the matching regressor
  coordinate.  No normalization; only positivity is preserved.
* EG (exponentiated gradient): the same exponential scaling followed by a
  rescale of the whole augmented vector so that its sum is exactly ``u``
  (the total mass, shared across both halves).

Both exist in an affine-constrained form, where the effective combination
weights sum to one and the free parameters live in an ``m - 1`` dimensional
space with regressor ``delta(t) = [x_1 - x_m, ..., x_{m-1} - x_m]``, and in
an unconstrained form acting directly on ``x(t)``.  Plain LMS combiners are
provided as baselines, and every EGU/EG update also has a ``_lin`` variant
that replaces ``exp(z)`` by ``1 + z`` (the first-order object studied by the
moment recursions in :mod:`bregmix.transient`).

Within one step the prediction and the error are always computed from the
state *before* the update.  Exponent arguments are clamped to ``+/-700`` to
avoid overflow; a clamped step is reported through ``MixtureStep.saturated``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, replace

import numpy as np

from .exceptions import DivergenceError

__all__ = [
    "ALGORITHMS",
    "EXP_CLAMP",
    "AffineMixtureState",
    "LmsMixtureState",
    "MixtureStep",
    "UnconstrainedMixtureState",
    "affine_effective_weights",
    "affine_eg_step",
    "affine_eg_step_lin",
    "affine_egu_step",
    "affine_egu_step_lin",
    "affine_error",
    "affine_lms_step",
    "augmented_weights",
    "initial_state",
    "step_function",
    "unconstrained_eg_step",
    "unconstrained_eg_step_lin",
    "unconstrained_egu_step",
    "unconstrained_egu_step_lin",
    "unconstrained_lms_step",
]

EXP_CLAMP = 700.0

ALGORITHMS = (
    "affine_egu",
    "affine_eg",
    "affine_lms",
    "unconstrained_egu",
    "unconstrained_eg",
    "unconstrained_lms",
)


@dataclass(frozen=True)
class AffineMixtureState:
    """Affine combiner state: augmented weights ``[lambda1; lambda2]``.

    The signed free weights are ``lambda1 - lambda2`` (length ``m - 1``);
    ``u`` is the total augmented mass and is set only for the EG variant.
    On an EG trajectory the augmented sum equals ``u`` after every step; an
    EG step treats its input as defined up to positive scale, so off-mass
    states are simply renormalized.
    """

    lambda1: np.ndarray
    lambda2: np.ndarray
    mu: float
    u: float | None = None

    def __post_init__(self):
        l1 = np.asarray(self.lambda1, dtype=float)
        l2 = np.asarray(self.lambda2, dtype=float)
        if l1.ndim != 1 or l1.shape != l2.shape or l1.size < 1:
            raise ValueError("lambda1 and lambda2 must be 1-D vectors of equal length >= 1")
        if not (np.all(l1 > 0) and np.all(l2 > 0)):
            raise ValueError("augmented weights must be strictly positive")
        if not (self.mu > 0):
            raise ValueError("mu must be > 0")
        if self.u is not None and self.u < 1:
            raise ValueError("u must be >= 1")
        object.__setattr__(self, "lambda1", l1)
        object.__setattr__(self, "lambda2", l2)

    @property
    def m(self) -> int:
        return self.lambda1.size + 1


@dataclass(frozen=True)
class UnconstrainedMixtureState:
    """Unconstrained combiner state: augmented weights ``[w1; w2]``.

    The signed combination weights are ``w1 - w2`` (length ``m``).
    """

    w1: np.ndarray
    w2: np.ndarray
    mu: float
    u: float | None = None

    def __post_init__(self):
        w1 = np.asarray(self.w1, dtype=float)
        w2 = np.asarray(self.w2, dtype=float)
        if w1.ndim != 1 or w1.shape != w2.shape or w1.size < 2:
            raise ValueError("w1 and w2 must be 1-D vectors of equal length >= 2")
        if not (np.all(w1 > 0) and np.all(w2 > 0)):
            raise ValueError("augmented weights must be strictly positive")
        if not (self.mu > 0):
            raise ValueError("mu must be > 0")
        if self.u is not None and self.u < 1:
            raise ValueError("u must be >= 1")
        object.__setattr__(self, "w1", w1)
        object.__setattr__(self, "w2", w2)

    @property
    def m(self) -> int:
        return self.w1.size


@dataclass(frozen=True)
class LmsMixtureState:
    """Plain-weight baseline state.

    ``weights`` has length ``m - 1`` for the affine combiner (free weights)
    and length ``m`` for the unconstrained combiner.  No positivity.
    """

    weights: np.ndarray
    mu: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.size < 1:
            raise ValueError("weights must be a 1-D vector")
        if not (self.mu > 0):
            raise ValueError("mu must be > 0")
        object.__setattr__(self, "weights", w)


@dataclass(frozen=True)
class MixtureStep:
    """Result of one combiner step (prediction/error use pre-update weights)."""

    prediction: float
    error: float
    next_state: AffineMixtureState | UnconstrainedMixtureState | LmsMixtureState
    saturated: bool = False


def initial_state(algorithm: str, m: int, mu: float, u: float | None = None):
    """Deterministic initial state with uniform effective weights 1/m.

    EGU halves are offset by ``beta = 1/(2m)``; EG halves are centered on
    ``u`` split evenly so the augmented sum is exactly ``u``.  For the
    unconstrained EG with ``u == 1`` the negative half would vanish, so it
    is floored at 1e-6 and the state renormalized back to mass ``u``.
    """
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    if m < 2:
        raise ValueError("a mixture needs at least two constituents (m >= 2)")
    is_eg = algorithm.endswith("_eg")
    if is_eg:
        if u is None:
            raise ValueError(f"{algorithm} requires u")
        if u < 1:
            raise ValueError("u must be >= 1")
    elif u is not None:
        raise ValueError(f"{algorithm} does not take u")

    beta = 1.0 / (2 * m)
    if algorithm == "affine_egu":
        return AffineMixtureState(
            lambda1=np.full(m - 1, 1.0 / m + beta),
            lambda2=np.full(m - 1, beta),
            mu=mu,
        )
    if algorithm == "affine_eg":
        half = u / (2 * (m - 1))
        return AffineMixtureState(
            lambda1=np.full(m - 1, half + beta),
            lambda2=np.full(m - 1, half - beta),
            mu=mu,
            u=float(u),
        )
    if algorithm == "affine_lms":
        return LmsMixtureState(weights=np.full(m - 1, 1.0 / m), mu=mu)
    if algorithm == "unconstrained_egu":
        return UnconstrainedMixtureState(
            w1=np.full(m, 1.0 / m + beta),
            w2=np.full(m, beta),
            mu=mu,
        )
    if algorithm == "unconstrained_eg":
        w1 = np.full(m, (u + 1.0) / (2 * m))
        w2 = np.full(m, (u - 1.0) / (2 * m))
        if u == 1:
            w2 = np.full(m, 1e-6)
            scale = u / (w1.sum() + w2.sum())
            w1 = w1 * scale
            w2 = w2 * scale
        return UnconstrainedMixtureState(w1=w1, w2=w2, mu=mu, u=float(u))
    return LmsMixtureState(weights=np.full(m, 1.0 / m), mu=mu)


def augmented_weights(state) -> np.ndarray:
    """Concatenated weight vector tracked by the moment recursions."""
    if isinstance(state, AffineMixtureState):
        return np.concatenate([state.lambda1, state.lambda2])
    if isinstance(state, UnconstrainedMixtureState):
        return np.concatenate([state.w1, state.w2])
    return state.weights.copy()


def affine_effective_weights(s: AffineMixtureState) -> np.ndarray:
    """Length-m combination weights; they sum to one by construction."""
    lam = s.lambda1 - s.lambda2
    return np.concatenate([lam, [1.0 - lam.sum()]])


def _affine_delta_error(lam: np.ndarray, x: np.ndarray, y: float):
    delta = x[:-1] - x[-1]
    e = (y - x[-1]) - float(lam @ delta)
    return delta, e


def affine_error(s: AffineMixtureState, x: np.ndarray, y: float):
    """Difference regressor ``delta`` and error of the affine combiner."""
    x = _check_regressor(x, s.m)
    return _affine_delta_error(s.lambda1 - s.lambda2, x, y)


def _check_regressor(x: np.ndarray, m: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (m,):
        raise ValueError(f"regressor has shape {x.shape}, expected ({m},)")
    return x


def _quiet(fn):
    # overflow is reported as DivergenceError, not as a runtime warning
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        with np.errstate(over="ignore", under="ignore", invalid="ignore"):
            return fn(*args, **kwargs)

    return wrapper


def _clamped_exp(z: np.ndarray):
    zc = np.clip(z, -EXP_CLAMP, EXP_CLAMP)
    return np.exp(zc), bool(np.any(zc != z))


def _bare_affine(l1, l2, mu, u) -> AffineMixtureState:
    # linearized updates may leave the validated region (entries <= 0)
    s = AffineMixtureState.__new__(AffineMixtureState)
    object.__setattr__(s, "lambda1", l1)
    object.__setattr__(s, "lambda2", l2)
    object.__setattr__(s, "mu", mu)
    object.__setattr__(s, "u", u)
    return s


def _bare_unconstrained(w1, w2, mu, u) -> UnconstrainedMixtureState:
    s = UnconstrainedMixtureState.__new__(UnconstrainedMixtureState)
    object.__setattr__(s, "w1", w1)
    object.__setattr__(s, "w2", w2)
    object.__setattr__(s, "mu", mu)
    object.__setattr__(s, "u", u)
    return s


def _require_finite(*arrays):
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise DivergenceError("divergence detected")


def _require_positive(*arrays):
    # overflow/underflow can push an augmented weight to inf, nan or 0
    for arr in arrays:
        if not np.all(np.isfinite(arr)) or not np.all(arr > 0):
            raise DivergenceError("divergence detected")


def _affine_prediction(s: AffineMixtureState, x: np.ndarray):
    x = _check_regressor(x, s.m)
    delta, e = _affine_delta_error(s.lambda1 - s.lambda2, x, 0.0)
    # e computed with y=0 equals -prediction
    return x, delta, -e


@_quiet
def affine_egu_step(s: AffineMixtureState, x: np.ndarray, y: float) -> MixtureStep:
    x, delta, pred = _affine_prediction(s, x)
    e = y - pred
    grow, sat = _clamped_exp(s.mu * e * delta)
    shrink, sat2 = _clamped_exp(-s.mu * e * delta)
    l1 = s.lambda1 * grow
    l2 = s.lambda2 * shrink
    _require_positive(l1, l2)
    return MixtureStep(pred, e, _bare_affine(l1, l2, s.mu, s.u), sat or sat2)


@_quiet
def affine_egu_step_lin(s: AffineMixtureState, x: np.ndarray, y: float) -> MixtureStep:
    x, delta, pred = _affine_prediction(s, x)
    e = y - pred
    z = s.mu * e * delta
    l1 = s.lambda1 * (1.0 + z)
    l2 = s.lambda2 * (1.0 - z)
    _require_finite(l1, l2)
    return MixtureStep(pred, e, _bare_affine(l1, l2, s.mu, s.u))


def _eg_mass_scale(s_half1, s_half2, u):
    # EG states are defined up to scale; the error uses the mass-u direction
    total = s_half1.sum() + s_half2.sum()
    if not np.isfinite(total) or total <= 0:
        raise DivergenceError("divergence detected")
    return u / total


@_quiet
def affine_eg_step(s: AffineMixtureState, x: np.ndarray, y: float) -> MixtureStep:
    if s.u is None:
        raise ValueError("EG step requires a state with u set")
    x = _check_regressor(x, s.m)
    mass = _eg_mass_scale(s.lambda1, s.lambda2, s.u)
    delta = x[:-1] - x[-1]
    pred = x[-1] + mass * float((s.lambda1 - s.lambda2) @ delta)
    e = y - pred
    grow, sat = _clamped_exp(s.mu * e * delta)
    shrink, sat2 = _clamped_exp(-s.mu * e * delta)
    l1 = s.lambda1 * grow
    l2 = s.lambda2 * shrink
    total = l1.sum() + l2.sum()
    if not np.isfinite(total):
        raise DivergenceError("divergence detected")
    scale = s.u / total
    l1 = l1 * scale
    l2 = l2 * scale
    _require_positive(l1, l2)
    return MixtureStep(pred, e, _bare_affine(l1, l2, s.mu, s.u), sat or sat2)


@_quiet
def affine_eg_step_lin(s: AffineMixtureState, x: np.ndarray, y: float) -> MixtureStep:
    if s.u is None:
        raise ValueError("EG step requires a state with u set")
    x = _check_regressor(x, s.m)
    mass = _eg_mass_scale(s.lambda1, s.lambda2, s.u)
    delta = x[:-1] - x[-1]
    pred = x[-1] + mass * float((s.lambda1 - s.lambda2) @ delta)
    e = y - pred
    z = s.mu * e * delta
    l1 = s.lambda1 * (1.0 + z)
    l2 = s.lambda2 * (1.0 - z)
    scale = s.u / (l1.sum() + l2.sum())
    l1 = l1 * scale
    l2 = l2 * scale
    _require_finite(l1, l2)
    return MixtureStep(pred, e, _bare_affine(l1, l2, s.mu, s.u))


@_quiet
def affine_lms_step(s: LmsMixtureState, x: np.ndarray, y: float) -> MixtureStep:
    x = _check_regressor(x, s.weights.size + 1)
    delta, e = _affine_delta_error(s.weights, x, y)
    pred = y - e
    w = s.weights + s.mu * e * delta
    _require_finite(w)
    return MixtureStep(pred, e, replace(s, weights=w))


def _unconstrained_prediction(s: UnconstrainedMixtureState, x: np.ndarray):
    x = _check_regressor(x, s.m)
    return x, float((s.w1 - s.w2) @ x)


@_quiet
def unconstrained_egu_step(s: UnconstrainedMixtureState, x: np.ndarray, y: float) -> MixtureStep:
    x, pred = _unconstrained_prediction(s, x)
    e = y - pred
    grow, sat = _clamped_exp(s.mu * e * x)
    shrink, sat2 = _clamped_exp(-s.mu * e * x)
    w1 = s.w1 * grow
    w2 = s.w2 * shrink
    _require_positive(w1, w2)
    return MixtureStep(pred, e, _bare_unconstrained(w1, w2, s.mu, s.u), sat or sat2)


@_quiet
def unconstrained_egu_step_lin(s: UnconstrainedMixtureState, x: np.ndarray, y: float) -> MixtureStep:
    x, pred = _unconstrained_prediction(s, x)
    e = y - pred
    z = s.mu * e * x
    w1 = s.w1 * (1.0 + z)
    w2 = s.w2 * (1.0 - z)
    _require_finite(w1, w2)
    return MixtureStep(pred, e, _bare_unconstrained(w1, w2, s.mu, s.u))


@_quiet
def unconstrained_eg_step(s: UnconstrainedMixtureState, x: np.ndarray, y: float) -> MixtureStep:
    if s.u is None:
        raise ValueError("EG step requires a state with u set")
    x = _check_regressor(x, s.m)
    mass = _eg_mass_scale(s.w1, s.w2, s.u)
    pred = mass * float((s.w1 - s.w2) @ x)
    e = y - pred
    grow, sat = _clamped_exp(s.mu * e * x)
    shrink, sat2 = _clamped_exp(-s.mu * e * x)
    w1 = s.w1 * grow
    w2 = s.w2 * shrink
    total = w1.sum() + w2.sum()
    if not np.isfinite(total):
        raise DivergenceError("divergence detected")
    scale = s.u / total
    w1 = w1 * scale
    w2 = w2 * scale
    _require_positive(w1, w2)
    return MixtureStep(pred, e, _bare_unconstrained(w1, w2, s.mu, s.u), sat or sat2)


@_quiet
def unconstrained_eg_step_lin(s: UnconstrainedMixtureState, x: np.ndarray, y: float) -> MixtureStep:
    if s.u is None:
        raise ValueError("EG step requires a state with u set")
    x = _check_regressor(x, s.m)
    mass = _eg_mass_scale(s.w1, s.w2, s.u)
    pred = mass * float((s.w1 - s.w2) @ x)
    e = y - pred
    z = s.mu * e * x
    w1 = s.w1 * (1.0 + z)
    w2 = s.w2 * (1.0 - z)
    scale = s.u / (w1.sum() + w2.sum())
    w1 = w1 * scale
    w2 = w2 * scale
    _require_finite(w1, w2)
    return MixtureStep(pred, e, _bare_unconstrained(w1, w2, s.mu, s.u))


@_quiet
def unconstrained_lms_step(s: LmsMixtureState, x: np.ndarray, y: float) -> MixtureStep:
    x = _check_regressor(x, s.weights.size)
    pred = float(s.weights @ x)
    e = y - pred
    w = s.weights + s.mu * e * x
    _require_finite(w)
    return MixtureStep(pred, e, replace(s, weights=w))


_STEPS = {
    ("affine_egu", False): affine_egu_step,
    ("affine_egu", True): affine_egu_step_lin,
    ("affine_eg", False): affine_eg_step,
    ("affine_eg", True): affine_eg_step_lin,
    ("unconstrained_egu", False): unconstrained_egu_step,
    ("unconstrained_egu", True): unconstrained_egu_step_lin,
    ("unconstrained_eg", False): unconstrained_eg_step,
    ("unconstrained_eg", True): unconstrained_eg_step_lin,
    ("affine_lms", False): affine_lms_step,
    ("unconstrained_lms", False): unconstrained_lms_step,
}


def step_function(algorithm: str, use_linearized: bool = False):
    """Step callable for an algorithm tag; LMS has no linearized variant."""
    try:
        return _STEPS[(algorithm, use_linearized)]
    except KeyError:
        raise ValueError(
            f"no step for algorithm={algorithm!r} use_linearized={use_linearized}"
        ) from None
