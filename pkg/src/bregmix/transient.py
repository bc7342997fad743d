"""Deterministic mean / second-moment recursions for the combiner weights.

The recursions evolve ``q_a(t) = E[augmented weights]`` and
``Q_a(t) = E[augmented weights outer product]`` given per-step input
moments estimated from an ensemble:

* ``gamma(t)``: mean of the augmented regressor times the target term
  (``y - y_hat_m`` for the affine combiner, ``y`` for the unconstrained),
* ``Gamma(t)``: mean outer product of the augmented regressor,
* ``d(t)``: mean square of the target term.

The EGU recursion is linear in ``(q_a, Q_a)``; the EG recursion divides the
same right-hand sides by scalar normalizers and rescales to total mass
``u``.  ``mse_evolution`` turns the moments into the predicted MSE and
``convergence_condition`` evaluates the contraction factor of the mean
error recursion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DegenerateMomentError, IllConditionedError

__all__ = [
    "MomentEstimates",
    "OptimumSolution",
    "TheoreticalMoments",
    "convergence_condition",
    "eg_mean_step",
    "eg_second_moment_step",
    "egu_moment_step",
    "estimate_moments",
    "mse_evolution",
    "optimum_weights",
]

_SYMMETRY_TOL = 1e-8
_DENOM_FLOOR = 1e-12
_COND_LIMIT = 1e12


@dataclass
class MomentEstimates:
    """Per-step ensemble moments of the augmented regressor and target term.

    Shapes: ``gamma (T, k)``, ``Gamma (T, k, k)``, ``d (T,)`` where ``k`` is
    the augmented dimension (``2(m-1)`` affine, ``2m`` unconstrained).
    """

    gamma: np.ndarray
    Gamma: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=float)
        self.Gamma = np.asarray(self.Gamma, dtype=float)
        self.d = np.asarray(self.d, dtype=float)
        T, k = self.gamma.shape
        if self.Gamma.shape != (T, k, k) or self.d.shape != (T,):
            raise ValueError("inconsistent moment shapes")
        asym = np.abs(self.Gamma - np.transpose(self.Gamma, (0, 2, 1))).max(initial=0.0)
        if asym > _SYMMETRY_TOL:
            raise ValueError(f"Gamma is not symmetric (max asymmetry {asym:.3e})")

    @property
    def horizon(self) -> int:
        return self.gamma.shape[0]

    @property
    def dim(self) -> int:
        return self.gamma.shape[1]


@dataclass
class TheoreticalMoments:
    """Trajectories of the recursion: ``q_a (T, k)`` and ``Q_a (T, k, k)``."""

    q_a: np.ndarray
    Q_a: np.ndarray


@dataclass
class OptimumSolution:
    """Wiener solution in the combiner's regressor space: ``w0 = R^-1 p``."""

    R: np.ndarray
    p: np.ndarray
    w0: np.ndarray
    cond: float


def estimate_moments(u_streams, yterm_streams) -> MomentEstimates:
    """Sample moments across an ensemble of runs.

    ``u_streams`` is a sequence of per-run arrays of shape ``(T, k)`` (the
    augmented regressor over time) and ``yterm_streams`` the matching
    per-run target terms of shape ``(T,)``.  Runs are accumulated in
    sequence order so the result is reproducible.
    """
    u_streams = [np.asarray(u, dtype=float) for u in u_streams]
    yterm_streams = [np.asarray(v, dtype=float) for v in yterm_streams]
    if len(u_streams) < 2:
        raise ValueError("moment estimation needs at least two runs")
    if len(u_streams) != len(yterm_streams):
        raise ValueError("mismatched run counts")
    T, k = u_streams[0].shape
    gamma = np.zeros((T, k))
    Gamma = np.zeros((T, k, k))
    d = np.zeros(T)
    for u, yt in zip(u_streams, yterm_streams):
        if u.shape != (T, k) or yt.shape != (T,):
            raise ValueError("all runs must share the same horizon and dimension")
        gamma += u * yt[:, None]
        Gamma += np.einsum("ti,tj->tij", u, u)
        d += yt * yt
    n = len(u_streams)
    return MomentEstimates(gamma=gamma / n, Gamma=Gamma / n, d=d / n)


def _diag_of_product(Q: np.ndarray, G: np.ndarray) -> np.ndarray:
    # diagonal of Q @ G without forming the product
    return np.einsum("ij,ji->i", Q, G)


def _mean_rhs(q_a, Q_a, gamma, Gamma, mu):
    return q_a + mu * gamma * q_a - mu * _diag_of_product(Q_a, Gamma)


def _second_moment_rhs(q_a, Q_a, gamma, Gamma, mu):
    """Right-hand side of the coupled second-moment recursion.

    ``E[diag^2(u)]`` is the diagonal matrix of ``Gamma``'s diagonal, an
    exact identity that avoids a separate estimator.
    """
    C = Q_a - np.outer(q_a, q_a)
    drift = gamma - Gamma @ q_a
    e2_diag = np.diagonal(Gamma)
    # D Q + Q D with D = diag(drift)
    A = Q_a + mu * (drift[:, None] * Q_a + Q_a * drift[None, :])
    # E2 C 1 q^T and its transpose
    v = e2_diag * (C @ np.ones_like(q_a))
    A -= mu * (np.outer(v, q_a) + np.outer(q_a, v))
    # diag(q) Gamma C and its transpose
    B = (q_a[:, None] * Gamma) @ C
    A -= mu * (B + B.T)
    return 0.5 * (A + A.T)


def egu_moment_step(q_a, Q_a, gamma, Gamma, mu):
    """One step of the EGU mean / second-moment recursion."""
    q_a, Q_a, gamma, Gamma = _check_dims(q_a, Q_a, gamma, Gamma)
    q_next = _mean_rhs(q_a, Q_a, gamma, Gamma, mu)
    Q_next = _second_moment_rhs(q_a, Q_a, gamma, Gamma, mu)
    return q_next, Q_next


def eg_mean_step(q_a, Q_a, gamma, Gamma, u, mu):
    """One step of the EG mean recursion (quotient-of-expectations form)."""
    q_a, Q_a, gamma, Gamma = _check_dims(q_a, Q_a, gamma, Gamma)
    numerator = _mean_rhs(q_a, Q_a, gamma, Gamma, mu)
    denominator = (1.0 + mu * gamma) @ q_a - mu * np.trace(Q_a @ Gamma)
    if abs(denominator) < _DENOM_FLOOR:
        raise DegenerateMomentError("quotient approximation degenerate")
    return u * numerator / denominator


def eg_second_moment_step(q_a, Q_a, gamma, Gamma, u, mu):
    """One step of the EG second-moment recursion: ``u^2 * A / b``.

    ``A`` is the EGU second-moment right-hand side and ``b`` the scalar
    normalizer, written entirely in augmented-space moments.
    """
    q_a, Q_a, gamma, Gamma = _check_dims(q_a, Q_a, gamma, Gamma)
    A = _second_moment_rhs(q_a, Q_a, gamma, Gamma, mu)
    ones = np.ones_like(q_a)
    C = Q_a - np.outer(q_a, q_a)
    e2_diag = np.diagonal(Gamma)
    Gq = Gamma @ q_a
    Q1 = Q_a @ ones
    b = float(ones @ Q1)
    b += mu * float(gamma @ Q1)
    b -= mu * float(Gq @ Q1)
    b -= mu * float(ones @ (C @ Gq))
    b -= mu * float((e2_diag * (C @ ones)) @ ones) * float(ones @ q_a)
    b += mu * float(Q1 @ gamma)
    b -= mu * float(Q1 @ Gq)
    b -= mu * float(Gq @ (C @ ones))
    b -= mu * float(ones @ q_a) * float(ones @ (e2_diag * (C @ ones)))
    if abs(b) < _DENOM_FLOOR:
        raise DegenerateMomentError("quotient approximation degenerate")
    Q_next = (u * u) * A / b
    return 0.5 * (Q_next + Q_next.T)


def mse_evolution(q_a, Q_a, gamma, Gamma, d) -> float:
    """Predicted MSE from the weight moments: ``d - 2 q.gamma + tr(Q Gamma)``."""
    q_a = np.asarray(q_a, dtype=float)
    Q_a = np.asarray(Q_a, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    Gamma = np.asarray(Gamma, dtype=float)
    return float(d - 2.0 * (q_a @ gamma) + np.einsum("ij,ji->", Q_a, Gamma))


def optimum_weights(R, p) -> OptimumSolution:
    """Stable solve of ``R w0 = p`` with a condition-number guard."""
    R = np.asarray(R, dtype=float)
    p = np.asarray(p, dtype=float)
    if R.ndim != 2 or R.shape[0] != R.shape[1] or p.shape != (R.shape[0],):
        raise ValueError("R must be square and p of matching length")
    cond = float(np.linalg.cond(R))
    if not np.isfinite(cond) or cond > _COND_LIMIT:
        raise IllConditionedError(
            f"matrix condition number {cond:.3e} exceeds {_COND_LIMIT:.0e}"
        )
    w0 = np.linalg.solve(R, p)
    return OptimumSolution(R=R, p=p, w0=w0, cond=cond)


def convergence_condition(q_a, Gamma_base, mu) -> float:
    """Spectral radius of ``I - mu * diag(s) * Gamma_base``.

    ``Gamma_base`` is the base-space regressor second moment and ``s`` the
    per-coordinate sum of the two augmented halves taken from ``q_a``.
    A value below one predicts convergence of the mean weights.
    """
    q_a = np.asarray(q_a, dtype=float)
    Gamma_base = np.asarray(Gamma_base, dtype=float)
    k = Gamma_base.shape[0]
    if Gamma_base.shape != (k, k) or q_a.shape != (2 * k,):
        raise ValueError("q_a must be the augmented mean matching Gamma_base")
    s = q_a[:k] + q_a[k:]
    M = np.eye(k) - mu * (s[:, None] * Gamma_base)
    return float(np.max(np.abs(np.linalg.eigvals(M))))


def _check_dims(q_a, Q_a, gamma, Gamma):
    q_a = np.asarray(q_a, dtype=float)
    Q_a = np.asarray(Q_a, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    Gamma = np.asarray(Gamma, dtype=float)
    k = q_a.shape[0]
    if q_a.shape != (k,) or gamma.shape != (k,):
        raise ValueError("q_a and gamma must be vectors of equal length")
    if Q_a.shape != (k, k) or Gamma.shape != (k, k):
        raise ValueError("Q_a and Gamma must be k x k matrices")
    return q_a, Q_a, gamma, Gamma
