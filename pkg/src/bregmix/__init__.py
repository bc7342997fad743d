"""Adaptive mixtures of LMS filters trained with multiplicative updates.

A bank of LMS filters runs in parallel on a common synthetic signal; a
second-stage combiner (EGU, EG, or plain LMS, affine-constrained or
unconstrained) blends their outputs.  Deterministic moment recursions
predict the transient behaviour of the combiner weights and of the MSE,
and a Monte Carlo harness checks those predictions against ensembles.
"""

__version__ = "0.1.0"

from .exceptions import (
    BregmixError,
    ConfigError,
    DegenerateMomentError,
    DivergenceError,
    EnsembleDivergedError,
    IllConditionedError,
)

__all__ = [
    "BregmixError",
    "ConfigError",
    "DegenerateMomentError",
    "DivergenceError",
    "EnsembleDivergedError",
    "IllConditionedError",
    "__version__",
]
