"""Exception types shared across the package."""


class BregmixError(Exception):
    """Base class for all package-specific errors."""


class DivergenceError(BregmixError):
    """An adaptive update produced non-finite values (step size too large)."""


class ConfigError(BregmixError):
    """Invalid experiment configuration.

    ``errors`` is a list of ``(field_path, message)`` pairs so callers can
    report every violation at once.
    """

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [("", errors)]
        self.errors = list(errors)
        super().__init__("; ".join(
            f"{path}: {msg}" if path else msg for path, msg in self.errors
        ))


class EnsembleDivergedError(BregmixError):
    """More than 10% of Monte Carlo runs diverged."""

    def __init__(self, diverged: int, total: int):
        self.diverged = diverged
        self.total = total
        super().__init__(
            f"{diverged} of {total} runs diverged (limit is 10%)"
        )


class DegenerateMomentError(BregmixError):
    """A normalized moment recursion hit a near-zero denominator."""

    def __init__(self, message: str, t: int | None = None):
        self.t = t
        if t is not None:
            message = f"{message} at t={t}"
        super().__init__(message)


class IllConditionedError(BregmixError):
    """A linear solve was refused because the matrix is ill-conditioned."""
