"""Exception hierarchy.

Numerical failures (exit code 3 on the command line) derive from
:class:`NumericalFailure`; configuration problems (exit code 2) raise
:class:`ConfigError`.
"""


class TokenDynError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(TokenDynError, ValueError):
    """Invalid or inconsistent experiment configuration."""


class NumericalFailure(TokenDynError, ArithmeticError):
    """A numerical routine could not produce a trustworthy result.

    ``trial`` and ``layer`` are filled in by whoever knows them so that the
    failing integration step can be reported.
    """

    def __init__(self, message: str = "", *, trial: int | None = None, layer: int | None = None):
        super().__init__(message)
        self.message = message
        self.trial = trial
        self.layer = layer

    def __str__(self) -> str:
        where = []
        if self.trial is not None:
            where.append(f"trial {self.trial}")
        if self.layer is not None:
            where.append(f"layer {self.layer}")
        if where:
            return f"{self.message} ({', '.join(where)})"
        return self.message


class DegenerateVector(NumericalFailure):
    """A vector to be normalized is (numerically) zero."""


class QuadratureUnstable(NumericalFailure):
    pass


class MissingDerivative(TokenDynError, ValueError):
    """The activation has no registered derivative."""


class NotDissipative(NumericalFailure):
    """The dissipation condition ``lambda_bar < 0`` does not hold."""


class NonPositiveF(NumericalFailure):
    pass


class GramNotPSD(NumericalFailure):
    pass


class DegenerateCovariance(NumericalFailure):
    pass


class PointMismatch(TokenDynError, ValueError):
    pass


class OutOfDomain(NumericalFailure):
    """An ambient Euler position left the ball ``B(0, 3)``."""


class WindowCollapse(NumericalFailure):
    pass


class NonPositiveEnergy(NumericalFailure):
    pass


class SizeMismatch(TokenDynError, ValueError):
    pass
