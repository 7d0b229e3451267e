"""Exception types shared across the package."""


class TTPLabError(Exception):
    """Base class for all package errors."""


class ConfigurationError(TTPLabError, ValueError):
    """Invalid scenario, model or run configuration."""


class DomainError(TTPLabError, ValueError):
    """An event (r, t) lies outside the scenario domain."""


class InvalidSampleError(TTPLabError, ValueError):
    pass


class SingularityError(TTPLabError, ArithmeticError):
    pass


class PositivityError(TTPLabError, ArithmeticError):
    """Kinetic pressure p1 is not strictly positive."""


class SolverError(TTPLabError, RuntimeError):
    pass


class StepRejected(TTPLabError, ArithmeticError):
    """Raised when a time step loses positivity; the caller should retry with a smaller step."""


class DegenerateGradientError(TTPLabError, ArithmeticError):
    """The direction b of grad(p1_hat) is undefined at the requested event."""


class InvalidInitialCondition(TTPLabError, ValueError):
    pass


class NumericalCheckError(TTPLabError, ArithmeticError):
    pass


class InsufficientSamplesError(TTPLabError, ValueError):
    pass


class EstimationError(TTPLabError, ValueError):
    pass
