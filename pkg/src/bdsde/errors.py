"""Exception types shared across the solver suite."""


class BdsdeError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(BdsdeError, ValueError):
    """An argument violates a documented precondition."""


class UnsupportedBackendError(BdsdeError):
    """The requested backend cannot handle this problem (e.g. tree with d > 1)."""


class StepSizeError(BdsdeError):
    """The time step is too large for the scheme to be stable/contracting."""

    def __init__(self, message, suggested_dt=None):
        super().__init__(message)
        self.suggested_dt = suggested_dt


class ConvergenceError(BdsdeError):
    """An inner fixed-point iteration failed to reach tolerance."""


class RegressionError(BdsdeError):
    """Least-squares projection failed (ill-conditioned normal equations)."""

    def __init__(self, message, condition_number=None):
        super().__init__(message)
        self.condition_number = condition_number


class ResolutionError(BdsdeError):
    """Spatial lattice too coarse for the requested interpolation tolerance."""


class RangeError(BdsdeError):
    """Query point lies outside the tabulated lattice range."""


class SingularFlowError(BdsdeError):
    """The flow's y-derivative dropped below the invertibility threshold."""


class ConsistencyError(BdsdeError):
    """An internal consistency check failed (scheme bug signal)."""


class VerificationError(BdsdeError):
    """A supplied candidate solution failed verification."""


class InvalidBarrierError(BdsdeError):
    """Barrier incompatible with the terminal condition (S_T > xi somewhere)."""


class StabilityError(BdsdeError):
    """Explicit finite-difference step violates the stability bound."""

    def __init__(self, message, suggested_dt=None):
        super().__init__(message)
        self.suggested_dt = suggested_dt


class UnsupportedOracleError(BdsdeError):
    """No closed-form oracle covers the requested data (fall back to FD)."""


class ConfigError(BdsdeError):
    """Experiment configuration is malformed or inconsistent."""
