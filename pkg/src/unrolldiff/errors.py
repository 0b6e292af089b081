"""Exception types shared across the package."""


class UnrolldiffError(Exception):
    """Base class for package-specific errors."""


class DimensionMismatch(UnrolldiffError):
    """Two components disagree on a dimension."""

    def __init__(self, first: str, second: str, detail: str = ""):
        msg = f"{first} is incompatible with {second}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.first = first
        self.second = second


class NonPositiveUnroll(UnrolldiffError):
    """Unroll length T is negative."""


class NonFiniteGradient(UnrolldiffError):
    """An inner gradient came back with NaN or Inf entries."""


class NonFiniteState(UnrolldiffError):
    """An unroll step produced a NaN/Inf state."""

    def __init__(self, step: int):
        super().__init__(f"non-finite inner state after step t={step}")
        self.step = step


class TrajectoryMismatch(UnrolldiffError):
    """A stored trajectory does not replay under the given problem."""

    def __init__(self, step: int):
        super().__init__(
            f"trajectory replay check failed at step t={step}; the trajectory "
            "was not produced by this problem at this hyperparameter value"
        )
        self.step = step


class BoundaryTooClose(UnrolldiffError):
    """A finite-difference probe would leave the feasible box."""

    def __init__(self, coordinate: str):
        super().__init__(
            f"hyperparameter coordinate {coordinate} is too close to its bound "
            "for a central finite-difference probe"
        )
        self.coordinate = coordinate


class NotPositiveDefinite(UnrolldiffError):
    """A matrix that must be symmetric positive definite is not."""


class NonContractive(UnrolldiffError):
    """The inner step size is too large for the unroll to contract."""


class DivergenceDetected(UnrolldiffError):
    """The outer objective has been blowing up for many consecutive steps."""

    def __init__(self, step: int, f_value: float):
        super().__init__(
            f"outer objective diverging: f={f_value:.6g} at outer step {step}"
        )
        self.step = step
        self.f_value = f_value


class BatchTooLarge(UnrolldiffError):
    """Requested meta-batch exceeds the number of available episodes."""


class BadParams(UnrolldiffError):
    """Invalid parameters passed to a synthetic data generator."""


class EmptyTrainingSet(UnrolldiffError):
    """A problem was built with no training examples."""


class WeightSegmentMismatch(UnrolldiffError):
    """Per-example weight segment length differs from the training set size."""


class InconsistentFeatureDim(UnrolldiffError):
    """Episodes in a meta-dataset disagree on the input dimension."""


class ConfigError(UnrolldiffError):
    """A run configuration failed to parse or validate."""

    def __init__(self, field: str, detail: str):
        super().__init__(f"config error at {field}: {detail}")
        self.field = field


class SingularData(UserWarning):
    """Training design matrix has a zero column; regularization still applies."""
