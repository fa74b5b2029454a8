"""Exception hierarchy shared across the package."""


class GestError(Exception):
    """Base class for all gestdtr errors."""


class SpecificationError(GestError):
    """A model term does not resolve against the available history."""


class DimensionError(GestError):
    """Mismatched array lengths or shapes."""


class DomainError(GestError):
    """Input values outside the mathematical domain of an operation."""


class SingularityError(GestError):
    """A design or normal-equation matrix is rank deficient."""


class IdentifiabilityError(GestError):
    """The blip parameters are not identified from the data."""


class SeparationError(GestError):
    """Perfect or quasi-perfect separation in a logistic treatment model."""


class DivergenceError(GestError):
    """The IRLS linear predictor overflowed the double-precision exp range."""


class StateError(GestError):
    """Operation requested on a fit in an invalid state (e.g. not converged)."""


class CalibrationError(GestError):
    """Intercept calibration failed to bracket the target zero probability."""


class SelectionError(GestError):
    """Model selection could not produce a result (e.g. all candidates failed)."""


class AggregationError(GestError):
    """Replication reports are structurally incompatible."""
