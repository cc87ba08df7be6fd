"""Exception types shared across the package."""


class FedleakError(Exception):
    """Base class for all package errors."""


class ShapeError(FedleakError):
    """Tensor or layer dimensions are incompatible."""


class ContractError(FedleakError):
    """An argument violates a documented precondition."""


class NumericError(FedleakError):
    """A computation produced NaN/inf where finite values are required."""


class ParseError(FedleakError):
    """A data file could not be parsed."""


class PreprocessError(FedleakError):
    """Raw data cannot be turned into a usable dataset."""


class EstimationError(FedleakError):
    """The MI estimator failed irrecoverably (e.g. persistent NaN)."""


class AttackError(FedleakError):
    """Every restart of the inversion attack aborted."""


class RunError(FedleakError):
    """A simulation or experiment run failed (e.g. divergence)."""


class ConfigError(FedleakError):
    """An experiment configuration is invalid."""
