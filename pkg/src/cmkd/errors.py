"""Exception hierarchy shared across the package."""


class CMKDError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(CMKDError, ValueError):
    """Shapes are incompatible for the requested operation."""


class DomainError(CMKDError, ValueError):
    """An input lies outside the mathematical domain of an operation."""


class ParameterError(CMKDError, ValueError):
    """A scalar hyperparameter (temperature, severity, epsilon...) is invalid."""


class ContractError(CMKDError, ValueError):
    """A precondition on the call itself is violated (empty input, non-scalar loss...)."""


class DegenerateInputError(CMKDError, ValueError):
    """Zero-variance input where a correlation or normalization needs spread.

    ``index`` identifies the offending sample (row) when known.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class FormatError(CMKDError, ValueError):
    """A binary file (IDX, CIFAR, checkpoint) does not match its declared layout."""


class SpecError(CMKDError, ValueError):
    """A model specification is invalid."""


class ConfigError(CMKDError, ValueError):
    """A run configuration is invalid. ``path`` names the offending field."""

    def __init__(self, message, path=None):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
