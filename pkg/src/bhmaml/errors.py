"""Exception hierarchy shared across the package."""


class BhmamlError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(BhmamlError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ContractError(BhmamlError, ValueError):
    """An operation precondition was violated (non-shape)."""


class CapacityError(BhmamlError, ValueError):
    """A dataset or split cannot supply the requested episode shape."""


class FormatError(BhmamlError, ValueError):
    """A file on disk does not match its documented format."""


class NumericalError(BhmamlError, ArithmeticError):
    """A computation produced non-finite values."""


class ConfigError(BhmamlError, ValueError):
    """A run configuration is inconsistent with the checkpoint or data."""
