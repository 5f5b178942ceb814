"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Raised when operand or input shapes are incompatible."""


class ContractError(RuntimeError):
    """Raised when an operation is invoked outside its contract."""


class ConfigError(ValueError):
    """Invalid kernel, model, augmentation or run configuration."""


class DataError(ValueError):
    """Input data violates an ordering or length requirement."""


class IngestError(DataError):
    """A CSV cell or row could not be parsed."""
