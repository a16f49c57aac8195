"""Exception types shared across the toolkit."""


class CookieKitError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(CookieKitError):
    """Tensor shapes are incompatible for the requested operation."""


class ContractError(CookieKitError):
    """An operation precondition was violated."""


class ConfigError(CookieKitError):
    """A configuration value is missing, malformed, or inconsistent."""


class DataError(CookieKitError):
    """Input data violates the corpus or vocabulary contract."""


class CheckpointError(CookieKitError):
    """A checkpoint file is corrupt, truncated, or version-mismatched."""


class TrainingError(CookieKitError):
    """Training hit a non-recoverable numeric condition."""


class BenchmarkError(CookieKitError):
    """A benchmark run cannot be completed as requested."""
