"""Exception types shared across the package."""


class IcstError(Exception):
    """Base class for all package errors."""


class ContractError(IcstError, ValueError):
    """An operation was called with arguments violating its contract."""


class RangeError(IcstError, IndexError):
    """An index (road, timestep, block) is outside its valid range."""


class ParseError(IcstError, ValueError):
    """A file could not be parsed; message carries the offending line."""


class FormatError(IcstError, ValueError):
    """A file has the wrong overall shape (ragged rows, bad header)."""


class DataError(IcstError, ValueError):
    """Ingested data is unusable (e.g. a column with no observations)."""


class ConfigError(IcstError, ValueError):
    """A configuration value is invalid or inconsistent."""


class NormalizationError(IcstError, ValueError):
    """Normalization is impossible (zero variance training split)."""


class GenerationError(IcstError, ValueError):
    """Synthetic data generation produced a degenerate series."""


class TrainingError(IcstError, RuntimeError):
    """Training failed (NaN gradients, diverging loss)."""


class CheckpointError(IcstError, RuntimeError):
    """A checkpoint could not be read or does not match the model."""
