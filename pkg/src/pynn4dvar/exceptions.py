"""
Custom exception hierarchy for PyNN4DVar.

These exceptions separate the three ways a run can fail (bad configuration,
bad data, numerical trouble) so that the command-line front end can map
each of them to its own exit code.
"""


class NN4DVarError(Exception):
    """Base exception for all PyNN4DVar errors."""
    pass


class ConfigError(NN4DVarError):
    """
    Raised when a run configuration does not validate.

    This indicates:
    - Unknown keys in the configuration file
    - Missing required keys or values of the wrong type
    - Values outside their allowed range (e.g. more spin-up cycles than cycles)
    """
    def __init__(self, message: str, key_path: str = ""):
        super().__init__(f"{key_path}: {message}" if key_path else message)
        self.key_path = key_path


class DataError(NN4DVarError):
    """
    Raised when input data is missing, corrupt or inconsistent.

    This indicates:
    - A required upstream artifact does not exist
    - A file cannot be parsed
    - Arrays whose content contradicts their metadata
    """
    def __init__(self, message: str, path: str | None = None):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class ShapeError(DataError, ValueError):
    """
    Raised when an operator receives arrays of the wrong shape.

    This indicates:
    - A state whose grid does not match the model configuration
    - A weight vector whose length does not match the network
    - A tape and an increment stream of different lengths
    """
    pass


class WindowError(DataError, ValueError):
    """
    Raised when times do not line up.

    This indicates:
    - An integration length that is not a whole number of model steps
    - Observation batches that do not match the assimilation window
    - A truth trajectory that does not cover the requested cycles
    """
    pass


class SerializationError(DataError):
    """
    Raised when serialization/deserialization fails.

    This indicates:
    - Truncated or oversized checkpoint payloads
    - Malformed container headers or text tables
    - Unsupported dtypes
    """
    pass


class NumericalError(NN4DVarError):
    """Base exception for numerical failures."""
    pass


class InversionError(NumericalError):
    """Raised when the potential-vorticity inversion produces non-finite values."""
    pass


class DivergenceError(NumericalError):
    """
    Raised when a model integration or a DA cycle blows up.

    The cycle index (or model step) where it happened is kept in `stamp`.
    """
    def __init__(self, message: str, stamp: int | None = None):
        super().__init__(message if stamp is None else f"{message} (at {stamp})")
        self.stamp = stamp


class TrainingError(NumericalError):
    """Raised when the training loss becomes non-finite."""
    pass
