"""Exception types shared across the package.

Every failure mode the library promises to detect raises one of these, with a
message naming the offending quantity (dimension, key, layer, ...). Nothing in
the package raises bare asserts for user-facing errors.
"""


class QanaError(Exception):
    """Base class for all package errors."""


class ShapeError(QanaError, ValueError):
    """An array had the wrong rank, an incompatible dimension, or was empty."""


class ConfigError(QanaError, ValueError):
    """A configuration value or key is invalid."""


class DataError(QanaError, ValueError):
    """A dataset, image file, or label table is malformed."""


class ConversionError(QanaError, ValueError):
    """The CNN-to-SNN converter met a layer or state it cannot map."""


class ModelFileError(QanaError, IOError):
    """A model container is corrupt, truncated, or has an unsupported version."""


class SnnFileError(QanaError, IOError):
    """A spiking-network spec file is corrupt, truncated, or unsupported."""


class TrainingError(QanaError, RuntimeError):
    """Training diverged or was asked to run on unusable inputs."""


class SimulationError(QanaError, RuntimeError):
    """The spiking simulator hit an inconsistent train or an overflow."""
