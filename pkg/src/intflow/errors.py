"""Exception hierarchy shared across the package.

Every error that a command-line user can trigger maps onto one of the exit
codes in `intflow.cli`: config problems exit 2, stream/data corruption exits 3,
training divergence exits 4.
"""


class IntflowError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(IntflowError):
    """Shape, divisibility, or channel-count mismatch."""


class ParameterError(IntflowError):
    """Invalid scalar argument (temperature, scale, precision...)."""


class DomainError(IntflowError):
    """Value outside the supported lattice/alphabet/support."""


class CapacityError(IntflowError):
    """Alphabet too large for the requested coder precision."""


class BijectionError(IntflowError):
    """A map that must be bijective collided or failed to invert."""


class UsageError(IntflowError):
    """API misuse (e.g. asking for gradients of an unused parameter)."""


class ConfigError(IntflowError):
    """Malformed or inconsistent run configuration."""


class StreamFormatError(IntflowError):
    """Compressed stream or container header is malformed."""


class StreamCorruptionError(IntflowError):
    """Checksum/hash mismatch or truncated stream."""


class TrainingError(IntflowError):
    """Non-finite gradients or other fatal optimizer conditions."""


class TrainingDivergence(TrainingError):
    """Loss stayed above the divergence threshold for too long."""
