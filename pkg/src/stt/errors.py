"""Exception family shared across the package."""


class SttError(Exception):
    """Base class; the CLI maps these to exit code 1."""


class ShapeError(SttError):
    """Operand shapes invalid for an op; message names the op and shapes."""


class GraphError(SttError):
    """Computation-graph contract violation (e.g. backward from a non-scalar)."""


class DegenerateInputError(SttError):
    """Numerically degenerate input, e.g. normalizing a (near-)zero vector."""


class FormatError(SttError):
    """Malformed binary or text input file; message carries the byte offset."""


class ConfigError(SttError):
    """Invalid or unknown configuration field."""


class CheckpointError(SttError):
    """Unreadable, truncated, or version-mismatched checkpoint."""


class TrainingError(SttError):
    """Training aborted (e.g. non-finite gradients)."""
