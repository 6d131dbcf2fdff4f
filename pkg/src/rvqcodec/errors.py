"""Exception hierarchy shared across the package.

Each class maps onto one CLI exit code (see cli.EXIT_CODES): configuration
problems, file/format problems, wire-protocol problems, and codebook
desynchronization are reported distinctly so callers can act on them.
"""


class ConfigError(ValueError):
    """Invalid configuration or dimension mismatch between components."""


class StateError(RuntimeError):
    """Operation not permitted in the current state (e.g. mutating a frozen model)."""


class FormatError(IOError):
    """Malformed or truncated file (tensor, bundle, manifest)."""


class PayloadError(ValueError):
    """Malformed wire payload: bad magic, bad version, or corrupt content."""


class TruncationError(PayloadError):
    """Payload shorter than its header-declared size."""


class CorruptPayloadError(PayloadError):
    """Payload content inconsistent with its header (e.g. index out of range)."""


class CodebookDesyncError(PayloadError):
    """Payload was encoded against a different codebook than the local one."""


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss or unusable corpus)."""
