"""Structured errors shared across the package.

Every error carries a short machine-readable code plus keyword details so the
CLI can print a single-line diagnostic and map the failure to an exit code.
"""


class DwglError(Exception):
    """Base class; renders as ``code: message (key=value, ...)`` on one line."""

    code = "error"

    def __init__(self, message, **details):
        super().__init__(message)
        self.message = message
        self.details = details

    def __str__(self):
        if not self.details:
            return f"{self.code}: {self.message}"
        kv = ", ".join(f"{k}={v}" for k, v in sorted(self.details.items()))
        return f"{self.code}: {self.message} ({kv})"


class ShapeError(DwglError):
    """Tensor shapes incompatible with an operation."""

    code = "shape-error"


class TapeError(DwglError):
    """Misuse of the autodiff tape (e.g. backward called twice)."""

    code = "tape-error"


class GraphError(DwglError):
    """Invalid network topology or failed shape validation."""

    code = "graph-error"


class MaskError(DwglError):
    """Prune vote/mask referencing indices that do not exist."""

    code = "mask-error"


class FormatError(DwglError):
    """Malformed binary container or dataset file; carries a byte offset."""

    code = "format-error"


class ConfigError(DwglError):
    """Bad configuration key, value, or file."""

    code = "config-error"


class TrainingDiverged(DwglError):
    """Loss or parameters became non-finite during training."""

    code = "training-diverged"
