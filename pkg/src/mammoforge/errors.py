"""Exception hierarchy shared by all pipeline stages."""


class MammoforgeError(Exception):
    """Base class for all pipeline errors."""


class ValidationError(MammoforgeError):
    """Input violates a documented contract (bad geometry, labels, config)."""


class FormatError(MammoforgeError):
    """A file does not conform to its on-disk format.

    ``offset`` is the byte offset of the offending field where known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class GeometryError(MammoforgeError):
    """Volume geometry is inconsistent (spacing, orientation, grids)."""


class StateError(MammoforgeError):
    """An operation was requested in the wrong case/stage state."""


class InsufficientOverlapError(MammoforgeError):
    """Too few overlapping samples to evaluate an image similarity metric."""

    def __init__(self, message: str, level: int | None = None):
        if level is not None:
            message = f"{message} (pyramid level {level})"
        super().__init__(message)
        self.level = level


class BackendError(MammoforgeError):
    """A segmentation backend process failed (nonzero exit, timeout).

    ``workdir`` points at the retained exchange directory for debugging.
    """

    def __init__(self, message: str, workdir: str | None = None,
                 diagnostics: str = ""):
        super().__init__(message)
        self.workdir = workdir
        self.diagnostics = diagnostics


class ProtocolViolationError(BackendError):
    """A backend produced output that violates the exchange protocol."""
