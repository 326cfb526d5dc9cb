"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or parameter set."""


class NoSyncError(RuntimeError):
    """No three consistent chirp cycles could be located in a recording."""


class ScanQualityError(RuntimeError):
    """A vertical scan failed the motion-quality gates.

    The offending :class:`~soilecho.pipeline.ScanQuality` is kept on
    ``quality`` so callers can report the verdict.
    """

    def __init__(self, quality, message=None):
        self.quality = quality
        super().__init__(message or f"scan rejected: {quality.verdict}")


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""

    def __init__(self, epoch, loss):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")


class InsufficientDataError(ValueError):
    """Too few chirps or bins to build a fixed-size image."""
