"""Exception types raised across the package."""


class VaeLabError(Exception):
    """Base class for all package errors."""


class DimensionError(VaeLabError, ValueError):
    pass


class DomainError(VaeLabError, ValueError):
    pass


class ConfigError(VaeLabError, ValueError):
    pass


class FormatError(VaeLabError, ValueError):
    """Malformed on-disk data (model binaries, IDX files)."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(VaeLabError, RuntimeError):
    """A non-finite gradient reached the optimizer."""

    def __init__(self, message, block=None):
        super().__init__(message)
        self.block = block


class DivergenceError(VaeLabError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, last_good_epoch):
        super().__init__(f"{message}; last good epoch: {last_good_epoch}")
        self.last_good_epoch = last_good_epoch


class GenerationError(VaeLabError, RuntimeError):
    pass


class PreconditionError(VaeLabError, ValueError):
    pass
