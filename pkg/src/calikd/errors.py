"""Exception hierarchy shared across the package."""


class CalikdError(Exception):
    """Base class for every error raised by calikd."""


class ShapeError(CalikdError, ValueError):
    pass


class DomainError(CalikdError, ValueError):
    """An argument lies outside the domain of the operation (e.g. T <= 0)."""


class ValidationError(CalikdError, ValueError):
    pass


class ConfigurationError(CalikdError, ValueError):
    pass


class FormatError(CalikdError, ValueError):
    """A file or byte payload does not follow its declared layout."""


class TruncationError(FormatError):
    """Declared payload size disagrees with the bytes actually present."""


class DivergedTrainingError(CalikdError, RuntimeError):
    def __init__(self, epoch, loss):
        super().__init__(f"training diverged at epoch {epoch}: loss={loss!r}")
        self.epoch = epoch
        self.loss = loss
