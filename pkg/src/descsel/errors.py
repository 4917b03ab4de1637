"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """An operation received inputs that violate its pre-conditions."""


class ContractViolationError(RuntimeError):
    """An API was used out of order (e.g. optimizer step before backward)."""


class DataFormatError(ValueError):
    """A file or directory does not match the documented on-disk format."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss; carries a diagnostic dump."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
