"""Exception types shared across the package."""


class ParseError(ValueError):
    """A text input could not be parsed. Carries the offending line number."""

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class EmptyDatasetError(ValueError):
    """No events survived ingestion or filtering."""


class ContractViolation(ValueError):
    """A caller broke a documented precondition (bad sample, missing target)."""


class NumericError(FloatingPointError):
    """A non-finite value appeared where finite math was required."""
