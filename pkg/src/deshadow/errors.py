"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible or unsupported shapes."""


class FormatError(ValueError):
    """Image file is decodable but not 8-bit 3-channel RGB."""


class DomainError(ValueError):
    """A numeric argument is outside its allowed domain."""


class ConfigError(ValueError):
    """Invalid configuration key, value, or variant tag."""


class NumericError(RuntimeError):
    """A non-finite value was produced where a finite one is required.

    Carries enough context (step, term) to locate the failure in a run.
    """

    def __init__(self, message: str, step: int | None = None, term: str | None = None):
        super().__init__(message)
        self.step = step
        self.term = term


class SampleError(RuntimeError):
    """A dataset sample could not be loaded; names the offending file."""
