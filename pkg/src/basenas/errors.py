"""Exception types shared across the package."""


class BaseNasError(Exception):
    """Root of all package errors."""


class ShapeError(BaseNasError, ValueError):
    def __init__(self, op, expected, actual):
        self.op = op
        self.expected = expected
        self.actual = actual
        super().__init__(f"{op}: expected shape {expected}, got {actual}")


class NumericFault(BaseNasError, FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""


class GraphError(BaseNasError, RuntimeError):
    pass


class ConfigError(BaseNasError, ValueError):
    pass


class DerivationError(BaseNasError, ValueError):
    pass


class FormatError(BaseNasError, ValueError):
    """Base class for on-disk format problems."""


class CorruptHeader(FormatError):
    pass


class VersionMismatch(FormatError):
    pass


class TruncatedFile(FormatError):
    def __init__(self, what, expected, actual):
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what}: truncated, expected {expected} bytes, got {actual}")


class ManifestMismatch(FormatError):
    pass


class AdaptationFault(BaseNasError):
    """Numeric fault inside an inner loop; carries the step and loss trace."""

    def __init__(self, step, losses, cause):
        self.step = step
        self.losses = list(losses)
        super().__init__(f"numeric fault at inner step {step}: {cause}")
