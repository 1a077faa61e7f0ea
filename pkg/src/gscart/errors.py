"""Exception types shared across modules; the CLI maps them to exit codes."""


class ConfigError(ValueError):
    """Invalid or unknown configuration (exit code 2)."""


class NumericalError(RuntimeError):
    """Non-finite loss or sampler state (exit code 4)."""


class CompatibilityError(ValueError):
    """Shape or schedule mismatch between artifacts (exit code 5)."""


class ScheduleMismatchError(CompatibilityError):
    pass


class ShapeMismatchError(CompatibilityError):
    pass


class ModelFormatError(OSError):
    """Corrupt or truncated model file (treated as an I/O failure)."""
