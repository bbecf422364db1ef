"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigurationError(ValueError):
    """A configuration value (or a combination of values) is invalid."""


class EmptyMemoryError(ValueError):
    """Attention was asked to read from an empty memory."""


class UsageError(ValueError):
    """An API contract was violated by the caller."""


class GenerationError(RuntimeError):
    """Scenario generation failed after the configured retry budget."""


class UnsolvableError(RuntimeError):
    """No collision-free plan exists for the given scenario."""


class PrivilegeError(ValueError):
    """A privileged view was passed to a consumer restricted to public views."""
