"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands or arguments with incompatible shapes."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class NumericError(ArithmeticError):
    """Non-finite value where a finite one is required."""


class OptimizationError(RuntimeError):
    """Optimizer step aborted, e.g. on non-finite gradients."""


class FormatError(ValueError):
    """Unrecognized magic bytes, version, or field in a serialized artifact."""


class DimensionError(ValueError):
    """Serialized payload carries unexpected dimensions."""


class CorruptionError(ValueError):
    """Serialized payload is truncated or internally inconsistent."""
