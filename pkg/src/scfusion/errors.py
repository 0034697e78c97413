"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand dimensions are incompatible."""


class ParameterError(ValueError):
    """A scalar or structural argument is outside its valid range."""


class NumericError(ArithmeticError):
    """A computation produced NaN or Inf from finite inputs."""


class ConfigError(ValueError):
    """An experiment configuration is malformed."""
