"""Exception types shared across the package."""

from .nn.functional import ShapeError


class FormatError(ValueError):
    """Malformed or unsupported file/sample format."""


class InputError(ValueError):
    """Input data does not satisfy an operation's preconditions."""


class ConfigError(ValueError):
    """Invalid configuration value or geometry."""


class SpecError(ValueError):
    """Invalid simulator scene description."""


__all__ = ["ConfigError", "FormatError", "InputError", "ShapeError", "SpecError"]
