"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not fit together."""


class DomainError(ValueError):
    """Input lies outside the domain of a function (e.g. zero-norm vector)."""


class ArgumentError(ValueError):
    """Invalid argument value (index out of range, unknown name, ...)."""


class StateError(RuntimeError):
    """Operation not allowed in the current object state."""


class ConfigurationError(ValueError):
    """Invalid or inconsistent configuration."""


class FormatError(ValueError):
    """Corrupt or unreadable serialized file."""


class VersionError(FormatError):
    """Serialized file carries an unsupported format version."""
