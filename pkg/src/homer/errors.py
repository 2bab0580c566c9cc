"""Exception types shared across the package."""


class HomerError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(HomerError):
    """Invalid model or run configuration."""


class LoadError(HomerError):
    """A weight or cache file could not be parsed."""


class ContractViolation(HomerError):
    """An operation was called with arguments violating its preconditions,
    or an internal invariant was found broken."""
