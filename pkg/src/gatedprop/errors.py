"""Exception types shared across the package."""


class GatedPropError(Exception):
    """Base class for all package errors."""


class DimensionError(GatedPropError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(GatedPropError, ValueError):
    """A configuration value is invalid (bad kernel size, unknown key, ...)."""


class IdentityError(GatedPropError, ValueError):
    """A mask refers to an object slot outside the identity bank."""


class ContractError(GatedPropError, RuntimeError):
    """A call violated an API precondition (empty memory, non-scalar loss, ...)."""
