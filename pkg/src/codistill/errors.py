"""Exception types shared across the package."""


class CodistillError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(CodistillError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(CodistillError, ValueError):
    """A precondition of an operation was violated."""


class RegistryError(CodistillError, ValueError):
    """Invalid dataset registry, or a dataset id that is not registered."""


class CompositionError(CodistillError, ValueError):
    """A batch cannot be composed from the registry."""


class ConfigError(CodistillError, ValueError):
    """A run configuration file is malformed or fails validation."""


class MissingFeatureError(CodistillError, KeyError):
    """A feature-file teacher has no record for a requested image."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "missing feature"


class DegenerateInputError(CodistillError, ValueError):
    """An analysis is undefined for the given input (e.g. zero variance)."""


class FormatError(CodistillError, ValueError):
    """A binary container or image file could not be parsed."""
