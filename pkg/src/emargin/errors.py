"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: data problems exit 1, configuration
problems exit 2, numeric failures exit 3.
"""


class EMarginError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(EMarginError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(EMarginError, ValueError):
    """An argument lies outside the domain an operation is defined on."""


class ContractError(EMarginError, ValueError):
    """A caller violated an API precondition."""


class DataError(EMarginError):
    """Input data could not be read or is unusable."""


class SchemaError(DataError):
    """A CSV file lacks a declared column."""


class ParseError(DataError):
    """A CSV cell could not be parsed as a number."""


class FormatError(DataError):
    """A binary file has the wrong magic, version or length."""


class ConfigError(EMarginError):
    """A run configuration is invalid."""


class NumericError(EMarginError, FloatingPointError):
    """A loss or gradient became non-finite."""
