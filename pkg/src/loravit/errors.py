"""Exception taxonomy shared by all loravit modules.

Exit-code mapping lives in the CLI: usage/config problems are exit 1,
data integrity problems exit 2, numeric failures exit 3.
"""


class LoravitError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(LoravitError):
    """Operand shapes do not compose for the requested operation."""


class NumericError(LoravitError):
    """A NaN or Inf appeared where only finite values are allowed."""


class ContractError(LoravitError):
    """A documented precondition was violated by the caller."""


class ConfigError(LoravitError):
    """Invalid or inconsistent configuration values."""


class ParseError(LoravitError):
    """Malformed serialized data. Carries a byte offset when known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class IntegrityError(LoravitError):
    """Dataset container and sidecar index disagree."""


class ProtocolError(LoravitError):
    """Invalid experiment protocol (overlapping or incomplete family sets)."""


class MetricError(LoravitError):
    """A metric was asked to evaluate degenerate input."""


class OracleError(LoravitError):
    """The finite-difference oracle hit a non-finite evaluation."""


class EmptyClassError(ContractError):
    """A batch is missing one of the two classes required by a loss term."""
