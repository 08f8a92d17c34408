"""Exception types shared across the package.

Each CLI error path maps onto one of these (see cli.EXIT_* codes).
"""


class DimensionError(ValueError):
    """Operand shapes violate an operation's shape contract."""


class ContractError(RuntimeError):
    """An API precondition was violated (consumed tape, missing grad, ...)."""


class ConfigurationError(ValueError):
    """A config object is internally inconsistent with the data it is applied to."""


class ParseError(ValueError):
    """Malformed input text; carries the byte offset of the first violation."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ProtocolError(ValueError):
    """A query/gallery split cannot be built or scored as requested."""


class CheckpointError(ValueError):
    """Checkpoint bytes are unreadable or incompatible with the model."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where the contract guarantees finiteness."""
