"""Exception taxonomy shared across the package."""


class AtmError(Exception):
    """Base class for all package errors."""


class ContractViolation(AtmError):
    """A caller broke an operation's precondition (shape, mode, range)."""


class NumericFailure(AtmError):
    """A NaN/Inf was produced where only finite values are legal."""

    def __init__(self, message: str, node_id: int | None = None, op: str | None = None):
        if node_id is not None:
            message = f"{message} (node {node_id}, op {op!r})"
        super().__init__(message)
        self.node_id = node_id
        self.op = op


class FormatError(AtmError):
    """A file failed structural validation; the message names the field."""


class ConfigError(AtmError):
    """Invalid run configuration."""


class DataError(AtmError):
    """Corpus contents violate what the operation requires."""


class LengthError(AtmError):
    """An input sequence is too short for the requested operation."""


class InfeasibleAlignment(AtmError):
    """No valid CTC alignment exists for the (frames, target) pair."""
