"""Exception hierarchy.

Every error carries a short ``code`` that the CLI prints as a machine-parseable
prefix and maps to a process exit status.
"""


class Splat4dError(Exception):
    code = "error"
    exit_status = 1


class InvalidArgumentError(Splat4dError, ValueError):
    code = "invalid-argument"
    exit_status = 2


class ContractError(Splat4dError, ValueError):
    """A pluggable component (denoiser, embedder) broke its interface contract."""

    code = "contract"
    exit_status = 4


class SchemaError(Splat4dError):
    code = "schema"
    exit_status = 3


class FormatError(Splat4dError):
    code = "format"
    exit_status = 3

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(Splat4dError, ArithmeticError):
    code = "numeric"
    exit_status = 4


class DegenerateInputError(NumericError):
    code = "degenerate-input"


class StorageError(Splat4dError, OSError):
    """Unreadable or unwritable path."""

    code = "io"
    exit_status = 5
