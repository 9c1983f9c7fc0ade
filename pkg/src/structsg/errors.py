"""Exception hierarchy shared by the library and the CLI.

The CLI maps each class to a distinct exit code (see ``structsg.cli``).
"""


class StructSGError(Exception):
    """Base class for all library errors."""


class InputError(StructSGError, ValueError):
    """Malformed or out-of-range input data (corpus, vocab, config values)."""


class CorpusFormatError(InputError):
    """A JSON-lines record could not be parsed; carries the line number."""

    def __init__(self, path, line_no, message):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class ContractError(StructSGError, ValueError):
    """A precondition of an operation was violated by the caller."""


class NumericError(StructSGError, ArithmeticError):
    """A computation produced a non-finite value."""
