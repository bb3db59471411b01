"""Exception taxonomy shared by all pspt modules.

The CLI maps these onto exit codes: configuration problems exit 1, data
problems exit 2, numeric failures exit 3.
"""


class PsptError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(PsptError):
    """Invalid configuration value or unknown config key."""


class ContractError(PsptError):
    """An operation was called outside its contract (caller bug)."""


class ShapeError(PsptError):
    """Tensor dimensions do not match the operation's requirements."""


class NumericError(PsptError):
    """Non-finite values where finite ones are required."""


class VocabularyError(PsptError):
    """Token id outside the vocabulary range."""


class SequenceLengthError(PsptError):
    """Assembled input longer than the model's maximum sequence length."""


class CheckpointError(PsptError):
    """Malformed checkpoint file (bad magic, version, or truncation)."""


class DataError(PsptError):
    """Dataset unusable: empty, too small, or structurally invalid."""


class ParseError(DataError):
    """Malformed input line; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class InputError(PsptError):
    """Invalid runtime input (runs, candidate lists, metric vectors)."""
