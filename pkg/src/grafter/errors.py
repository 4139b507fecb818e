"""Error taxonomy shared across the engine, plus CLI exit codes."""


class GrafterError(Exception):
    """Base class for every error this package raises on purpose."""


class DimensionError(GrafterError):
    """Operand shapes disagree; the message names both shapes."""


class ContractError(GrafterError):
    """A documented precondition was violated by the caller or the data."""


class ConfigError(GrafterError):
    """A hyperparameter or flag value is outside its documented range."""


class StateError(GrafterError):
    """An object was used in an order its lifecycle forbids (e.g. a spent tape)."""


class NumericError(GrafterError):
    """A computation produced non-finite values."""


class ParseError(GrafterError):
    """A file could not be parsed; carries the offending line number."""

    def __init__(self, message: str, line_no: int | None = None):
        if line_no is not None:
            message = f"{message} (line {line_no})"
        super().__init__(message)
        self.line_no = line_no


class IntegrityError(GrafterError):
    """Loaded artifacts are internally inconsistent (ids, shapes, missing files)."""


# CLI exit codes. 0 is success; argparse's own usage failures also exit 2.
EXIT_OK = 0
EXIT_USAGE = 2
EXIT_FILE = 3
EXIT_INTEGRITY = 4
EXIT_NUMERIC = 5
