"""Exception hierarchy shared by the library and the command line.

Each class carries an ``exit_code`` so the CLI can map failures to a
documented nonzero status without inspecting messages.
"""


class CsfError(Exception):
    exit_code = 1


class InputError(CsfError):
    """Unreadable, missing or empty input."""

    exit_code = 3


class SchemaError(InputError):
    exit_code = 4


class ParseError(InputError):
    exit_code = 5


class ParameterError(CsfError, ValueError):
    exit_code = 6


class SelectionError(CsfError):
    exit_code = 7


class FitError(CsfError):
    exit_code = 8


class RankDeficiencyError(CsfError):
    exit_code = 9


class PredictionError(CsfError):
    """Raised when a CATE is undefined for some rows (degenerate denominator)."""

    exit_code = 10

    def __init__(self, message, rows=None):
        super().__init__(message)
        self.rows = rows


class FingerprintError(CsfError):
    exit_code = 11


class ModelFormatError(CsfError):
    exit_code = 12


class IntegrityError(CsfError):
    """Downloaded content does not match the expected digest."""

    exit_code = 13
