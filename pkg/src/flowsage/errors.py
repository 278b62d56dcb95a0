"""Exception hierarchy shared across the toolkit.

CLI exit codes map onto these: DataError family -> 2, NumericError -> 3.
"""


class FlowsageError(Exception):
    """Base class for all toolkit errors."""


class DataError(FlowsageError):
    """Invalid input data (bad file, bad labels, empty dataset, ...)."""


class SchemaError(DataError):
    """A CSV or config does not match the declared schema."""


class ParseError(DataError):
    """A data cell could not be parsed; message cites the row."""


class NumericError(FlowsageError):
    """Non-finite values or a failed numeric quality gate."""
