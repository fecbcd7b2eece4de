"""Exception hierarchy shared by all polyforge modules.

The CLI maps these onto exit codes: ParameterError -> 1, DataError -> 2,
NumericError -> 3.
"""


class PolyforgeError(Exception):
    """Base class for all toolkit errors."""


class ParameterError(PolyforgeError):
    """Invalid argument, flag, or call contract violation."""


class ShapeError(ParameterError):
    """Tensor shape or divisibility constraint violated."""


class DataError(PolyforgeError):
    """Input data is malformed: unreadable file, out-of-range values,
    inconsistent manifest entries."""


class NumericError(PolyforgeError):
    """Computation cannot proceed: non-finite values, degenerate inputs,
    failed decompositions."""
