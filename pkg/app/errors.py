"""
RxExtract v1.0.0 - Errors

All pipeline errors derive from RxExtractError and from the closest
built-in, so code catching ValueError/OSError keeps working.
"""

from typing import Optional


class RxExtractError(Exception):
    """Base class for every RxExtract error"""


class ShapeError(RxExtractError, ValueError):
    """Tensor shapes do not agree"""


class RangeError(RxExtractError, ValueError):
    """Coordinate outside the sampled map"""


class DegenerateBoxError(RxExtractError, ValueError):
    """Box with zero width or height"""


class CapacityError(RxExtractError, ValueError):
    """More patches than the positional table holds"""


class ConfigurationError(RxExtractError, ValueError):
    """Invalid thresholds, hyperparameters or lexicon"""


class AlignmentError(RxExtractError, ValueError):
    """Before/after pairs do not share references"""


class UndefinedReferenceError(RxExtractError, ValueError):
    """CER requested against an empty reference"""


class FormatError(RxExtractError, ValueError):
    """Malformed weight, lexicon or annotation file"""

    def __init__(self, message: str, offset: Optional[int] = None, line: Optional[int] = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)
        self.offset = offset
        self.line = line


class ReportError(RxExtractError, OSError):
    """Report could not be written"""
