"""Exception hierarchy shared across the package."""


class VolreportError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(VolreportError):
    """Tensor shapes or dimensions are incompatible for an operation."""


class NumericsError(VolreportError):
    """An operation produced NaN or Inf; the step is aborted."""


class ContractError(VolreportError):
    """A documented precondition of an operation was violated."""


class ConfigError(VolreportError):
    """A configuration value is invalid or inconsistent."""


class FormatError(VolreportError):
    """A file or byte stream does not conform to its expected format."""


class UnsupportedDtypeError(FormatError):
    """A NIfTI datatype code this parser does not handle."""

    def __init__(self, code: int):
        super().__init__(f"unsupported NIfTI datatype code {code}")
        self.code = code


class VocabError(VolreportError):
    """A token or id falls outside the vocabulary."""


class DataError(VolreportError):
    """Dataset contents are missing, empty, or malformed."""
