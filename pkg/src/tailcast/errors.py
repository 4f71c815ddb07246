"""Exception hierarchy shared by all tailcast modules."""


class TailcastError(Exception):
    """Base class for every error raised by this package."""


class ParameterDomainError(TailcastError, ValueError):
    """A distribution or scoring argument lies outside its valid domain."""


class UnsupportedShapeError(ParameterDomainError):
    """GPD shape outside the range where a closed form exists (xi >= 1)."""


class ValidationError(TailcastError, ValueError):
    """Input data or configuration failed a schema or consistency check."""


class DegenerateThresholdError(ValidationError):
    """A fitted GPD threshold collapsed onto the censor point."""


class MissingDataError(ValidationError, LookupError):
    """A requested record (init time, lead, station) is not in the data."""


class ShapeError(TailcastError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(TailcastError, ArithmeticError):
    """NaN/Inf encountered or a numeric domain was violated."""


class OracleFailure(NumericError):
    """Numerical integration inside a validation oracle did not converge."""
