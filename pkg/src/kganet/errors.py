"""Exception hierarchy shared across the package."""


class KGAError(Exception):
    """Base class for all package errors."""


class ShapeError(KGAError, ValueError):
    """Operands have incompatible dimensions."""


class DomainError(KGAError, ValueError):
    """Input lies outside an operation's mathematical domain."""


class ContractError(KGAError, ValueError):
    """A documented precondition was violated."""


class ConfigError(KGAError, ValueError):
    """Invalid configuration or model/data dimension mismatch."""


class DataError(KGAError):
    """Dataset or checkpoint file cannot be used."""


class ParseError(DataError):
    """Malformed binary file; ``offset`` is where decoding failed."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class VersionError(DataError):
    """File was written with an unsupported format version."""


class DegenerateVectorError(KGAError, ArithmeticError):
    """Vector norm too small to normalize."""


class UndefinedMetricError(KGAError, ValueError):
    """Metric cannot be computed for the given inputs."""


class DivergenceError(KGAError, FloatingPointError):
    """Training produced a non-finite loss term."""

    def __init__(self, term, breakdown=None):
        super().__init__(f"non-finite loss term {term!r}: {breakdown}")
        self.term = term
        self.breakdown = breakdown
