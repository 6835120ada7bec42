"""Exception hierarchy shared by all rffslam modules."""


class RffSlamError(Exception):
    """Base class for every error raised by the package."""


class InvalidArgument(RffSlamError, ValueError):
    """An argument violates a documented precondition."""


class DegenerateGeometry(InvalidArgument):
    """Pose and landmark coincide, so range/bearing are undefined."""


class ValidationError(RffSlamError, ValueError):
    """Input data is well-formed but inconsistent (e.g. decreasing timestamps)."""


class ParseError(RffSlamError, ValueError):
    """A dataset file could not be parsed."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
        if line is not None:
            where = f"{where}:{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class NumericalFailure(RffSlamError, ArithmeticError):
    """A numerical routine failed (singular factorization, CG stall, ...)."""

    def __init__(self, message, residual=None):
        self.residual = residual
        super().__init__(message)
