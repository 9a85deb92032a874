"""Exception hierarchy shared across the package."""


class LgcpThinError(Exception):
    """Base class for all package-specific errors."""


class NotSpdError(LgcpThinError):
    """A matrix expected to be symmetric positive definite is not."""


class FitError(LgcpThinError):
    """Model fitting failed (divergent optimizer, singular Hessian, ...)."""


class ParseError(LgcpThinError):
    """A data or config file could not be parsed.

    Carries the offending path and 1-based line number when known.
    """

    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc = f"{path}: "
        if line is not None:
            loc += f"line {line}: "
        super().__init__(loc + message)
        self.path = path
        self.line = line
