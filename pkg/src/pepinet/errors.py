"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array shapes are incompatible with the operation."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""


class PreconditionError(RuntimeError):
    pass


class ConsistencyError(ValueError):
    pass


class FormatError(ValueError):
    """A binary file does not match the expected layout."""


class TruncatedError(FormatError):
    pass


class VersionError(FormatError):
    pass


class ConfigError(ValueError):
    """Invalid experiment configuration; carries every diagnostic found."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
