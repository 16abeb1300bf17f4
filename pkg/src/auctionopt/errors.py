"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration (distribution parameters, grid spec, ...)."""


class DataError(ValueError):
    """Inconsistent or incomplete data (e.g. ground truth missing an entry)."""


class ParseError(ValueError):
    """Malformed input file."""

    def __init__(self, path, line_number, message):
        super().__init__(f"{path}:{line_number}: {message}")
        self.path = str(path)
        self.line_number = line_number


class DegenerateCandidateError(ValueError):
    """A candidate whose ranking CTR makes its clearing price undefined."""


class ProblemBuildError(ValueError):
    """Constraint program could not be constructed (e.g. zero baseline denominator)."""


class SolverNumericError(ArithmeticError):
    """NaN or overflow encountered inside the solver."""

    def __init__(self, message, outer_iteration=None, inner_iteration=None):
        ctx = ""
        if outer_iteration is not None:
            ctx = f" (outer iteration {outer_iteration}, inner iteration {inner_iteration})"
        super().__init__(message + ctx)
        self.outer_iteration = outer_iteration
        self.inner_iteration = inner_iteration
