"""Exception hierarchy shared across the package.

Two broad families matter for the CLI exit-code contract: configuration or
data problems (exit code 2) and method failures at run time (exit code 1).
"""


class MemissError(Exception):
    """Base class for all package errors."""


class ConfigError(MemissError):
    """Invalid configuration, role bindings, or structurally bad input data."""


class UnsupportedConfigError(MemissError):
    """A method/design/outcome combination the package deliberately rejects."""


class SingularDesignError(MemissError):
    """Rank-deficient design matrix; names the collinear columns."""

    def __init__(self, columns, message=None):
        self.columns = list(columns)
        super().__init__(message or f"design matrix is rank deficient; collinear columns: {self.columns}")


class SeparationError(MemissError):
    """Complete or quasi-complete separation in a logistic fit."""


class ConvergenceError(MemissError):
    """An iterative fit failed to converge; carries the iteration trace."""

    def __init__(self, message, trace=None):
        self.trace = trace or []
        super().__init__(message)


class NoEventsError(MemissError):
    """Survival input with every observation censored."""


class IdentifiabilityError(MemissError):
    """A parameter is not identified by the supplied data/design."""


class BootstrapError(MemissError):
    """Too many failed bootstrap replicates; carries per-failure diagnostics."""

    def __init__(self, message, n_failed=0, n_total=0, first_error=None):
        self.n_failed = n_failed
        self.n_total = n_total
        self.first_error = first_error
        super().__init__(message)


class MissingMeasureError(MemissError):
    """A row lacks a measure an operation requires; carries the row indices."""

    def __init__(self, message, rows=None):
        self.rows = list(rows) if rows is not None else []
        super().__init__(message)


class InsufficientDataError(MemissError):
    """Too few informative rows to estimate the requested model."""


class SmcAcceptanceError(MemissError):
    """Rejection-sampler acceptance probabilities underflowed for some records."""

    def __init__(self, message, records=None, ratios=None):
        self.records = list(records) if records is not None else []
        self.ratios = list(ratios) if ratios is not None else []
        super().__init__(message)


class McmcStateError(MemissError):
    """A full conditional produced a non-finite value; carries the state dump."""

    def __init__(self, message, state=None):
        self.state = state or {}
        super().__init__(message)
