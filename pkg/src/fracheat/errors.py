"""Exception hierarchy shared by every module.

Each class carries the CLI exit code it maps to, so the command-line
layer can translate any failure without a lookup table.
"""


class FracHeatError(Exception):
    exit_code = 3

    def to_dict(self):
        return {"error": type(self).__name__, "message": str(self)}


class ValidationError(FracHeatError, ValueError):
    """A parameter violates a documented bound."""

    exit_code = 2


class ConfigurationError(ValidationError):
    """A run or grid configuration cannot be honoured (sizes, memory guards)."""


class InvalidSigmaError(ValidationError):
    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness

    def to_dict(self):
        out = super().to_dict()
        out["witness"] = self.witness
        return out


class QueryError(ValidationError, KeyError):
    """Requested quantity was not recorded by the run."""

    def __str__(self):
        return Exception.__str__(self)


class DataError(ValidationError):
    """Input data is non-finite or otherwise unusable."""


class NumericalError(FracHeatError, ArithmeticError):
    """Eigensolver, factorization or quadrature failure."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})

    def to_dict(self):
        out = super().to_dict()
        out["diagnostics"] = self.diagnostics
        return out


class ModelError(NumericalError):
    """Correlation model cannot be realised on the grid."""


class QuadratureError(NumericalError):
    pass


class AnalysisError(FracHeatError):
    """Fit windows or sweeps that cannot produce an estimate."""


class AssumptionViolation(FracHeatError):
    """A structural hypothesis (Dalang condition, noise floor) fails."""

    exit_code = 4
