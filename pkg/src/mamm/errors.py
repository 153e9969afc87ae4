"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`MammError`.
Errors that signal bad user input also derive from ``ValueError`` so callers
that only know about the builtin hierarchy still catch them.
"""


class MammError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(MammError, ValueError):
    pass


class InvalidInputError(MammError, ValueError):
    pass


class DegenerateGeometryError(MammError, ValueError):
    pass


class DegenerateInputError(MammError, ValueError):
    pass


class DegenerateWeightsError(MammError, ValueError):
    pass


class EmptyBasisError(MammError):
    pass


class EmptyDataError(MammError, ValueError):
    pass


class UnknownGroupError(MammError, KeyError):
    def __init__(self, label):
        super().__init__(f"unknown group label: {label!r}")
        self.label = label

    def __str__(self):
        return self.args[0]


class UnknownTermError(MammError, KeyError):
    def __str__(self):
        return self.args[0]


class ParameterOutOfRangeError(MammError, ValueError):
    pass


class SingularSystemError(MammError, ArithmeticError):
    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class NumericalInconsistencyError(MammError, ArithmeticError):
    pass


class DegenerateLikelihoodError(MammError, ArithmeticError):
    pass


class OptimizationFailureError(MammError, RuntimeError):
    def __init__(self, message, trace=()):
        super().__init__(message)
        self.trace = list(trace)


class ModelFormatError(MammError, ValueError):
    """Model or store file has the wrong format name or an unsupported version."""
