"""Exception types shared across the package.

The CLI maps these onto process exit codes: usage problems exit 1,
data/validation problems exit 2, numerical failures exit 3.
"""


class EvtrafError(Exception):
    """Base class for every error raised by this package."""


class UsageError(EvtrafError):
    """Bad command-line invocation (unknown flag, missing argument)."""


class ValidationError(EvtrafError):
    """Input data violates a documented precondition."""


class GraphFormatError(ValidationError):
    """Malformed road-graph file.  Carries the offending line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CorpusFormatError(ValidationError):
    """Malformed or incompatible sample-corpus file."""


class CheckpointFormatError(ValidationError):
    """Malformed or incompatible model checkpoint file."""


class DegreeSelectionError(ValidationError):
    """No receptive-field degree satisfies the stability window."""


class CflError(ValidationError):
    """Simulator time step violates the CFL stability bound."""


class ShapeMismatchError(EvtrafError, ValueError):
    """Tensor operands with incompatible shapes."""


class DomainError(EvtrafError, ValueError):
    """Argument outside the mathematical domain of a function."""


class TrainingDivergedError(EvtrafError, ArithmeticError):
    """Loss became non-finite during training."""

    def __init__(self, message, batch_index=None):
        self.batch_index = batch_index
        super().__init__(message)
