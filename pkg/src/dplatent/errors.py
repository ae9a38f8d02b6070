"""Exception classes. Each carries the CLI exit code for its error class."""


class DplatentError(Exception):
    exit_code = 1


class InvalidArgument(DplatentError, ValueError):
    exit_code = 2


class EmptyResultError(DplatentError):
    exit_code = 3


class TrainingFailure(DplatentError):
    exit_code = 4

    def __init__(self, message, checkpoint=None, accountant=None):
        super().__init__(message)
        # last finite parameters, and privacy already spent (if any)
        self.checkpoint = checkpoint
        self.accountant = accountant


class InversionFailure(DplatentError):
    exit_code = 5

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class BatchFailure(DplatentError):
    exit_code = 6


class BudgetExhausted(DplatentError):
    exit_code = 7


class ContractViolation(DplatentError):
    exit_code = 8


class ProvenanceError(DplatentError):
    exit_code = 9


class ManifestFormatError(DplatentError):
    exit_code = 10


class DegenerateTrainingError(DplatentError):
    exit_code = 11
