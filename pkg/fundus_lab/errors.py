"""
Exception taxonomy shared by every fundus_lab module.

I/O failures are left as the builtin OSError family; everything the package
itself validates raises a FundusLabError subclass whose ``category`` is what
the command line prints.
"""


class FundusLabError(Exception):
    category = "error"


class InvalidInputError(FundusLabError, ValueError):
    category = "invalid-input"


class InvalidConfigError(FundusLabError, ValueError):
    category = "invalid-config"


class InvalidStateError(FundusLabError, RuntimeError):
    category = "invalid-state"


class UndefinedMetricError(FundusLabError, ArithmeticError):
    category = "undefined-metric"

    def __init__(self, metric, message=None):
        self.metric = metric
        super().__init__(message or f"{metric} is undefined: zero denominator")


class DatasetFormatError(FundusLabError, ValueError):
    category = "format"


class ManifestValidationError(DatasetFormatError):
    """Raised with every offending ``(line, reason)`` pair of a manifest."""

    def __init__(self, path, problems):
        self.path = path
        self.problems = list(problems)
        listing = "; ".join(f"line {line}: {reason}" for line, reason in self.problems)
        super().__init__(f"{path}: {listing}")


class EmptyIngestError(FundusLabError):
    category = "empty-ingest"


class CompatibilityError(FundusLabError):
    category = "compatibility"
