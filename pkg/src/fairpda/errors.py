"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: validation problems exit with 1,
I/O problems with 2 and numerical aborts with 3.
"""


class FairPDAError(Exception):
    exit_code = 1


class ValidationError(FairPDAError, ValueError):
    """Input data or configuration violates a contract."""


class ManifestParseError(ValidationError):
    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class IntegrityError(ValidationError):
    """Cross-record consistency failure (dangling reference, duplicate id)."""


class EmptyCohortError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class SilentRecordingError(ValidationError):
    pass


class CacheError(FairPDAError):
    exit_code = 2


class NumericalAbort(FairPDAError, ArithmeticError):
    exit_code = 3
