"""Exception hierarchy shared by the library and the CLI.

Each class carries the process exit code the CLI uses when it escapes a
command.
"""


class VQAError(Exception):
    exit_code = 1


class UsageError(VQAError):
    exit_code = 2


class ConfigurationError(VQAError):
    exit_code = 3


class DataError(VQAError):
    exit_code = 4


class IngestionError(DataError):
    pass


class ShapeError(DataError):
    pass


class SamplingError(DataError):
    pass


class RegistryError(ConfigurationError):
    pass


class MetricError(DataError):
    """Raised when a proxy metric (usually an external command) fails.

    ``transcript`` holds the command line, exit status and captured output.
    """

    def __init__(self, message, transcript=""):
        super().__init__(message)
        self.transcript = transcript


class ModeError(UsageError):
    pass


class NumericError(VQAError):
    exit_code = 5


class UndefinedStatisticError(NumericError):
    pass
