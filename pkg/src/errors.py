from typing import Any, Dict, Optional


class EmulatorError(Exception):
    """Base class for every error raised by the emulator package."""

    exit_code: int = 1


class ConfigError(EmulatorError):
    exit_code = 2


class DataError(EmulatorError):
    exit_code = 3


class SchemaError(DataError):
    pass


class MissingStatisticError(DataError):
    def __init__(self, group: str, variable: str, level: Optional[Any] = None):
        self.group = group
        self.variable = variable
        self.level = level
        where = f"{group}/{variable}" if level is None else f"{group}/{variable}@{level}"
        super().__init__(f"No normalization statistic for {where}")


class MalformedRowError(DataError):
    def __init__(self, path: str, row_index: int, reason: str):
        self.path = path
        self.row_index = row_index
        super().__init__(f"{path}: malformed row {row_index}: {reason}")


class ContainerError(DataError):
    pass


class ContainerChecksumError(ContainerError):
    pass


class ContainerTruncatedError(ContainerError):
    pass


class ContainerShapeError(ContainerError):
    pass


class ContainerVersionError(ContainerError):
    pass


class NumericalFailure(EmulatorError):
    exit_code = 4

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)
