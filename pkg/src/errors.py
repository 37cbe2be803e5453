"""
Error hierarchy

Every failure the estimator reports deliberately is one of these classes.
Each class carries the exit code the command line returns for it.
"""

from typing import Optional


class EstimatorError(Exception):
    exit_code = 1

    def __init__(self, message: str, fold: Optional[str] = None):
        super().__init__(message)
        self.message = message
        self.fold = fold

    def with_fold(self, fold: str) -> 'EstimatorError':
        """Attach the fold name so experiment failures say where they happened"""
        self.fold = fold
        return self

    def __str__(self) -> str:
        if self.fold is not None:
            return f'[fold {self.fold}] {self.message}'
        return self.message


class ConfigError(EstimatorError):
    exit_code = 1


class UsageError(ConfigError):
    pass


class VariantError(ConfigError):
    pass


class DimensionError(EstimatorError, ValueError):
    exit_code = 1


class DomainError(EstimatorError, ValueError):
    exit_code = 1


class DataError(EstimatorError):
    exit_code = 2


class ParseError(DataError):
    def __init__(self, message: str, path: str = None, line: int = None, offset: int = None):
        location = []
        if path:
            location.append(path)
        if line is not None:
            location.append(f'line {line}')
        if offset is not None:
            location.append(f'offset {offset}')
        if location:
            message = f'{message} ({", ".join(location)})'
        super().__init__(message)
        self.path = path
        self.line = line
        self.offset = offset


class VersionError(DataError):
    pass


class TrainingError(EstimatorError):
    exit_code = 3

    def __init__(self, message: str, epoch: Optional[int] = None):
        if epoch is not None:
            message = f'{message} (epoch {epoch})'
        super().__init__(message)
        self.epoch = epoch


class GradientCheckError(EstimatorError):
    exit_code = 1

    def __init__(self, message: str, failed=()):
        super().__init__(message)
        self.failed = list(failed)
