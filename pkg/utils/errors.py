from typing import Optional
from config import ERROR_MESSAGES


class VideoEditError(Exception):
    """Base class for all editing-pipeline errors."""
    def __init__(self, message: str, error_code: str = 'general_error', key: Optional[str] = None):
        self.error_code = error_code
        self.key = key
        super().__init__(message)

    def describe(self) -> str:
        """One-line description for standard error."""
        prefix = ERROR_MESSAGES.get(self.error_code, ERROR_MESSAGES['general_error'])
        where = f" [{self.key}]" if self.key else ""
        return f"{self.error_code}: {prefix}{where}: {self}"


class KernelError(VideoEditError):
    """Raised when a kernel receives non-finite or mis-shaped input."""
    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message, 'kernel_domain', key)


class ConfigurationError(VideoEditError):
    """Raised for invalid parameters, bounds or configuration keys."""
    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message, 'configuration', key)


class StepOrderError(VideoEditError):
    """Raised when a DDIM step is requested in the wrong direction."""
    def __init__(self, message: str):
        super().__init__(message, 'step_order')


class ConditioningError(VideoEditError):
    """Raised when conditioning does not fit the latent."""
    def __init__(self, message: str):
        super().__init__(message, 'conditioning')


class PlanError(VideoEditError):
    """Raised for unknown feature kinds or invalid injection plans."""
    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message, 'plan', key)


class CacheError(VideoEditError):
    """Base class for feature cache errors."""
    def __init__(self, message: str, error_code: str = 'cache', key: Optional[str] = None):
        super().__init__(message, error_code, key)


class DuplicateEntryError(CacheError):
    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message, 'cache_duplicate', key)


class CacheMissError(CacheError):
    """A planned injection site has no recorded feature: record and edit plans differ."""
    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message, 'cache_miss', key)


class CachePopulatedError(CacheError):
    def __init__(self, message: str):
        super().__init__(message, 'cache_populated')


class DivergenceError(VideoEditError):
    """Raised when a latent turns non-finite; carries the sampling step."""
    def __init__(self, message: str, step: Optional[int] = None):
        self.step = step
        super().__init__(message, 'divergence', f"step {step}" if step is not None else None)


class PipelineError(VideoEditError):
    def __init__(self, message: str):
        super().__init__(message, 'pipeline')


class FormatError(VideoEditError):
    """Base class for on-disk format errors."""
    def __init__(self, message: str, error_code: str = 'format', key: Optional[str] = None):
        super().__init__(message, error_code, key)


class BadMagicError(FormatError):
    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message, 'bad_magic', key)


class UnsupportedVersionError(FormatError):
    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message, 'bad_version', key)


class TruncatedFileError(FormatError):
    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message, 'truncated', key)


class MetricError(VideoEditError):
    def __init__(self, message: str):
        super().__init__(message, 'metric')
