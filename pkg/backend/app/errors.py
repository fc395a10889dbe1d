"""Exception hierarchy shared by every pipeline stage.

The CLI maps ``ConfigurationError`` to exit code 2 and ``DataError`` to exit
code 1. Backend errors never escape a batch; they end up as record statuses.
"""

from typing import Optional


class DictutorError(Exception):
    """Base class for all pipeline errors."""


class ConfigurationError(DictutorError):
    """Bad config file, unknown profile, missing template, missing path."""


class DataError(DictutorError):
    """Input data failed validation."""


class ParseRejectError(DataError):
    def __init__(self, reason: str, line: int = 0, text: str = ""):
        super().__init__(f"line {line}: {reason}" if line else reason)
        self.reason = reason
        self.line = line
        self.text = text


class NormalizationError(DataError):
    pass


class CorpusValidationError(DataError):
    pass


class PlanningError(DataError):
    pass


class TemplateError(ConfigurationError):
    pass


class CheckpointCorruptError(DataError):
    def __init__(self, path: str, line: int, detail: str):
        super().__init__(f"corrupt checkpoint {path} at line {line}: {detail}")
        self.path = path
        self.line = line


class SplitError(DataError):
    def __init__(self, language: str, requested: int, available: int):
        super().__init__(
            f"language '{language}': requested {requested} test items but only "
            f"{available} dialogues are available"
        )
        self.language = language
        self.requested = requested
        self.available = available


class MetricInputError(DataError):
    pass


class InfluenceInputError(DataError):
    pass


# ---------------------------------------------------------------------------
# Backend / response errors (consumed by the orchestrator retry loop)
# ---------------------------------------------------------------------------

class BackendError(DictutorError):
    def __init__(self, message: str, status_code: Optional[int] = None):
        super().__init__(message)
        self.status_code = status_code


class RetryableBackendError(BackendError):
    """408, 429, 5xx and transport failures."""


class NonRetryableBackendError(BackendError):
    """Any other 4xx: fail fast."""


class ResponseParseError(DictutorError):
    """Backend text did not match the expected structure.

    ``reason`` is a stable code such as ``alternation``, ``min_turns`` or
    ``off-scale score``.
    """

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.detail = detail


def classify_status(status_code: int) -> type:
    """Map an HTTP status code onto the retryable / non-retryable split."""
    if status_code in (408, 429) or 500 <= status_code < 600:
        return RetryableBackendError
    return NonRetryableBackendError
