"""Exception hierarchy shared by every ragkit module.

Each exception carries a stable machine-readable ``code`` that the CLI prints
and the HTTP service returns in its error bodies.
"""

from __future__ import annotations


class RagkitError(Exception):
    """Base class for domain errors."""

    code = "ragkit_error"


class PreconditionError(RagkitError, ValueError):
    code = "invalid_request"


# textprep
class MissingFile(RagkitError, FileNotFoundError):
    code = "missing_file"


class ExtractorUnavailable(RagkitError):
    code = "extractor_unavailable"


class ExtractorFailed(RagkitError):
    code = "extractor_failed"


class InvalidEncoding(RagkitError):
    code = "invalid_encoding"


class InvalidChunking(PreconditionError):
    code = "invalid_chunking"


class UnknownStrategy(PreconditionError):
    code = "unknown_strategy"


# vecstore
class LockHeld(RagkitError):
    code = "lock_held"


class CorruptManifest(RagkitError):
    code = "corrupt_manifest"


class DimensionMismatch(RagkitError):
    code = "dimension_mismatch"


class NotWritable(RagkitError):
    code = "not_writable"


class UnknownCollection(RagkitError, KeyError):
    code = "unknown_collection"

    def __str__(self) -> str:
        # KeyError.__str__ would repr() the message
        return str(self.args[0]) if self.args else ""


# llmgw
class AuthMissing(RagkitError):
    code = "auth_missing"


class ProviderError(RagkitError):
    """A provider call failed.

    ``status`` is the HTTP status, or None for transport failures and
    timeouts. ``attempts`` counts calls made before giving up and ``stage``
    names the pipeline step ("embed" or "chat") once known.
    """

    code = "provider_error"

    def __init__(self, message: str, status: int | None = None, body: str = "",
                 attempts: int = 1, stage: str | None = None):
        super().__init__(message)
        self.status = status
        self.body = body
        self.attempts = attempts
        self.stage = stage

    @property
    def retryable(self) -> bool:
        return self.status is None or self.status == 429 or self.status >= 500

    def __str__(self) -> str:
        parts = [self.args[0]]
        if self.status is not None:
            parts.append(f"status={self.status}")
        parts.append(f"attempts={self.attempts}")
        if self.stage:
            parts.append(f"stage={self.stage}")
        return " ".join(parts)


class MockUnknownTask(RagkitError):
    code = "mock_unknown_task"


# ragflow
class IoFailure(RagkitError, OSError):
    code = "io_failure"


class DuplicateQaId(RagkitError):
    code = "duplicate_qa_id"


class MalformedCsv(RagkitError):
    code = "malformed_csv"


# ragas
class JudgeParseError(RagkitError):
    code = "judge_parse_error"


class MalformedLog(RagkitError):
    code = "malformed_log"

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message)
        self.line = line


# reportkit
class DegenerateSeries(RagkitError):
    code = "degenerate_series"


class MismatchedGrids(RagkitError):
    code = "mismatched_grids"


# interface
class BindFailure(RagkitError):
    code = "bind_failure"
