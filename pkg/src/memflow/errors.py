"""Exception types shared across the package."""


class MemflowError(Exception):
    """Base class for package errors."""


class MalformedRecord(MemflowError):
    """A session or turn record is missing a required field."""


class BadTimestamp(MemflowError):
    """A timestamp string could not be parsed."""


class CorruptStore(MemflowError):
    """A persisted store file failed to parse."""

    def __init__(self, message: str, line_no: int | None = None):
        super().__init__(message)
        self.line_no = line_no


class IndexBuildError(MemflowError):
    """Index construction failed (e.g. duplicate chunk ids)."""


class EmbedderError(MemflowError):
    """Dense encoding failed or produced invalid vectors."""


class NetworkError(MemflowError):
    """A network call failed after retries."""


class BackendRefused(MemflowError):
    """The chat backend returned an HTTP error after retries."""

    def __init__(self, message: str, status_code: int | None = None):
        super().__init__(message)
        self.status_code = status_code


class ClassificationUnavailable(MemflowError):
    """The model routing layer could not be reached."""


class EmptyProfile(MemflowError):
    """No profile facts exist for a profile-injection query."""


class PinnedOverflow(MemflowError):
    """Pinned content alone exceeds the global context ceiling."""


class BadDate(MemflowError):
    """A tool date argument was unparseable."""


class StoreNotReady(MemflowError):
    """Pipeline invoked without an ingested store."""


class IndexNotReady(MemflowError):
    """Pipeline invoked without a built index."""


class UnknownFormat(MemflowError):
    """Benchmark loader got an unrecognized format name."""


class SchemaError(MemflowError):
    """Benchmark file does not match the expected schema."""
