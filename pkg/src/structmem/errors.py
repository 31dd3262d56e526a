"""Exception hierarchy shared across the package."""

from __future__ import annotations


class StructMemError(Exception):
    """Base class for every error raised by this package."""


# --- store -----------------------------------------------------------------


class DuplicateId(StructMemError, KeyError):
    pass


class DimensionMismatch(StructMemError, ValueError):
    pass


class MalformedTimestamp(StructMemError, ValueError):
    pass


class ZeroVector(StructMemError, ValueError):
    pass


class InvalidEmbedding(StructMemError, ValueError):
    """Embedding has non-finite components or zero norm."""


class IoFailure(StructMemError, OSError):
    pass


class CorruptRecord(StructMemError, ValueError):
    def __init__(self, line: int, reason: str, path: str | None = None):
        self.line = line
        self.reason = reason
        self.path = path
        where = f"{path}:" if path else "line "
        super().__init__(f"corrupt record at {where}{line}: {reason}")


class VersionMismatch(StructMemError, ValueError):
    pass


# --- providers ---------------------------------------------------------------


class ProviderError(StructMemError):
    """Any failure talking to a language-model or embedding backend."""


class ProviderTimeout(ProviderError):
    pass


class HttpError(ProviderError):
    def __init__(self, status: int, body: str = ""):
        self.status = status
        self.body = body
        super().__init__(f"HTTP {status}: {body[:200]}")


class RateLimited(HttpError):
    def __init__(self, body: str = ""):
        super().__init__(429, body)


class MalformedResponse(ProviderError):
    pass


class EmptyText(ProviderError, ValueError):
    pass


# --- pipeline ----------------------------------------------------------------


class EmptyBuffer(StructMemError, ValueError):
    pass


class PromptError(StructMemError, ValueError):
    """Template missing, unreadable, or missing a required placeholder."""


class ConfigError(StructMemError, ValueError):
    pass


class DatasetParseError(StructMemError, ValueError):
    def __init__(self, path: str, location: str, reason: str):
        self.path = path
        self.location = location
        self.reason = reason
        super().__init__(f"{path}: {location}: {reason}")
