"""Typed memory store with a timestamp index and an exhaustive vector index.

Every entry is anchored to the dialogue timestamp of the utterance it came
from, so all entries sharing a timestamp can be pulled back together as one
event. Similarity search is a brute-force cosine scan over a contiguous
float32 matrix; scores are accumulated in float64.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from collections.abc import Callable, Iterable, Iterator
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path

import numpy as np

from structmem.errors import (
    CorruptRecord,
    DimensionMismatch,
    DuplicateId,
    InvalidEmbedding,
    IoFailure,
    MalformedTimestamp,
    VersionMismatch,
    ZeroVector,
)

logger = logging.getLogger(__name__)

STORE_FORMAT = "structmem.store"
STORE_VERSION = 1

_TS_FORMAT = "%Y-%m-%dT%H:%M:%SZ"


class EntryKind(str, Enum):
    FACTUAL = "factual"
    RELATIONAL = "relational"
    SYNTHESIS = "synthesis"


ATOMIC_KINDS = frozenset({EntryKind.FACTUAL, EntryKind.RELATIONAL})


def canonical_timestamp(value: str | datetime) -> str:
    """Normalize a timestamp to ``YYYY-MM-DDTHH:MM:SSZ`` (UTC, second resolution).

    Naive datetimes and offset-less strings are taken to be UTC. Sub-second
    precision is truncated.
    """
    if isinstance(value, datetime):
        dt = value
    elif isinstance(value, str):
        text = value.strip()
        if not text:
            raise MalformedTimestamp("empty timestamp")
        if text.endswith(("Z", "z")):
            text = text[:-1] + "+00:00"
        try:
            dt = datetime.fromisoformat(text)
        except ValueError as exc:
            raise MalformedTimestamp(f"unparseable timestamp {value!r}") from exc
    else:
        raise MalformedTimestamp(f"unsupported timestamp type {type(value).__name__}")
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    else:
        dt = dt.astimezone(timezone.utc)
    return dt.replace(microsecond=0).strftime(_TS_FORMAT)


def parse_timestamp(ts: str) -> datetime:
    """Inverse of :func:`canonical_timestamp` for canonical strings."""
    try:
        return datetime.strptime(ts, _TS_FORMAT).replace(tzinfo=timezone.utc)
    except (TypeError, ValueError) as exc:
        raise MalformedTimestamp(f"not a canonical timestamp: {ts!r}") from exc


def timestamp_seconds(ts: str) -> int:
    return int(parse_timestamp(ts).timestamp())


@dataclass(eq=False)
class MemoryEntry:
    """One atomic natural-language memory unit (or a synthesis)."""

    id: str
    text: str
    kind: EntryKind
    timestamp: str
    conversation_id: str = ""
    speaker: str | None = None
    embedding: np.ndarray | None = None
    consolidated: bool = False

    def __post_init__(self) -> None:
        self.kind = EntryKind(self.kind)
        self.timestamp = canonical_timestamp(self.timestamp)
        if self.embedding is not None:
            self.embedding = np.asarray(self.embedding, dtype=np.float32)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MemoryEntry):
            return NotImplemented
        if (self.embedding is None) != (other.embedding is None):
            return False
        if self.embedding is not None and (
            self.embedding.shape != other.embedding.shape
            or self.embedding.tobytes() != other.embedding.tobytes()
        ):
            return False
        return (
            self.id == other.id
            and self.text == other.text
            and self.kind == other.kind
            and self.timestamp == other.timestamp
            and self.conversation_id == other.conversation_id
            and self.speaker == other.speaker
            and self.consolidated == other.consolidated
        )

    __hash__ = None  # type: ignore[assignment]

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "text": self.text,
            "kind": self.kind.value,
            "timestamp": self.timestamp,
            "speaker": self.speaker,
            "conversation_id": self.conversation_id,
            "consolidated": self.consolidated,
            "embedding": None
            if self.embedding is None
            else self.embedding.astype(np.float64).tolist(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> MemoryEntry:
        emb = rec.get("embedding")
        return cls(
            id=rec["id"],
            text=rec["text"],
            kind=EntryKind(rec["kind"]),
            timestamp=rec["timestamp"],
            speaker=rec.get("speaker"),
            conversation_id=rec.get("conversation_id", ""),
            consolidated=bool(rec.get("consolidated", False)),
            embedding=None if emb is None else np.asarray(emb, dtype=np.float32),
        )


@dataclass
class Event:
    """All entries sharing one timestamp, in insertion order."""

    timestamp: str
    entries: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors, accumulated in float64."""
    a64 = np.asarray(a, dtype=np.float64).ravel()
    b64 = np.asarray(b, dtype=np.float64).ravel()
    if a64.shape != b64.shape:
        raise DimensionMismatch(f"dimensions differ: {a64.shape[0]} vs {b64.shape[0]}")
    na = float(np.linalg.norm(a64))
    nb = float(np.linalg.norm(b64))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine similarity undefined for an all-zero vector")
    sim = float(np.dot(a64, b64)) / (na * nb)
    return max(-1.0, min(1.0, sim))


EntryFilter = Callable[[MemoryEntry], bool]


def rank_key(sim: float, ts_seconds: int, entry_id: str) -> tuple:
    """Sort key: higher similarity, then later timestamp, then smaller id."""
    return (-sim, -ts_seconds, entry_id)


class MemoryStore:
    """In-memory store of :class:`MemoryEntry` objects.

    Single writer, many readers: mutations take ``self._lock``. Entries are
    immutable after insertion apart from the ``consolidated`` flag.
    """

    _INITIAL_CAPACITY = 64

    def __init__(self, dimension: int, conversation_id: str = ""):
        if dimension <= 0:
            raise ValueError("dimension must be positive")
        self.dimension = int(dimension)
        self.conversation_id = conversation_id
        self._entries: dict[str, MemoryEntry] = {}
        self._seq: dict[str, int] = {}
        self._by_timestamp: dict[str, list[str]] = {}
        self._vectors = np.empty((self._INITIAL_CAPACITY, self.dimension), dtype=np.float32)
        self._norms = np.empty(self._INITIAL_CAPACITY, dtype=np.float64)
        self._row_ts = np.empty(self._INITIAL_CAPACITY, dtype=np.int64)
        self._row_ids: list[str] = []
        self._lock = threading.RLock()

    # -- basic access ------------------------------------------------------

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, entry_id: object) -> bool:
        return entry_id in self._entries

    def __iter__(self) -> Iterator[MemoryEntry]:
        return iter(list(self._entries.values()))

    def get(self, entry_id: str) -> MemoryEntry:
        return self._entries[entry_id]

    def sequence(self, entry_id: str) -> int:
        """Global insertion index of an entry."""
        return self._seq[entry_id]

    def timestamps(self) -> list[str]:
        return sorted(self._by_timestamp)

    def new_ids(self, n: int) -> list[str]:
        """Deterministic fresh ids for the next ``n`` insertions."""
        prefix = self.conversation_id or "m"
        base = len(self._entries)
        return [f"{prefix}-{base + i:06d}" for i in range(n)]

    def sort_chronologically(self, ids: Iterable[str]) -> list[str]:
        """Order ids by (timestamp, insertion order)."""
        return sorted(ids, key=lambda i: (self._entries[i].timestamp, self._seq[i]))

    # -- mutation ------------------------------------------------------------

    def _validate(self, entry: MemoryEntry, pending: set[str]) -> None:
        if entry.id in self._entries or entry.id in pending:
            raise DuplicateId(entry.id)
        # __post_init__ canonicalizes, but fields may have been reassigned.
        if canonical_timestamp(entry.timestamp) != entry.timestamp:
            raise MalformedTimestamp(entry.timestamp)
        if entry.embedding is not None:
            emb = entry.embedding
            if emb.ndim != 1 or emb.shape[0] != self.dimension:
                raise DimensionMismatch(
                    f"entry {entry.id}: embedding dim {emb.shape} != store dim {self.dimension}"
                )
            if not np.all(np.isfinite(emb)):
                raise InvalidEmbedding(f"entry {entry.id}: non-finite embedding")
            if not np.any(emb):
                raise InvalidEmbedding(f"entry {entry.id}: all-zero embedding")

    def _grow(self, needed: int) -> None:
        cap = self._vectors.shape[0]
        if needed <= cap:
            return
        while cap < needed:
            cap *= 2
        vec = np.empty((cap, self.dimension), dtype=np.float32)
        vec[: len(self._row_ids)] = self._vectors[: len(self._row_ids)]
        norms = np.empty(cap, dtype=np.float64)
        norms[: len(self._row_ids)] = self._norms[: len(self._row_ids)]
        row_ts = np.empty(cap, dtype=np.int64)
        row_ts[: len(self._row_ids)] = self._row_ts[: len(self._row_ids)]
        self._vectors, self._norms, self._row_ts = vec, norms, row_ts

    def add_entries(self, entries: Iterable[MemoryEntry]) -> int:
        """Insert entries; all-or-nothing on validation failure."""
        batch = list(entries)
        if not batch:
            return 0
        with self._lock:
            pending: set[str] = set()
            for entry in batch:
                self._validate(entry, pending)
                pending.add(entry.id)
            embedded = [e for e in batch if e.embedding is not None]
            self._grow(len(self._row_ids) + len(embedded))
            for entry in batch:
                self._seq[entry.id] = len(self._entries)
                self._entries[entry.id] = entry
                self._by_timestamp.setdefault(entry.timestamp, []).append(entry.id)
                if entry.embedding is not None:
                    row = len(self._row_ids)
                    self._vectors[row] = entry.embedding
                    self._norms[row] = float(np.linalg.norm(entry.embedding.astype(np.float64)))
                    self._row_ts[row] = timestamp_seconds(entry.timestamp)
                    self._row_ids.append(entry.id)
        return len(batch)

    def mark_consolidated(self, ids: Iterable[str]) -> None:
        with self._lock:
            for entry_id in ids:
                self._entries[entry_id].consolidated = True

    # -- queries -------------------------------------------------------------

    def reconstruct_event(self, timestamp: str | datetime) -> Event:
        ts = canonical_timestamp(timestamp)
        return Event(timestamp=ts, entries=list(self._by_timestamp.get(ts, ())))

    def top_k_similar(
        self,
        query,
        k: int,
        filter: EntryFilter | None = None,
    ) -> list[tuple[str, float]]:
        """Exact top-k cosine search over embedded entries passing ``filter``.

        Ties on similarity go to the later timestamp, then the smaller id.
        """
        if k < 0:
            raise ValueError("k must be non-negative")
        q = np.asarray(query, dtype=np.float64).ravel()
        if q.shape[0] != self.dimension:
            raise DimensionMismatch(f"query dim {q.shape[0]} != store dim {self.dimension}")
        qn = float(np.linalg.norm(q))
        if qn == 0.0:
            raise ZeroVector("query vector is all zeros")
        n = len(self._row_ids)
        if k == 0 or n == 0:
            return []
        row_ids = self._row_ids[:n]
        rows = np.arange(n)
        if filter is not None:
            mask = np.fromiter((filter(self._entries[i]) for i in row_ids), dtype=bool, count=n)
            rows = rows[mask]
            if rows.size == 0:
                return []
        sims = (self._vectors[rows].astype(np.float64) @ q) / (self._norms[rows] * qn)
        np.clip(sims, -1.0, 1.0, out=sims)
        if rows.size > k:
            # keep every row tied with the k-th best so the tie-break sees all of them
            kth = np.partition(-sims, k - 1)[k - 1]
            keep = -sims <= kth
            rows, sims = rows[keep], sims[keep]
        ranked = sorted(
            ((row_ids[r], float(s), int(self._row_ts[r])) for r, s in zip(rows, sims)),
            key=lambda t: rank_key(t[1], t[2], t[0]),
        )
        return [(entry_id, sim) for entry_id, sim, _ in ranked[:k]]

    # -- persistence ---------------------------------------------------------

    def header(self) -> dict:
        return {
            "format": STORE_FORMAT,
            "version": STORE_VERSION,
            "dimension": self.dimension,
            "conversation_id": self.conversation_id,
        }

    def persist(self, path: str | os.PathLike) -> Path:
        """Write the store as JSON lines: a header, then one entry per line."""
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(_dumps(self.header()) + "\n")
                for entry in self._entries.values():
                    fh.write(_dumps(entry.to_record()) + "\n")
            os.replace(tmp, path)
        except OSError as exc:
            raise IoFailure(f"cannot write store to {path}: {exc}") from exc
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> MemoryStore:
        return load_store(path)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MemoryStore):
            return NotImplemented
        return (
            self.dimension == other.dimension
            and self.conversation_id == other.conversation_id
            and list(self._entries) == list(other._entries)
            and all(a == other._entries[k] for k, a in self._entries.items())
        )

    __hash__ = None  # type: ignore[assignment]


def _dumps(obj: dict) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"), allow_nan=False)


def load_store(path: str | os.PathLike) -> MemoryStore:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").split("\n")
    except OSError as exc:
        raise IoFailure(f"cannot read store {path}: {exc}") from exc
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise CorruptRecord(1, "missing header", str(path))
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorruptRecord(1, f"bad header: {exc.msg}", str(path)) from exc
    if not isinstance(header, dict) or header.get("format") != STORE_FORMAT:
        raise CorruptRecord(1, "not a memory store file", str(path))
    if header.get("version") != STORE_VERSION:
        raise VersionMismatch(f"{path}: store version {header.get('version')}, expected {STORE_VERSION}")
    store = MemoryStore(int(header["dimension"]), header.get("conversation_id", ""))
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            entry = MemoryEntry.from_record(rec)
            store.add_entries([entry])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise CorruptRecord(lineno, str(exc), str(path)) from exc
    return store


def format_entry(entry: MemoryEntry) -> str:
    """Render one entry as a timestamp-prefixed context line."""
    text = " ".join(entry.text.split())
    return f"[{entry.timestamp}] {text}"
