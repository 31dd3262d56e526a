"""Cross-event consolidation.

Atomic entries accumulate in a buffer until the dialogue clock has moved
more than ``time_threshold_secs`` past the earliest buffered entry. A cycle
then embeds the chronologically ordered buffer text as one query, picks the
top-K most similar historical entries as seeds, pulls in every entry sharing
a seed's timestamp, and asks the model for one synthesis over the combined
context. The synthesis is stored as a new entry; the buffered entries stay
retrievable and are flagged as consolidated.
"""

from __future__ import annotations

import logging
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

from structmem.core import (
    EntryKind,
    MemoryEntry,
    MemoryStore,
    canonical_timestamp,
    format_entry,
    timestamp_seconds,
)
from structmem.errors import EmptyBuffer, ProviderError
from structmem.prompts import PromptSet
from structmem.providers import Provider

logger = logging.getLogger(__name__)


@dataclass
class ConsolidationConfig:
    time_threshold_secs: float = 3600.0
    seed_k: int = 15
    max_context_entries: int = 200
    include_synthesis_seeds: bool = True
    split_synthesis: bool = False

    def __post_init__(self) -> None:
        if not self.time_threshold_secs > 0:
            raise ValueError("time_threshold_secs must be > 0")
        if self.seed_k < 0:
            raise ValueError("seed_k must be >= 0")
        if self.max_context_entries < 1:
            raise ValueError("max_context_entries must be >= 1")


class ConsolidationBuffer:
    """Ids of unconsolidated entries, in arrival order."""

    def __init__(self) -> None:
        self.ids: list[str] = []
        self.earliest: str | None = None
        self.latest: str | None = None

    def __len__(self) -> int:
        return len(self.ids)

    def add(self, entry: MemoryEntry) -> None:
        if entry.consolidated:
            raise ValueError(f"entry {entry.id} is already consolidated")
        self.ids.append(entry.id)
        ts = entry.timestamp
        if self.earliest is None or ts < self.earliest:
            self.earliest = ts
        if self.latest is None or ts > self.latest:
            self.latest = ts

    def extend(self, entries: Iterable[MemoryEntry]) -> None:
        for entry in entries:
            self.add(entry)

    def clear(self) -> None:
        self.ids.clear()
        self.earliest = self.latest = None


def should_consolidate(
    buffer: ConsolidationBuffer, incoming_timestamp: str, config: ConsolidationConfig
) -> bool:
    """True iff the incoming time is more than the threshold past the earliest buffered entry.

    An incoming time earlier than the latest buffered time is logged and
    treated as equal to it.
    """
    if not len(buffer):
        return False
    incoming = timestamp_seconds(canonical_timestamp(incoming_timestamp))
    latest = timestamp_seconds(buffer.latest)
    if incoming < latest:
        logger.warning(
            "non-monotone timestamp %s earlier than buffered %s; clamping",
            incoming_timestamp, buffer.latest,
        )
        incoming = latest
    return incoming - timestamp_seconds(buffer.earliest) > config.time_threshold_secs


def sorted_buffer(buffer: ConsolidationBuffer, store: MemoryStore) -> list[str]:
    return store.sort_chronologically(buffer.ids)


def build_buffer_query(
    buffer: ConsolidationBuffer, store: MemoryStore, provider: Provider
) -> np.ndarray:
    """Embed the time-ordered, newline-joined buffer texts as one query."""
    if not len(buffer):
        raise EmptyBuffer("cannot build a query from an empty buffer")
    text = "\n".join(store.get(i).text for i in sorted_buffer(buffer, store))
    return provider.embed_one(text)


def select_seeds(
    query: np.ndarray,
    store: MemoryStore,
    buffer: ConsolidationBuffer,
    k: int,
    include_synthesis: bool = True,
) -> list[tuple[str, float]]:
    """Top-k historical entries, never any buffered entry."""
    if k < 0:
        raise ValueError("k must be >= 0")
    buffered = set(buffer.ids)

    def historical(entry: MemoryEntry) -> bool:
        if entry.id in buffered:
            return False
        return include_synthesis or entry.kind is not EntryKind.SYNTHESIS

    return store.top_k_similar(query, k, filter=historical)


@dataclass
class CrossEventContext:
    buffered: list[str]
    supplementary: list[str]
    seeds: list[str] = field(default_factory=list)
    truncated: int = 0

    def render(self, store: MemoryStore) -> tuple[str, str]:
        """Buffer text and supplementary text, one timestamped line per entry."""
        return (
            "\n".join(format_entry(store.get(i)) for i in self.buffered),
            "\n".join(format_entry(store.get(i)) for i in self.supplementary),
        )


def assemble_cross_context(
    buffer: ConsolidationBuffer,
    seeds: Sequence[str] | Sequence[tuple[str, float]],
    store: MemoryStore,
    max_context_entries: int | None = None,
) -> CrossEventContext:
    """Sorted buffer plus the union of every seed's full event."""
    seed_ids = [s[0] if isinstance(s, tuple) else s for s in seeds]
    buffered = sorted_buffer(buffer, store)
    exclude = set(buffered)
    supplementary: dict[str, None] = {}
    for seed in seed_ids:
        for entry_id in store.reconstruct_event(store.get(seed).timestamp).entries:
            if entry_id not in exclude:
                supplementary[entry_id] = None
    ordered = store.sort_chronologically(supplementary)
    truncated = 0
    if max_context_entries is not None and len(ordered) > max_context_entries:
        truncated = len(ordered) - max_context_entries
        logger.info("context overflow: dropping %d oldest supplementary entries", truncated)
        ordered = ordered[truncated:]
    return CrossEventContext(buffered=buffered, supplementary=ordered, seeds=seed_ids, truncated=truncated)


def _synthesis_pieces(text: str, split: bool) -> list[str]:
    text = text.strip()
    if not text:
        return []
    if not split:
        return [text]
    return [p.strip() for p in text.split("\n\n") if p.strip()]


def synthesize(
    context: CrossEventContext,
    prompts: PromptSet,
    provider: Provider,
    store: MemoryStore,
    buffer: ConsolidationBuffer,
    *,
    split: bool = False,
    template: str = "synthesis",
) -> list[MemoryEntry]:
    """One chat call over the context; store the result and drain the buffer.

    On a provider error the buffer is left intact so the next trigger retries.
    """
    if not context.buffered:
        raise EmptyBuffer("context has no buffered entries")
    buffer_text, supplementary_text = context.render(store)
    call = prompts.render(template, provider.chat_model,
                          buffer=buffer_text, supplementary=supplementary_text)
    out = provider.complete(call, stage="consolidation")
    pieces = _synthesis_pieces(out.text, split)
    entries: list[MemoryEntry] = []
    if pieces:
        vectors = provider.embed(pieces)
        ts = max(store.get(i).timestamp for i in context.buffered)
        entries = [
            MemoryEntry(
                id=entry_id,
                text=text,
                kind=EntryKind.SYNTHESIS,
                timestamp=ts,
                conversation_id=store.conversation_id,
                embedding=vec,
            )
            for entry_id, text, vec in zip(store.new_ids(len(pieces)), pieces, vectors)
        ]
        store.add_entries(entries)
    else:
        logger.warning("synthesis returned empty text; nothing stored")
    store.mark_consolidated(context.buffered)
    buffer.clear()
    return entries


def synthesize_unconstrained(
    context: CrossEventContext,
    prompts: PromptSet,
    provider: Provider,
    store: MemoryStore,
    *,
    stage: str = "audit",
) -> str:
    """Synthesis without grounding requirements; returned, never stored."""
    buffer_text, supplementary_text = context.render(store)
    call = prompts.render("synthesis_unconstrained", provider.chat_model,
                          buffer=buffer_text, supplementary=supplementary_text)
    return provider.complete(call, stage=stage).text.strip()


@dataclass
class CycleRecord:
    index: int
    buffered: list[str]
    seeds: list[str]
    supplementary: list[str]
    truncated: int
    synthesis_ids: list[str]
    synthesis_text: str
    template: str
    template_sha256: str
    error: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> CycleRecord:
        return cls(**data)

    def context(self) -> CrossEventContext:
        return CrossEventContext(list(self.buffered), list(self.supplementary), list(self.seeds), self.truncated)


class Consolidator:
    """Drives buffering and consolidation cycles during a build."""

    def __init__(
        self,
        store: MemoryStore,
        prompts: PromptSet,
        provider: Provider,
        config: ConsolidationConfig | None = None,
    ):
        self.store = store
        self.prompts = prompts
        self.provider = provider
        self.config = config or ConsolidationConfig()
        self.buffer = ConsolidationBuffer()
        self.cycles: list[CycleRecord] = []

    def before_utterance(self, timestamp: str) -> CycleRecord | None:
        if should_consolidate(self.buffer, timestamp, self.config):
            return self.run_cycle()
        return None

    def add(self, entries: Iterable[MemoryEntry]) -> None:
        self.buffer.extend(entries)

    def flush(self) -> CycleRecord | None:
        """Force a final cycle over whatever is still buffered."""
        if len(self.buffer):
            return self.run_cycle()
        return None

    def run_cycle(self) -> CycleRecord:
        cfg = self.config
        template = self.prompts["synthesis"]
        record = CycleRecord(
            index=len(self.cycles),
            buffered=sorted_buffer(self.buffer, self.store),
            seeds=[],
            supplementary=[],
            truncated=0,
            synthesis_ids=[],
            synthesis_text="",
            template=template.name,
            template_sha256=template.sha256,
        )
        try:
            query = build_buffer_query(self.buffer, self.store, self.provider)
            seeds = select_seeds(query, self.store, self.buffer, cfg.seed_k, cfg.include_synthesis_seeds)
            context = assemble_cross_context(self.buffer, seeds, self.store, cfg.max_context_entries)
            record.seeds = context.seeds
            record.supplementary = context.supplementary
            record.truncated = context.truncated
            entries = synthesize(context, self.prompts, self.provider, self.store, self.buffer,
                                 split=cfg.split_synthesis)
        except ProviderError as exc:
            logger.error("consolidation cycle %d failed, buffer kept: %s", record.index, exc)
            record.error = f"{type(exc).__name__}: {exc}"
        else:
            record.synthesis_ids = [e.id for e in entries]
            record.synthesis_text = "\n\n".join(e.text for e in entries)
        self.cycles.append(record)
        return record
