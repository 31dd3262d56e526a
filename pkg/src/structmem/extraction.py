"""Dual-perspective extraction of memory entries from single utterances."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field

from structmem.core import EntryKind, MemoryEntry, MemoryStore, canonical_timestamp
from structmem.prompts import PromptSet
from structmem.providers import Provider

logger = logging.getLogger(__name__)


@dataclass
class Utterance:
    conversation_id: str
    session_id: str
    timestamp: str
    speaker: str
    text: str
    turn_id: str = ""

    def __post_init__(self) -> None:
        if not self.text or not self.text.strip():
            raise ValueError(f"utterance {self.turn_id or '?'} has empty text")
        if not self.timestamp:
            raise ValueError(f"utterance {self.turn_id or '?'} has no timestamp")
        self.timestamp = canonical_timestamp(self.timestamp)


@dataclass
class DualExtraction:
    factual: list[str] = field(default_factory=list)
    relational: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.factual) + len(self.relational)


_FENCE = re.compile(r"^```[a-zA-Z]*\s*\n?(.*?)\n?```$", re.DOTALL)
_MARKER = re.compile(r"^\s*(?:[-*•+]|\d+[.)]|\(\d+\))\s+")
_TEXT_KEYS = ("text", "entry", "content", "memory", "fact", "statement")


def _item_text(item: object) -> str | None:
    if isinstance(item, str):
        return item
    if isinstance(item, (int, float)) and not isinstance(item, bool):
        return str(item)
    if isinstance(item, dict):
        for key in _TEXT_KEYS:
            if isinstance(item.get(key), str):
                return item[key]
    return None


def _from_json(raw: str) -> list[str] | None:
    try:
        value = json.loads(raw)
    except (json.JSONDecodeError, ValueError):
        return None
    if isinstance(value, str):
        return [value]
    if isinstance(value, dict):
        lists = [v for v in value.values() if isinstance(v, list)]
        if not lists:
            return None
        value = lists[0]
    if not isinstance(value, list):
        return None
    return [t for t in map(_item_text, value) if t is not None]


def _dedupe(items: list[str]) -> list[str]:
    seen: set[str] = set()
    out = []
    for item in items:
        item = item.strip()
        if item and item not in seen:
            seen.add(item)
            out.append(item)
    return out


def parse_entry_list(raw: str) -> list[str]:
    """Parse a model's list output; never raises.

    Tries a JSON array first (optionally inside a code fence or surrounded by
    chatter), then falls back to one entry per bulleted or numbered line. Text
    with no list markers at all becomes a single entry.
    """
    text = (raw or "").strip()
    if not text:
        return []
    fenced = _FENCE.match(text)
    if fenced:
        text = fenced.group(1).strip()
    parsed = _from_json(text)
    if parsed is None:
        start, end = text.find("["), text.rfind("]")
        if 0 <= start < end:
            parsed = _from_json(text[start : end + 1])
    if parsed is not None:
        return _dedupe(parsed)
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not any(_MARKER.match(ln) for ln in lines):
        return _dedupe([text])
    return _dedupe([_MARKER.sub("", ln) for ln in lines])


def extract_dual(u: Utterance, prompts: PromptSet, provider: Provider) -> DualExtraction:
    """Two independent chat calls: factual entries, then relational entries."""
    values = {"speaker": u.speaker, "timestamp": u.timestamp, "utterance": u.text.strip()}
    fact = provider.complete(
        prompts.render("fact_extraction", provider.chat_model, **values), stage="extraction_fact"
    )
    rel = provider.complete(
        prompts.render("relational_extraction", provider.chat_model, **values), stage="extraction_rel"
    )
    return DualExtraction(parse_entry_list(fact.text), parse_entry_list(rel.text))


def extract_factual(u: Utterance, prompts: PromptSet, provider: Provider) -> list[str]:
    values = {"speaker": u.speaker, "timestamp": u.timestamp, "utterance": u.text.strip()}
    out = provider.complete(
        prompts.render("fact_extraction", provider.chat_model, **values), stage="extraction_fact"
    )
    return parse_entry_list(out.text)


def store_entries(
    u: Utterance,
    texts: list[tuple[EntryKind, str]],
    provider: Provider,
    store: MemoryStore,
) -> list[MemoryEntry]:
    """Embed ``texts`` in one batch and anchor them to the utterance's timestamp."""
    if not texts:
        return []
    vectors = provider.embed([t for _, t in texts])
    ids = store.new_ids(len(texts))
    entries = [
        MemoryEntry(
            id=ids[i],
            text=text,
            kind=kind,
            timestamp=u.timestamp,
            speaker=u.speaker,
            conversation_id=u.conversation_id,
            embedding=vec,
        )
        for i, ((kind, text), vec) in enumerate(zip(texts, vectors))
    ]
    store.add_entries(entries)
    return entries


def ingest_utterance(
    u: Utterance, prompts: PromptSet, provider: Provider, store: MemoryStore
) -> list[MemoryEntry]:
    """Extract both perspectives, embed, and add to ``store``.

    Returns the added entries (factual first, then relational); the count is
    ``len`` of the result. Provider errors propagate and leave the store
    untouched.
    """
    dual = extract_dual(u, prompts, provider)
    texts = [(EntryKind.FACTUAL, t) for t in dual.factual]
    texts += [(EntryKind.RELATIONAL, t) for t in dual.relational]
    return store_entries(u, texts, provider, store)

