"""Query-time retrieval over atomic entries and syntheses, and answer generation."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

from structmem.core import ATOMIC_KINDS, EntryKind, MemoryStore, format_entry
from structmem.errors import ProviderError
from structmem.prompts import PromptSet
from structmem.providers import Provider, UsageLedger

logger = logging.getLogger(__name__)


@dataclass
class RetrievalConfig:
    entry_count: int = 60
    synthesis_count: int = 5

    def __post_init__(self) -> None:
        if self.entry_count < 0 or self.synthesis_count < 0:
            raise ValueError("retrieval counts must be >= 0")


@dataclass
class QAResult:
    question_id: str
    question: str
    entry_ids: list[str] = field(default_factory=list)
    synthesis_ids: list[str] = field(default_factory=list)
    edge_lines: list[str] = field(default_factory=list)
    context: str = ""
    answer: str = ""
    error: str | None = None
    usage: dict[str, dict] = field(default_factory=dict)

    @property
    def failed(self) -> bool:
        return self.error is not None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> QAResult:
        return cls(**data)


def _is_atomic(entry) -> bool:
    return entry.kind in ATOMIC_KINDS


def _is_synthesis(entry) -> bool:
    return entry.kind is EntryKind.SYNTHESIS


def retrieve_context(
    question: str, store: MemoryStore, provider: Provider, cfg: RetrievalConfig
) -> tuple[list[tuple[str, float]], list[tuple[str, float]]]:
    """Embed the question once and rank each circuit separately.

    Returns ``(entries, syntheses)`` as ranked ``(id, similarity)`` lists.
    """
    query = provider.embed_one(question)
    entries = store.top_k_similar(query, cfg.entry_count, filter=_is_atomic)
    syntheses = store.top_k_similar(query, cfg.synthesis_count, filter=_is_synthesis)
    return entries, syntheses


def render_lines(store: MemoryStore, ranked: list[tuple[str, float]]) -> str:
    return "\n".join(format_entry(store.get(entry_id)) for entry_id, _ in ranked)


def _usage_snapshot(ledger: UsageLedger) -> dict[str, dict]:
    return {name: u for name, u in ledger.to_dict().items() if u["calls"]}


def answer(
    question: str,
    store: MemoryStore,
    prompts: PromptSet,
    provider: Provider,
    cfg: RetrievalConfig,
    *,
    question_id: str = "",
    template: str = "qa_structmem",
) -> QAResult:
    """Retrieve, render both memory blocks, and ask the model once.

    Provider failures are captured on the result rather than raised.
    """
    local = UsageLedger()
    p = provider.bind(local)
    result = QAResult(question_id=question_id, question=question)
    try:
        entries, syntheses = retrieve_context(question, store, p, cfg)
        result.entry_ids = [i for i, _ in entries]
        result.synthesis_ids = [i for i, _ in syntheses]
        entry_text = render_lines(store, entries)
        synthesis_text = render_lines(store, syntheses)
        values = {"question": question, "entries": entry_text}
        if template == "qa_structmem":
            values["syntheses"] = synthesis_text
            result.context = f"Synthesis memory:\n{synthesis_text}\n\nEvent memory:\n{entry_text}"
        else:
            result.context = f"Memory entries:\n{entry_text}"
        out = p.complete(prompts.render(template, p.chat_model, **values), stage="qa")
        result.answer = out.text.strip()
    except ProviderError as exc:
        logger.error("question %s failed: %s", question_id or question[:40], exc)
        result.error = f"{type(exc).__name__}: {exc}"
    provider.ledger.merge(local)
    result.usage = _usage_snapshot(local)
    return result
