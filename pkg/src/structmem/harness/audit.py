"""Fidelity audits: hallucinated extraction entries and spurious consolidation links."""

from __future__ import annotations

import json
import logging
import re
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field

from structmem.consolidation import CrossEventContext, CycleRecord
from structmem.core import ATOMIC_KINDS, MemoryStore
from structmem.errors import ProviderError
from structmem.harness.dataset import Conversation
from structmem.prompts import PromptSet
from structmem.providers import Provider

logger = logging.getLogger(__name__)

_GROUNDING = re.compile(r"\b(GROUNDED|HALLUCINATED)\b", re.IGNORECASE)


def _json_object(raw: str) -> dict | None:
    start, end = raw.find("{"), raw.rfind("}")
    if start < 0 or end <= start:
        return None
    try:
        value = json.loads(raw[start : end + 1])
    except json.JSONDecodeError:
        return None
    return value if isinstance(value, dict) else None


# --- extraction fidelity -----------------------------------------------------------


@dataclass
class EntryVerdict:
    entry_id: str
    hallucinated: bool | None
    reason: str = ""
    error: str | None = None


@dataclass
class ExtractionAudit:
    conversation_id: str
    verdicts: list[EntryVerdict] = field(default_factory=list)

    @property
    def hallucinated(self) -> int:
        return sum(v.hallucinated is True for v in self.verdicts)

    @property
    def total(self) -> int:
        return sum(v.hallucinated is not None for v in self.verdicts)

    @property
    def unscored(self) -> int:
        return sum(v.hallucinated is None for v in self.verdicts)

    @property
    def rate(self) -> float | None:
        return self.hallucinated / self.total if self.total else None

    def to_dict(self) -> dict:
        return {
            "conversation_id": self.conversation_id,
            "hallucinated": self.hallucinated,
            "total": self.total,
            "unscored": self.unscored,
            "rate": self.rate,
            "verdicts": [asdict(v) for v in self.verdicts],
        }


def parse_grounding(raw: str) -> tuple[bool | None, str]:
    """``(hallucinated, reason)`` from the judge's JSON, with a keyword fallback."""
    obj = _json_object(raw)
    if obj is not None and isinstance(obj.get("verdict"), str):
        word = obj["verdict"].strip().upper()
        if word in ("GROUNDED", "HALLUCINATED"):
            return word == "HALLUCINATED", str(obj.get("reason", ""))
    m = _GROUNDING.search(raw)
    if m is None:
        return None, ""
    return m.group(1).upper() == "HALLUCINATED", ""


def session_dialogue(conversation: Conversation, timestamp: str) -> str:
    """All turns of every session held at ``timestamp``, one ``speaker: text`` per line."""
    return "\n".join(
        f"{t.speaker}: {t.text}" for s in conversation.sessions_at(timestamp) for t in s.turns
    )


def audit_extraction_fidelity(
    store: MemoryStore,
    conversation: Conversation,
    prompts: PromptSet,
    provider: Provider,
    judge_model: str = "",
) -> ExtractionAudit:
    """Judge every factual and relational entry against its source session."""
    audit = ExtractionAudit(conversation.conversation_id)
    dialogues: dict[str, str] = {}
    for entry in store:
        if entry.kind not in ATOMIC_KINDS:
            continue
        if entry.timestamp not in dialogues:
            dialogues[entry.timestamp] = session_dialogue(conversation, entry.timestamp)
        dialogue = dialogues[entry.timestamp]
        if not dialogue:
            audit.verdicts.append(EntryVerdict(entry.id, None, error="no source session at entry timestamp"))
            continue
        call = prompts.render("audit_extraction", judge_model or provider.chat_model,
                              dialogue=dialogue, entry=entry.text)
        try:
            out = provider.complete(call, stage="audit")
        except ProviderError as exc:
            audit.verdicts.append(EntryVerdict(entry.id, None, error=f"{type(exc).__name__}: {exc}"))
            continue
        hallucinated, reason = parse_grounding(out.text)
        audit.verdicts.append(EntryVerdict(entry.id, hallucinated, reason,
                                           None if hallucinated is not None else "unparseable verdict"))
    return audit


def mean_rate(audits: Sequence[ExtractionAudit]) -> float | None:
    """Unweighted mean of per-conversation rates, skipping undefined ones."""
    rates = [a.rate for a in audits if a.rate is not None]
    return sum(rates) / len(rates) if rates else None


# --- consolidation fidelity -------------------------------------------------------


@dataclass
class CycleAudit:
    index: int
    spurious: int = 0
    total: int = 0
    links: list[dict] = field(default_factory=list)
    error: str | None = None

    @property
    def rate(self) -> float | None:
        return self.spurious / self.total if self.total else None


@dataclass
class ConsolidationAudit:
    conversation_id: str
    variant: str
    template: str
    template_sha256: str
    cycles: list[CycleAudit] = field(default_factory=list)

    @property
    def spurious(self) -> int:
        return sum(c.spurious for c in self.cycles if c.error is None)

    @property
    def total(self) -> int:
        return sum(c.total for c in self.cycles if c.error is None)

    @property
    def failed(self) -> int:
        return sum(c.error is not None for c in self.cycles)

    @property
    def rate(self) -> float | None:
        return self.spurious / self.total if self.total else None

    def to_dict(self) -> dict:
        return {
            "conversation_id": self.conversation_id,
            "variant": self.variant,
            "template": self.template,
            "template_sha256": self.template_sha256,
            "spurious": self.spurious,
            "total": self.total,
            "rate": self.rate,
            "failed_cycles": self.failed,
            "cycles": [{**asdict(c), "rate": c.rate} for c in self.cycles],
        }


def parse_links(raw: str) -> list[dict] | None:
    obj = _json_object(raw)
    if obj is None or not isinstance(obj.get("links"), list):
        return None
    links = []
    for item in obj["links"]:
        if isinstance(item, dict) and "link" in item:
            links.append({"link": str(item["link"]), "spurious": bool(item.get("spurious", False)),
                          "reason": str(item.get("reason", ""))})
    return links


def _summary(context: CrossEventContext, template: str, prompts: PromptSet, provider: Provider,
             store: MemoryStore) -> str:
    buffer_text, supplementary_text = context.render(store)
    call = prompts.render(template, provider.chat_model, buffer=buffer_text, supplementary=supplementary_text)
    return provider.complete(call, stage="audit").text.strip()


VARIANT_TEMPLATES = {"constrained": "synthesis", "unconstrained": "synthesis_unconstrained"}


def audit_consolidation_fidelity(
    store: MemoryStore,
    cycles: Sequence[CycleRecord],
    prompts: PromptSet,
    provider: Provider,
    judge_model: str = "",
    *,
    variant: str = "constrained",
) -> ConsolidationAudit:
    """Count spurious cross-event links per recorded consolidation cycle.

    Summary A is written from the cycle's buffer alone (no seeds); Summary B
    from the buffer plus the cycle's recorded supplementary context. For the
    constrained variant B is the stored synthesis; for the unconstrained
    variant both summaries are regenerated with the unconstrained template.
    The judge lists links present in B but not A and flags the spurious ones.
    """
    template_name = VARIANT_TEMPLATES[variant]
    template = prompts[template_name]
    audit = ConsolidationAudit(store.conversation_id, variant, template.name, template.sha256)
    logger.info("consolidation audit (%s) using %s sha256=%s", variant, template.name, template.sha256[:12])
    for record in cycles:
        if record.error is not None or not record.buffered:
            continue
        result = CycleAudit(record.index)
        context = record.context()
        baseline = CrossEventContext(list(record.buffered), [], [], 0)
        try:
            summary_a = _summary(baseline, template_name, prompts, provider, store)
            if variant == "constrained":
                summary_b = record.synthesis_text
            else:
                summary_b = _summary(context, template_name, prompts, provider, store)
            buffer_text, supplementary_text = context.render(store)
            call = prompts.render("audit_consolidation", judge_model or provider.chat_model,
                                  buffer=buffer_text, supplementary=supplementary_text,
                                  summary_a=summary_a, summary_b=summary_b)
            out = provider.complete(call, stage="audit")
        except ProviderError as exc:
            result.error = f"{type(exc).__name__}: {exc}"
            audit.cycles.append(result)
            continue
        links = parse_links(out.text)
        if links is None:
            result.error = "unparseable judge output"
        else:
            result.links = links
            result.total = len(links)
            result.spurious = sum(link["spurious"] for link in links)
        audit.cycles.append(result)
    return audit
