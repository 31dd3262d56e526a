"""Loader for LoCoMo-format conversation files."""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime
from importlib import resources
from pathlib import Path

from structmem.config import DEFAULT_CATEGORY_MAP, DEFAULT_SKIP_CATEGORIES
from structmem.core import canonical_timestamp
from structmem.errors import DatasetParseError, MalformedTimestamp
from structmem.extraction import Utterance

logger = logging.getLogger(__name__)

BUNDLED = {
    "synthetic_small": "synthetic_small.json",
    "synthetic_100": "synthetic_100.json",
}

# LoCoMo writes session times like "1:56 pm on 8 May, 2023".
_LOCOMO_FORMATS = ("%I:%M %p on %d %B, %Y", "%I:%M %p on %d %b, %Y", "%I:%M %p on %B %d, %Y")


@dataclass
class Turn:
    speaker: str
    text: str
    turn_id: str = ""


@dataclass
class Session:
    session_id: str
    datetime: str
    turns: list[Turn] = field(default_factory=list)


@dataclass
class QAItem:
    question_id: str
    question: str
    answer: str
    category: str
    evidence: list[str] = field(default_factory=list)


@dataclass
class Conversation:
    conversation_id: str
    speakers: tuple[str, str]
    sessions: list[Session]
    qa_items: list[QAItem] = field(default_factory=list)
    skipped_qa: Counter = field(default_factory=Counter)

    def utterances(self) -> list[Utterance]:
        return [
            Utterance(
                conversation_id=self.conversation_id,
                session_id=s.session_id,
                timestamp=s.datetime,
                speaker=t.speaker,
                text=t.text,
                turn_id=t.turn_id,
            )
            for s in self.sessions
            for t in s.turns
        ]

    def sessions_at(self, timestamp: str) -> list[Session]:
        return [s for s in self.sessions if s.datetime == timestamp]

    def type_counts(self) -> Counter:
        return Counter(q.category for q in self.qa_items)


def parse_session_datetime(raw: str) -> str:
    """Canonical UTC timestamp for a LoCoMo or ISO-8601 session time."""
    text = " ".join(str(raw).split())
    for fmt in _LOCOMO_FORMATS:
        try:
            return canonical_timestamp(datetime.strptime(text, fmt))
        except ValueError:
            continue
    return canonical_timestamp(text)


def _session_number(key: str) -> int:
    return int(key.rsplit("_", 1)[1])


def _turn_text(turn: dict) -> str:
    text = str(turn.get("text", "")).strip()
    caption = turn.get("blip_caption")
    if caption:
        text = f"{text} [shares an image: {caption}]".strip()
    return text


def parse_conversation(
    sample: dict,
    *,
    path: str = "<memory>",
    category_map: dict[str, str] | None = None,
    skip_categories: tuple[str, ...] = DEFAULT_SKIP_CATEGORIES,
) -> Conversation:
    category_map = DEFAULT_CATEGORY_MAP if category_map is None else category_map
    conv_id = str(sample.get("sample_id") or sample.get("conversation_id") or "conv")
    where = f"conversation {conv_id}"
    body = sample.get("conversation")
    if not isinstance(body, dict):
        raise DatasetParseError(path, where, "missing 'conversation' object")
    speakers = (str(body.get("speaker_a", "")), str(body.get("speaker_b", "")))
    session_keys = sorted(
        (k for k in body if re.fullmatch(r"session_\d+", k)), key=_session_number
    )
    sessions = []
    for key in session_keys:
        turns_raw = body[key]
        if not turns_raw:
            continue
        raw_dt = body.get(f"{key}_date_time")
        if raw_dt is None:
            raise DatasetParseError(path, f"{where} {key}", "missing session date_time")
        try:
            dt = parse_session_datetime(raw_dt)
        except MalformedTimestamp as exc:
            raise DatasetParseError(path, f"{where} {key}", f"malformed datetime {raw_dt!r}") from exc
        turns = []
        for i, t in enumerate(turns_raw):
            speaker = str(t.get("speaker", ""))
            if speakers[0] and speaker not in speakers:
                raise DatasetParseError(path, f"{where} {key} turn {i}", f"unknown speaker {speaker!r}")
            text = _turn_text(t)
            if not text:
                logger.warning("%s %s turn %d has no text; skipped", where, key, i)
                continue
            turns.append(Turn(speaker, text, str(t.get("dia_id", f"{key}:{i}"))))
        sessions.append(Session(key, dt, turns))
    for prev, cur in zip(sessions, sessions[1:]):
        if cur.datetime < prev.datetime:
            raise DatasetParseError(path, f"{where} {cur.session_id}",
                                    f"session time {cur.datetime} precedes {prev.session_id}")
    qa_items, skipped = [], Counter()
    for idx, q in enumerate(sample.get("qa", [])):
        code = str(q.get("category", ""))
        if code in skip_categories:
            skipped[code] += 1
            continue
        category = category_map.get(code)
        if category is None:
            logger.warning("%s question %d: unknown category %r skipped", where, idx, code)
            skipped[code] += 1
            continue
        if "answer" not in q:
            skipped[code] += 1
            continue
        qa_items.append(QAItem(
            question_id=f"{conv_id}-q{idx:04d}",
            question=str(q["question"]),
            answer=str(q["answer"]),
            category=category,
            evidence=[str(e) for e in q.get("evidence", [])],
        ))
    return Conversation(conv_id, speakers, sessions, qa_items, skipped)


def load_dataset(
    path: str | Path,
    *,
    category_map: dict[str, str] | None = None,
    skip_categories: tuple[str, ...] = DEFAULT_SKIP_CATEGORIES,
) -> list[Conversation]:
    """Parse a LoCoMo-style JSON file (a list of samples, or a single sample).

    ``path`` may also name a bundled fixture: ``synthetic_small`` or
    ``synthetic_100``.
    """
    name = str(path)
    try:
        if name in BUNDLED:
            raw = (resources.files("structmem") / "data" / BUNDLED[name]).read_text(encoding="utf-8")
        else:
            raw = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetParseError(name, "file", str(exc)) from exc
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise DatasetParseError(name, f"line {exc.lineno} column {exc.colno}", exc.msg) from exc
    samples = data if isinstance(data, list) else [data]
    return [
        parse_conversation(s, path=name, category_map=category_map, skip_categories=skip_categories)
        for s in samples
    ]
