"""Editable prompt templates, one plain-text file per template.

A template file holds an optional ``[system]`` section followed by a
``[user]`` section. Placeholders use ``{name}``; only declared names are
substituted, so literal JSON braces in examples are left alone.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from structmem.errors import PromptError
from structmem.providers import ChatCall

DEFAULT_SYSTEM = "You are a careful assistant for a conversational memory system."

REQUIRED_PLACEHOLDERS: dict[str, frozenset[str]] = {
    "fact_extraction": frozenset({"speaker", "timestamp", "utterance"}),
    "relational_extraction": frozenset({"speaker", "timestamp", "utterance"}),
    "synthesis": frozenset({"buffer", "supplementary"}),
    "synthesis_unconstrained": frozenset({"buffer", "supplementary"}),
    "qa_structmem": frozenset({"question", "entries", "syntheses"}),
    "qa_flat": frozenset({"question", "entries"}),
    "qa_graph": frozenset({"question", "entries", "graph"}),
    "judge": frozenset({"question", "reference", "prediction"}),
    "entity_extraction": frozenset({"speaker", "timestamp", "utterance"}),
    "entity_dedup": frozenset({"new_entities", "existing_entities"}),
    "relation_extraction": frozenset({"speaker", "timestamp", "utterance", "entities"}),
    "relation_dedup": frozenset({"new_relations", "existing_relations"}),
    "audit_extraction": frozenset({"dialogue", "entry"}),
    "audit_consolidation": frozenset({"buffer", "supplementary", "summary_a", "summary_b"}),
}

_PLACEHOLDER = re.compile(r"\{([a-z_]+)\}")


@dataclass(frozen=True)
class Template:
    name: str
    system: str
    user: str
    sha256: str

    @classmethod
    def parse(cls, name: str, raw: str) -> Template:
        digest = hashlib.sha256(raw.encode("utf-8")).hexdigest()
        text = raw.replace("\r\n", "\n")
        if text.startswith("[system]\n"):
            head, sep, user = text[len("[system]\n"):].partition("\n[user]\n")
            if not sep:
                raise PromptError(f"template {name}: [system] section without [user] section")
            system = head.strip()
        else:
            system, user = DEFAULT_SYSTEM, text.removeprefix("[user]\n")
        user = user.strip("\n")
        required = REQUIRED_PLACEHOLDERS.get(name, frozenset())
        missing = required - set(_PLACEHOLDER.findall(user))
        if missing:
            raise PromptError(f"template {name}: missing placeholders {sorted(missing)}")
        return cls(name=name, system=system or DEFAULT_SYSTEM, user=user, sha256=digest)

    def placeholders(self) -> set[str]:
        return set(_PLACEHOLDER.findall(self.user))

    def render(self, model_name: str = "", **values: object) -> ChatCall:
        missing = self.placeholders() - values.keys()
        if missing:
            raise PromptError(f"template {self.name}: no value for {sorted(missing)}")
        user = _PLACEHOLDER.sub(
            lambda m: str(values[m.group(1)]) if m.group(1) in values else m.group(0),
            self.user,
        )
        return ChatCall(
            system_prompt=self.system,
            user_prompt=user,
            model_name=model_name,
            temperature=0.0,
            kind=self.name,
        )


class PromptSet:
    """All templates used by the pipelines, loaded from a directory."""

    def __init__(self, templates: dict[str, Template]):
        absent = set(REQUIRED_PLACEHOLDERS) - templates.keys()
        if absent:
            raise PromptError(f"missing templates: {sorted(absent)}")
        self.templates = dict(templates)

    @classmethod
    def load(cls, directory: str | Path | None = None) -> PromptSet:
        """Load from ``directory``, falling back to the bundled templates
        for any file the directory does not override."""
        templates = {}
        bundled = resources.files("structmem") / "templates"
        for name in REQUIRED_PLACEHOLDERS:
            fname = f"{name}.txt"
            override = Path(directory) / fname if directory is not None else None
            try:
                if override is not None and override.is_file():
                    raw = override.read_text(encoding="utf-8")
                else:
                    raw = (bundled / fname).read_text(encoding="utf-8")
            except OSError as exc:
                raise PromptError(f"cannot read template {fname}: {exc}") from exc
            templates[name] = Template.parse(name, raw)
        return cls(templates)

    def __getitem__(self, name: str) -> Template:
        return self.templates[name]

    def render(self, name: str, model_name: str = "", **values: object) -> ChatCall:
        return self.templates[name].render(model_name, **values)

    def hashes(self) -> dict[str, str]:
        return {name: t.sha256 for name, t in sorted(self.templates.items())}
