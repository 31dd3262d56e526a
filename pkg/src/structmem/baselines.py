"""Flat and graph memory paradigms used for the paradigm comparison.

Flat memory keeps only factual entries. Graph memory adds an entity /
relation graph built per utterance by a four-call cascade: entity
extraction, entity deduplication against existing nodes, relation
extraction, and relation deduplication against existing edges.
"""

from __future__ import annotations

import json
import logging
import os
import re
from collections.abc import Iterable
from dataclasses import dataclass, field
from pathlib import Path

from structmem.core import EntryKind, MemoryEntry, MemoryStore
from structmem.errors import CorruptRecord, IoFailure, ProviderError, VersionMismatch
from structmem.extraction import Utterance, extract_factual, parse_entry_list, store_entries
from structmem.prompts import PromptSet
from structmem.providers import Provider, UsageLedger
from structmem.retrieval import QAResult, RetrievalConfig, _usage_snapshot, render_lines

logger = logging.getLogger(__name__)

GRAPH_FORMAT = "structmem.graph"
GRAPH_VERSION = 1
DEDUP_CONTEXT_CAP = 200


def flat_ingest(u: Utterance, prompts: PromptSet, provider: Provider, store: MemoryStore) -> list[MemoryEntry]:
    """Factual extraction only: one chat call, one embedding batch."""
    facts = extract_factual(u, prompts, provider)
    return store_entries(u, [(EntryKind.FACTUAL, t) for t in facts], provider, store)


# --- graph state --------------------------------------------------------------


def normalize_name(name: str) -> str:
    return "_".join(name.strip().strip(".,;:!?\"'()[]").lower().split())


def normalize_relation(relation: str) -> str:
    ascii_only = relation.encode("ascii", "ignore").decode().lower()
    return re.sub(r"[^a-z0-9]+", "_", ascii_only).strip("_")


@dataclass
class GraphNode:
    name: str
    aliases: set[str] = field(default_factory=set)
    first_seen: str = ""

    def surface_names(self) -> list[str]:
        return [self.name, *sorted(self.aliases)]


@dataclass(frozen=True)
class GraphEdge:
    subject: str
    relation: str
    object: str
    timestamp: str
    provenance: str = ""

    def key(self) -> tuple[str, str, str]:
        return (self.subject, self.relation, self.object)

    def render(self) -> str:
        return f"{self.subject} → {self.relation} → {self.object}"


class GraphMemory:
    """Entity nodes with an alias map, plus timestamped relation edges."""

    def __init__(self, allow_self_loops: bool = False):
        self.nodes: dict[str, GraphNode] = {}
        self.alias_map: dict[str, str] = {}
        self.edges: list[GraphEdge] = []
        self._edge_keys: set[tuple[str, str, str]] = set()
        self.allow_self_loops = allow_self_loops
        self.malformed_triples = 0

    def resolve(self, name: str) -> str | None:
        """Canonical node name for a surface form, if known."""
        key = normalize_name(name)
        if key in self.nodes:
            return key
        return self.alias_map.get(name.strip().lower()) or self.alias_map.get(key)

    def add_alias(self, canonical: str, alias: str) -> None:
        alias_key = alias.strip().lower()
        if not alias_key:
            return
        owner = self.alias_map.get(alias_key)
        if owner is not None and owner != canonical:
            logger.debug("alias %r already belongs to %s; not remapping to %s", alias, owner, canonical)
            return
        self.alias_map[alias_key] = canonical
        if alias.strip() != canonical:
            self.nodes[canonical].aliases.add(alias.strip())

    def ensure_node(self, name: str, timestamp: str, alias: str | None = None) -> str | None:
        canonical = self.resolve(name)
        if canonical is None:
            canonical = normalize_name(name)
            if not canonical:
                return None
            self.nodes[canonical] = GraphNode(canonical, set(), timestamp)
            self.alias_map.setdefault(canonical, canonical)
        self.add_alias(canonical, name)
        if alias:
            self.add_alias(canonical, alias)
        return canonical

    def add_edge(self, edge: GraphEdge) -> bool:
        if edge.subject == edge.object and not self.allow_self_loops:
            return False
        if edge.key() in self._edge_keys:
            return False
        self._edge_keys.add(edge.key())
        self.edges.append(edge)
        return True

    def recent_node_names(self, limit: int = DEDUP_CONTEXT_CAP) -> list[str]:
        names = list(self.nodes)
        return names[-limit:] if limit else []

    def incident_edges(self, nodes: Iterable[str], limit: int | None = None) -> list[GraphEdge]:
        touched = set(nodes)
        edges = [e for e in self.edges if e.subject in touched or e.object in touched]
        return edges[-limit:] if limit is not None else edges

    # -- persistence ---------------------------------------------------------

    def persist(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(json.dumps({"format": GRAPH_FORMAT, "version": GRAPH_VERSION,
                                     "allow_self_loops": self.allow_self_loops}) + "\n")
                for node in self.nodes.values():
                    fh.write(json.dumps({"type": "node", "name": node.name,
                                         "aliases": sorted(node.aliases), "first_seen": node.first_seen},
                                        ensure_ascii=False) + "\n")
                for alias, owner in self.alias_map.items():
                    fh.write(json.dumps({"type": "alias", "alias": alias, "node": owner},
                                        ensure_ascii=False) + "\n")
                for e in self.edges:
                    fh.write(json.dumps({"type": "edge", "subject": e.subject, "relation": e.relation,
                                         "object": e.object, "timestamp": e.timestamp,
                                         "provenance": e.provenance}, ensure_ascii=False) + "\n")
        except OSError as exc:
            raise IoFailure(f"cannot write graph to {path}: {exc}") from exc
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> GraphMemory:
        path = Path(path)
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise IoFailure(f"cannot read graph {path}: {exc}") from exc
        try:
            header = json.loads(lines[0])
        except (IndexError, json.JSONDecodeError) as exc:
            raise CorruptRecord(1, "bad graph header", str(path)) from exc
        if header.get("format") != GRAPH_FORMAT:
            raise CorruptRecord(1, "not a graph file", str(path))
        if header.get("version") != GRAPH_VERSION:
            raise VersionMismatch(f"{path}: graph version {header.get('version')}")
        graph = cls(allow_self_loops=bool(header.get("allow_self_loops", False)))
        for lineno, line in enumerate(lines[1:], start=2):
            try:
                rec = json.loads(line)
                kind = rec["type"]
                if kind == "node":
                    graph.nodes[rec["name"]] = GraphNode(rec["name"], set(rec["aliases"]), rec["first_seen"])
                elif kind == "alias":
                    graph.alias_map[rec["alias"]] = rec["node"]
                elif kind == "edge":
                    graph.add_edge(GraphEdge(rec["subject"], rec["relation"], rec["object"],
                                             rec["timestamp"], rec.get("provenance", "")))
                else:
                    raise ValueError(f"unknown record type {kind!r}")
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CorruptRecord(lineno, str(exc), str(path)) from exc
        return graph

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GraphMemory):
            return NotImplemented
        return (self.nodes == other.nodes and self.alias_map == other.alias_map
                and self.edges == other.edges)

    __hash__ = None  # type: ignore[assignment]


# --- graph ingestion ------------------------------------------------------------


@dataclass
class GraphIngestResult:
    entries: list[MemoryEntry] = field(default_factory=list)
    nodes_added: int = 0
    edges_added: int = 0
    malformed: int = 0
    failed_step: str | None = None


def _parse_mapping(raw: str) -> dict[str, str]:
    text = raw.strip()
    start, end = text.find("{"), text.rfind("}")
    if start < 0 or end <= start:
        return {}
    try:
        value = json.loads(text[start : end + 1])
    except json.JSONDecodeError:
        return {}
    if not isinstance(value, dict):
        return {}
    return {str(k): str(v) for k, v in value.items() if isinstance(v, (str, int, float))}


def parse_triples(raw: str) -> tuple[list[tuple[str, str, str]], int]:
    """Parse ``[{"subject","relation","object"}, ...]`` or ``[[s, r, o], ...]``.

    Returns the well-formed triples and a count of skipped items.
    """
    text = raw.strip()
    start, end = text.find("["), text.rfind("]")
    if start < 0 or end <= start:
        return [], 0
    try:
        items = json.loads(text[start : end + 1])
    except json.JSONDecodeError:
        return [], 1
    if not isinstance(items, list):
        return [], 1
    triples, bad = [], 0
    for item in items:
        if isinstance(item, dict):
            parts = (item.get("subject"), item.get("relation"), item.get("object"))
        elif isinstance(item, (list, tuple)) and len(item) == 3:
            parts = tuple(item)
        else:
            bad += 1
            continue
        if not all(isinstance(p, str) and p.strip() for p in parts):
            bad += 1
            continue
        triples.append(tuple(p.strip() for p in parts))
    return triples, bad


def graph_ingest(
    u: Utterance,
    prompts: PromptSet,
    provider: Provider,
    store: MemoryStore,
    graph: GraphMemory,
) -> GraphIngestResult:
    """Factual extraction plus the four graph calls, strictly in sequence.

    A provider failure stops the cascade for this utterance; anything merged
    by earlier steps is kept.
    """
    result = GraphIngestResult()
    model = provider.chat_model
    values = {"speaker": u.speaker, "timestamp": u.timestamp, "utterance": u.text.strip()}
    step = "extraction_fact"
    try:
        result.entries = flat_ingest(u, prompts, provider, store)

        step = "graph_entity"
        out = provider.complete(prompts.render("entity_extraction", model, **values), stage=step)
        entities = parse_entry_list(out.text)

        step = "graph_entity_dedup"
        existing = graph.recent_node_names()
        out = provider.complete(
            prompts.render("entity_dedup", model,
                           new_entities=json.dumps(entities, ensure_ascii=False),
                           existing_entities="\n".join(existing)),
            stage=step,
        )
        mapping = _parse_mapping(out.text)
        before = len(graph.nodes)
        touched: list[str] = []
        for name in entities:
            target = mapping.get(name, name)
            canonical = graph.ensure_node(target, u.timestamp, alias=name)
            if canonical is not None and canonical not in touched:
                touched.append(canonical)
        result.nodes_added += len(graph.nodes) - before

        step = "graph_relation"
        out = provider.complete(
            prompts.render("relation_extraction", model,
                           entities=json.dumps(touched, ensure_ascii=False), **values),
            stage=step,
        )
        triples, bad = parse_triples(out.text)
        result.malformed += bad

        step = "graph_relation_dedup"
        known = graph.incident_edges(touched, limit=DEDUP_CONTEXT_CAP)
        proposed = [{"subject": s, "relation": r, "object": o} for s, r, o in triples]
        out = provider.complete(
            prompts.render("relation_dedup", model,
                           new_relations=json.dumps(proposed, ensure_ascii=False),
                           existing_relations="\n".join(e.render() for e in known)),
            stage=step,
        )
        kept, bad = parse_triples(out.text)
        result.malformed += bad
        before = len(graph.nodes)
        for s, r, o in kept:
            relation = normalize_relation(r)
            subj = graph.ensure_node(s, u.timestamp)
            obj = graph.ensure_node(o, u.timestamp)
            if not relation or subj is None or obj is None:
                result.malformed += 1
                continue
            if graph.add_edge(GraphEdge(subj, relation, obj, u.timestamp, u.turn_id)):
                result.edges_added += 1
        result.nodes_added += len(graph.nodes) - before
    except ProviderError as exc:
        logger.error("graph ingest of %s stopped at %s: %s", u.turn_id or "utterance", step, exc)
        result.failed_step = step
        if step == "extraction_fact":
            raise
    graph.malformed_triples += result.malformed
    return result


# --- graph answering ------------------------------------------------------------


def select_subgraph(graph: GraphMemory, texts: Iterable[str]) -> tuple[list[str], list[GraphEdge]]:
    """Nodes whose canonical name or any alias occurs (case-insensitively) in
    any of ``texts``, together with every edge incident to them."""
    haystacks = [t.lower() for t in texts]
    selected = [
        name for name, node in graph.nodes.items()
        if any(s.lower() in h for s in node.surface_names() for h in haystacks)
    ]
    return selected, graph.incident_edges(selected)


def graph_answer(
    question: str,
    store: MemoryStore,
    graph: GraphMemory,
    prompts: PromptSet,
    provider: Provider,
    cfg: RetrievalConfig | None = None,
    *,
    question_id: str = "",
) -> QAResult:
    cfg = cfg or RetrievalConfig(entry_count=60, synthesis_count=0)
    local = UsageLedger()
    p = provider.bind(local)
    result = QAResult(question_id=question_id, question=question)
    try:
        query = p.embed_one(question)
        entries = store.top_k_similar(query, cfg.entry_count,
                                      filter=lambda e: e.kind is EntryKind.FACTUAL)
        result.entry_ids = [i for i, _ in entries]
        _, edges = select_subgraph(graph, [question, *(store.get(i).text for i in result.entry_ids)])
        result.edge_lines = [e.render() for e in edges]
        entry_text = render_lines(store, entries)
        graph_text = "\n".join(result.edge_lines)
        result.context = f"Memory entries:\n{entry_text}\n\nEntity-relation graph:\n{graph_text}"
        out = p.complete(
            prompts.render("qa_graph", p.chat_model, question=question, entries=entry_text, graph=graph_text),
            stage="qa",
        )
        result.answer = out.text.strip()
    except ProviderError as exc:
        logger.error("question %s failed: %s", question_id or question[:40], exc)
        result.error = f"{type(exc).__name__}: {exc}"
    provider.ledger.merge(local)
    result.usage = _usage_snapshot(local)
    return result

