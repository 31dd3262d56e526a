"""End-to-end builds and evaluations for one conversation."""

from __future__ import annotations

import csv
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from structmem.baselines import GraphMemory, graph_answer, graph_ingest, flat_ingest
from structmem.config import ParadigmConfig
from structmem.consolidation import Consolidator, CycleRecord
from structmem.core import MemoryStore, load_store
from structmem.errors import IoFailure, ProviderError
from structmem.extraction import ingest_utterance
from structmem.harness.dataset import Conversation, QAItem
from structmem.prompts import PromptSet
from structmem.providers import CHAT_STAGES, Provider, UsageLedger
from structmem.retrieval import QAResult, answer

logger = logging.getLogger(__name__)

VERDICTS = ("correct", "incorrect")
COST_CURVE_FIELDS = ("turn", "turn_id", "timestamp", "chat_calls", "input_tokens",
                     "output_tokens", "total_tokens", "embedding_calls", "wall_time")


@dataclass
class BuildResult:
    conversation_id: str
    paradigm: str
    store: MemoryStore
    ledger: UsageLedger
    graph: GraphMemory | None = None
    cost_curve: list[dict] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    cycles: list[CycleRecord] = field(default_factory=list)

    @property
    def utterance_count(self) -> int:
        return len(self.cost_curve)

    def save(self, directory: str | Path) -> dict[str, str]:
        """Write every build artifact under ``directory``; returns name -> relative path."""
        directory = Path(directory)
        try:
            directory.mkdir(parents=True, exist_ok=True)
            files = {"store": "store.jsonl", "ledger": "build_ledger.json",
                     "cost_curve": "cost_curve.csv", "cycles": "cycles.jsonl",
                     "build_info": "build.json"}
            self.store.persist(directory / files["store"])
            if self.graph is not None:
                files["graph"] = "graph.jsonl"
                self.graph.persist(directory / files["graph"])
            _write_json(directory / files["ledger"], self.ledger.to_dict())
            write_cost_curve(directory / files["cost_curve"], self.cost_curve)
            with open(directory / files["cycles"], "w", encoding="utf-8", newline="\n") as fh:
                for c in self.cycles:
                    fh.write(json.dumps(c.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")
            _write_json(directory / files["build_info"], {
                "conversation_id": self.conversation_id,
                "paradigm": self.paradigm,
                "utterances": self.utterance_count,
                "entries": len(self.store),
                "cycles": len(self.cycles),
                "failures": self.failures,
            })
        except OSError as exc:
            raise IoFailure(f"cannot write build artifacts to {directory}: {exc}") from exc
        return files

    @classmethod
    def load(cls, directory: str | Path) -> BuildResult:
        directory = Path(directory)
        try:
            info = json.loads((directory / "build.json").read_text(encoding="utf-8"))
            ledger = UsageLedger.from_dict(
                json.loads((directory / "build_ledger.json").read_text(encoding="utf-8")))
            store = load_store(directory / "store.jsonl")
            graph_path = directory / "graph.jsonl"
            graph = GraphMemory.load(graph_path) if graph_path.exists() else None
            curve = read_cost_curve(directory / "cost_curve.csv")
            cycles = [CycleRecord.from_dict(json.loads(line)) for line in
                      (directory / "cycles.jsonl").read_text(encoding="utf-8").splitlines() if line]
        except OSError as exc:
            raise IoFailure(f"cannot read build artifacts from {directory}: {exc}") from exc
        return cls(info["conversation_id"], info["paradigm"], store, ledger, graph, curve,
                   info.get("failures", []), cycles)


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def write_cost_curve(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=COST_CURVE_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def read_cost_curve(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for key in ("turn", "chat_calls", "input_tokens", "output_tokens", "total_tokens", "embedding_calls"):
            row[key] = int(row[key])
        row["wall_time"] = float(row["wall_time"])
    return rows


def _snapshot(turn: int, turn_id: str, timestamp: str, ledger: UsageLedger) -> dict:
    chat = ledger.totals(CHAT_STAGES)
    return {
        "turn": turn,
        "turn_id": turn_id,
        "timestamp": timestamp,
        "chat_calls": chat.calls,
        "input_tokens": chat.input_tokens,
        "output_tokens": chat.output_tokens,
        "total_tokens": chat.total_tokens,
        "embedding_calls": ledger.stage("embedding").calls,
        "wall_time": round(ledger.totals().wall_time, 6),
    }


def run_build(
    conversation: Conversation,
    paradigm: ParadigmConfig,
    provider: Provider,
    prompts: PromptSet,
) -> BuildResult:
    """Ingest every utterance in order through the selected paradigm.

    One cumulative ledger snapshot is taken per utterance; for structmem the
    final forced consolidation is folded into the last snapshot. Provider
    failures are logged and recorded per utterance and the build continues.
    """
    ledger = UsageLedger()
    p = provider.bind(ledger)
    store = MemoryStore(p.dimension, conversation.conversation_id)
    graph = GraphMemory() if paradigm.paradigm == "graph" else None
    consolidator = (
        Consolidator(store, prompts, p, paradigm.consolidation) if paradigm.paradigm == "structmem" else None
    )
    result = BuildResult(conversation.conversation_id, paradigm.paradigm, store, ledger, graph)
    for turn, u in enumerate(conversation.utterances()):
        try:
            if consolidator is not None:
                consolidator.before_utterance(u.timestamp)
                consolidator.add(ingest_utterance(u, prompts, p, store))
            elif graph is not None:
                outcome = graph_ingest(u, prompts, p, store, graph)
                if outcome.failed_step:
                    result.failures.append({"turn": turn, "turn_id": u.turn_id, "step": outcome.failed_step})
            else:
                flat_ingest(u, prompts, p, store)
        except ProviderError as exc:
            logger.error("turn %d (%s) failed: %s", turn, u.turn_id, exc)
            result.failures.append({"turn": turn, "turn_id": u.turn_id, "error": f"{type(exc).__name__}: {exc}"})
        result.cost_curve.append(_snapshot(turn, u.turn_id, u.timestamp, ledger))
    if consolidator is not None:
        consolidator.flush()
        result.cycles = consolidator.cycles
        if result.cost_curve:
            last = result.cost_curve[-1]
            result.cost_curve[-1] = _snapshot(last["turn"], last["turn_id"], last["timestamp"], ledger)
    return result


# --- judging ----------------------------------------------------------------------


@dataclass
class JudgeVerdict:
    question_id: str
    judge: str
    verdict: str | None
    raw: str = ""
    error: str | None = None

    @property
    def scored(self) -> bool:
        return self.verdict is not None


_VERDICT_TOKEN = re.compile(r"\b(CORRECT|INCORRECT|WRONG)\b", re.IGNORECASE)


def parse_verdict(raw: str) -> str | None:
    """Map judge output to ``correct``/``incorrect``; ``None`` when unreadable."""
    text = raw.strip().strip(".*\"'`").strip()
    word = text.upper()
    if word == "CORRECT":
        return "correct"
    if word in ("WRONG", "INCORRECT"):
        return "incorrect"
    m = _VERDICT_TOKEN.search(raw)
    if m is None:
        return None
    return "correct" if m.group(1).upper() == "CORRECT" else "incorrect"


def judge_answer(item: QAItem, result: QAResult, judge: str, prompts: PromptSet,
                 provider: Provider) -> JudgeVerdict:
    if result.failed:
        return JudgeVerdict(result.question_id, judge, None, error="answer failed")
    call = prompts.render("judge", judge, question=item.question, reference=item.answer,
                          prediction=result.answer or "(no answer)")
    try:
        out = provider.complete(call, stage="judge")
    except ProviderError as exc:
        return JudgeVerdict(result.question_id, judge, None, error=f"{type(exc).__name__}: {exc}")
    verdict = parse_verdict(out.text)
    return JudgeVerdict(result.question_id, judge, verdict, out.text,
                        None if verdict else "unparseable verdict")


def accuracy_table(items: list[QAItem], verdicts: list[JudgeVerdict]) -> dict[str, dict]:
    """Per-type and overall ``{correct, answered, unscored, accuracy}`` for one judge.

    Unscored verdicts are excluded from denominators. Accuracy is ``None``
    when nothing was scored.
    """
    by_id = {v.question_id: v for v in verdicts}
    table: dict[str, dict] = {}
    for item in items:
        for key in (item.category, "overall"):
            row = table.setdefault(key, {"correct": 0, "answered": 0, "unscored": 0})
            v = by_id.get(item.question_id)
            if v is None or not v.scored:
                row["unscored"] += 1
            else:
                row["answered"] += 1
                row["correct"] += v.verdict == "correct"
    table.setdefault("overall", {"correct": 0, "answered": 0, "unscored": 0})
    for row in table.values():
        row["accuracy"] = row["correct"] / row["answered"] if row["answered"] else None
    return dict(sorted(table.items()))


def run_eval(
    conversation: Conversation,
    build: BuildResult,
    paradigm: ParadigmConfig,
    provider: Provider,
    prompts: PromptSet,
    judges: list[str] | tuple[str, ...],
    *,
    parallelism: int = 1,
    config_snapshot: dict | None = None,
):
    """Answer every QA item with the paradigm's answer path, then judge each answer.

    Questions run in parallel when ``parallelism > 1``; results are returned
    in question order regardless.
    """
    from structmem.harness.report import RunReport

    ledger = UsageLedger()
    p = provider.bind(ledger)
    items = conversation.qa_items

    def one(item: QAItem) -> tuple[QAResult, list[JudgeVerdict]]:
        if paradigm.paradigm == "graph":
            if build.graph is None:
                raise ValueError("graph paradigm evaluation needs a graph build")
            res = graph_answer(item.question, build.store, build.graph, prompts, p,
                               paradigm.retrieval, question_id=item.question_id)
        else:
            template = "qa_structmem" if paradigm.paradigm == "structmem" else "qa_flat"
            res = answer(item.question, build.store, prompts, p, paradigm.retrieval,
                         question_id=item.question_id, template=template)
        return res, [judge_answer(item, res, j, prompts, p) for j in judges]

    if parallelism > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            outcomes = list(pool.map(one, items))
    else:
        outcomes = [one(item) for item in items]

    results = [r for r, _ in outcomes]
    verdicts = [v for _, vs in outcomes for v in vs]
    accuracy = {j: accuracy_table(items, [v for v in verdicts if v.judge == j]) for j in judges}
    return RunReport(
        paradigm=paradigm.paradigm,
        conversations=[conversation.conversation_id],
        judges=list(judges),
        accuracy=accuracy,
        build_usage=build.ledger.to_dict(),
        eval_usage=ledger.to_dict(),
        utterances=build.utterance_count,
        cycles=len(build.cycles),
        question_types={q.question_id: q.category for q in items},
        results=[r.to_dict() for r in results],
        verdicts=[asdict(v) for v in verdicts],
        skipped={k: int(v) for k, v in sorted(conversation.skipped_qa.items())},
        failed_answers=sum(r.failed for r in results),
        config=config_snapshot or {"paradigm": paradigm.to_dict()},
    )
