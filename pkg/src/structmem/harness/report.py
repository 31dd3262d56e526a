"""Run reports: structured JSON, an aligned comparison table, and cost curves."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from structmem.config import QUESTION_TYPES
from structmem.errors import IoFailure
from structmem.providers import CHAT_STAGES, StageUsage, UsageLedger

logger = logging.getLogger(__name__)

TYPE_COLUMNS = (("Multi", "multi_hop"), ("Open", "open_domain"), ("Single", "single_hop"),
                ("Temp", "temporal"))


@dataclass
class RunReport:
    paradigm: str
    conversations: list[str] = field(default_factory=list)
    judges: list[str] = field(default_factory=list)
    accuracy: dict[str, dict[str, dict]] = field(default_factory=dict)
    build_usage: dict[str, dict] = field(default_factory=dict)
    eval_usage: dict[str, dict] = field(default_factory=dict)
    utterances: int = 0
    cycles: int = 0
    question_types: dict[str, str] = field(default_factory=dict)
    results: list[dict] = field(default_factory=list)
    verdicts: list[dict] = field(default_factory=list)
    skipped: dict[str, int] = field(default_factory=dict)
    failed_answers: int = 0
    config: dict = field(default_factory=dict)
    label: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> RunReport:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})

    def build_ledger(self) -> UsageLedger:
        return UsageLedger.from_dict(self.build_usage)

    def build_chat_totals(self) -> StageUsage:
        return self.build_ledger().totals(CHAT_STAGES)

    def primary_accuracy(self) -> dict[str, dict]:
        return self.accuracy.get(self.judges[0], {}) if self.judges else {}

    def unscored(self) -> dict[str, int]:
        return {j: table.get("overall", {}).get("unscored", 0) for j, table in self.accuracy.items()}

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        try:
            path.write_text(
                json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n",
                encoding="utf-8",
            )
        except OSError as exc:
            raise IoFailure(f"cannot write report {path}: {exc}") from exc
        return path

    @classmethod
    def load(cls, path: str | Path) -> RunReport:
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except OSError as exc:
            raise IoFailure(f"cannot read report {path}: {exc}") from exc


def _merge_accuracy(a: dict[str, dict], b: dict[str, dict]) -> dict[str, dict]:
    out = {k: dict(v) for k, v in a.items()}
    for key, row in b.items():
        cur = out.setdefault(key, {"correct": 0, "answered": 0, "unscored": 0})
        for n in ("correct", "answered", "unscored"):
            cur[n] = cur.get(n, 0) + row.get(n, 0)
    for row in out.values():
        row["accuracy"] = row["correct"] / row["answered"] if row["answered"] else None
    return dict(sorted(out.items()))


def combine_reports(reports: list[RunReport]) -> RunReport:
    """Pool several per-conversation reports of one paradigm into one."""
    if not reports:
        raise ValueError("nothing to combine")
    paradigms = {r.paradigm for r in reports}
    if len(paradigms) != 1:
        raise ValueError(f"cannot combine reports of different paradigms: {sorted(paradigms)}")
    first = reports[0]
    build, evals = UsageLedger(), UsageLedger()
    out = RunReport(paradigm=first.paradigm, judges=list(first.judges), config=first.config,
                    label=first.label)
    for r in reports:
        if r.judges != first.judges:
            raise ValueError("reports were judged by different judge lists")
        out.conversations += r.conversations
        build.merge(UsageLedger.from_dict(r.build_usage))
        evals.merge(UsageLedger.from_dict(r.eval_usage))
        out.utterances += r.utterances
        out.cycles += r.cycles
        out.question_types.update(r.question_types)
        out.results += r.results
        out.verdicts += r.verdicts
        for k, v in r.skipped.items():
            out.skipped[k] = out.skipped.get(k, 0) + v
        out.failed_answers += r.failed_answers
        for j in r.judges:
            out.accuracy[j] = _merge_accuracy(out.accuracy.get(j, {}), r.accuracy.get(j, {}))
    out.build_usage, out.eval_usage = build.to_dict(), evals.to_dict()
    return out


def _pct(row: dict | None) -> str:
    if not row or row.get("accuracy") is None:
        return "-"
    return f"{100 * row['accuracy']:.2f}"


def _millions(n: int) -> str:
    return f"{n / 1e6:.3f}"


def table_rows(reports: list[RunReport]) -> list[list[str]]:
    header = ["Method", *[c for c, _ in TYPE_COLUMNS], "Overall", "In(M)", "Out(M)", "Sum(M)",
              "Calls", "Time(s)"]
    rows = [header]
    for r in reports:
        acc = r.primary_accuracy()
        usage = r.build_chat_totals()
        rows.append([
            r.label or r.paradigm,
            *[_pct(acc.get(t)) for _, t in TYPE_COLUMNS],
            _pct(acc.get("overall")),
            _millions(usage.input_tokens),
            _millions(usage.output_tokens),
            _millions(usage.total_tokens),
            str(usage.calls),
            f"{r.build_ledger().totals().wall_time:.1f}",
        ])
    return rows


def render_table(reports: list[RunReport]) -> str:
    """Aligned text table: accuracy (%) per question type under the first
    judge, then build-time chat tokens in millions, chat calls and wall time."""
    rows = table_rows(reports)
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = []
    for n, row in enumerate(rows):
        cells = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def render_accuracy_detail(report: RunReport) -> str:
    """Numerator/denominator per type for every judge."""
    lines = [f"{report.label or report.paradigm}: skipped {report.skipped or {}}, "
             f"failed answers {report.failed_answers}"]
    for judge, table in report.accuracy.items():
        parts = []
        for key in (*QUESTION_TYPES, "overall"):
            row = table.get(key)
            if row:
                parts.append(f"{key} {row['correct']}/{row['answered']} (unscored {row['unscored']})")
        lines.append(f"  {judge}: " + "; ".join(parts))
    return "\n".join(lines) + "\n"


def emit_report(report: RunReport, directory: str | Path, stem: str = "report") -> dict[str, str]:
    """Write ``<stem>.json`` and ``<stem>.txt`` under ``directory``."""
    directory = Path(directory)
    json_path = report.save(directory / f"{stem}.json")
    txt_path = directory / f"{stem}.txt"
    try:
        txt_path.write_text(render_table([report]) + "\n" + render_accuracy_detail(report), encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write {txt_path}: {exc}") from exc
    return {"report": json_path.name, "table": txt_path.name}
