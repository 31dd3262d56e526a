from __future__ import annotations

import json

import pytest

from structmem.config import ParadigmConfig
from structmem.errors import IoFailure
from structmem.harness.dataset import load_dataset
from structmem.harness.report import RunReport, combine_reports, emit_report, render_table, table_rows
from structmem.harness.runner import run_build, run_eval
from structmem.providers import CHAT_STAGES, MockProvider


@pytest.fixture(scope="module")
def reports(prompts):
    conv = load_dataset("synthetic_small")[0]
    out = {}
    for paradigm in ("flat", "graph", "structmem"):
        cfg = ParadigmConfig(paradigm=paradigm)
        mock = MockProvider(dimension=32)
        out[paradigm] = run_eval(conv, run_build(conv, cfg, mock, prompts), cfg, mock, prompts, ["j1", "j2"])
    return out


def test_round_trip(reports, tmp_path):
    for r in reports.values():
        path = r.save(tmp_path / f"{r.paradigm}.json")
        loaded = RunReport.load(path)
        assert json.dumps(loaded.to_dict(), sort_keys=True) == json.dumps(
            json.loads(path.read_text()), sort_keys=True)
        assert loaded.accuracy == r.accuracy and loaded.verdicts == r.verdicts
        assert loaded.build_ledger() == r.build_ledger()
        assert loaded.save(tmp_path / "again.json").read_bytes() == path.read_bytes()


def test_load_missing_report(tmp_path):
    with pytest.raises(IoFailure):
        RunReport.load(tmp_path / "nope.json")


def test_table_columns_and_units(reports):
    rows = table_rows(list(reports.values()))
    assert rows[0] == ["Method", "Multi", "Open", "Single", "Temp", "Overall", "In(M)", "Out(M)",
                       "Sum(M)", "Calls", "Time(s)"]
    assert [r[0] for r in rows[1:]] == ["flat", "graph", "structmem"]
    for row, r in zip(rows[1:], reports.values()):
        usage = r.build_ledger().totals(CHAT_STAGES)
        assert row[6] == f"{usage.input_tokens / 1e6:.3f}"
        assert row[8] == f"{usage.total_tokens / 1e6:.3f}"
        assert row[9] == str(usage.calls)
        overall = r.primary_accuracy()["overall"]
        assert row[5] == f"{100 * overall['correct'] / overall['answered']:.2f}"
    assert int(rows[3][9]) < int(rows[2][9])
    text = render_table(list(reports.values()))
    assert len(text.splitlines()) == 5 and len({len(line) for line in text.splitlines()[:2]}) == 1


def test_missing_type_rendered_as_dash():
    r = RunReport(paradigm="flat", judges=["j"], accuracy={"j": {"overall": {"accuracy": None}}})
    assert table_rows([r])[1][1:6] == ["-"] * 5


def test_combine_reports(reports):
    r = reports["flat"]
    both = combine_reports([r, r])
    assert both.utterances == 2 * r.utterances
    assert both.accuracy["j1"]["overall"]["answered"] == 2 * r.accuracy["j1"]["overall"]["answered"]
    assert both.accuracy["j1"]["overall"]["accuracy"] == r.accuracy["j1"]["overall"]["accuracy"]
    assert both.build_ledger().chat_calls() == 2 * r.build_ledger().chat_calls()
    assert both.skipped == {"5": 2}
    with pytest.raises(ValueError):
        combine_reports([reports["flat"], reports["graph"]])


def test_emit_report(reports, tmp_path):
    written = emit_report(reports["structmem"], tmp_path, "report")
    assert written == {"report": "report.json", "table": "report.txt"}
    text = (tmp_path / "report.txt").read_text()
    assert "structmem" in text and "j2" in text and "skipped {'5': 1}" in text
