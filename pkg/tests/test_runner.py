from __future__ import annotations

import numpy as np
import pytest

from conftest import FlakyProvider
from oracles import containment_correct, reference_cycle_count, seconds
from structmem.config import ParadigmConfig
from structmem.harness.dataset import load_dataset
from structmem.harness.runner import (
    BuildResult,
    JudgeVerdict,
    accuracy_table,
    parse_verdict,
    read_cost_curve,
    run_build,
    run_eval,
)
from structmem.providers import MockProvider


@pytest.fixture(scope="module")
def small():
    return load_dataset("synthetic_small")[0]


def expected_cycles(conv) -> int:
    return reference_cycle_count([seconds(u.timestamp) for u in conv.utterances()], 3600)


@pytest.mark.parametrize("paradigm,formula", [
    ("flat", lambda n, c: n), ("structmem", lambda n, c: 2 * n + c), ("graph", lambda n, c: 5 * n)])
def test_call_formulas_on_small_fixture(small, prompts, paradigm, formula):
    build = run_build(small, ParadigmConfig(paradigm=paradigm), MockProvider(dimension=64), prompts)
    n, c = len(small.utterances()), expected_cycles(small)
    assert build.ledger.chat_calls() == formula(n, c)
    assert len(build.cost_curve) == n
    assert build.cost_curve[-1]["chat_calls"] == build.ledger.chat_calls()
    if paradigm == "structmem":
        assert len(build.cycles) == c == 2


def test_build_is_deterministic_and_saves(small, prompts, tmp_path):
    a = run_build(small, ParadigmConfig(), MockProvider(seed=3, dimension=32), prompts)
    b = run_build(small, ParadigmConfig(), MockProvider(seed=3, dimension=32), prompts)
    a.save(tmp_path / "a")
    b.save(tmp_path / "b")
    for name in ("store.jsonl", "build_ledger.json", "cost_curve.csv", "cycles.jsonl", "build.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    loaded = BuildResult.load(tmp_path / "a")
    assert loaded.store == a.store and loaded.ledger == a.ledger
    assert len(read_cost_curve(tmp_path / "a" / "cost_curve.csv")) == 20


def test_graph_build_round_trip(small, prompts, tmp_path):
    build = run_build(small, ParadigmConfig(paradigm="graph"), MockProvider(dimension=32), prompts)
    build.save(tmp_path)
    assert BuildResult.load(tmp_path).graph == build.graph


def test_provider_failure_is_recorded_and_build_continues(small, prompts):
    flaky = FlakyProvider(lambda i, stage, kind: stage == "extraction_fact" and i == 3, dimension=16)
    build = run_build(small, ParadigmConfig(paradigm="flat"), flaky, prompts)
    assert len(build.failures) == 1 and build.failures[0]["turn"] == 3
    clean = run_build(small, ParadigmConfig(paradigm="flat"), MockProvider(dimension=16), prompts)
    assert len(build.cost_curve) == 20 and len(build.store) < len(clean.store)
    assert build.ledger.chat_calls() == 19


@pytest.mark.parametrize("paradigm", ["flat", "structmem", "graph"])
def test_mock_judge_matches_containment_oracle(small, prompts, paradigm):
    cfg = ParadigmConfig(paradigm=paradigm)
    mock = MockProvider(dimension=64)
    build = run_build(small, cfg, mock, prompts)
    report = run_eval(small, build, cfg, mock, prompts, ["j1"], parallelism=4)
    answers = {r["question_id"]: r["answer"] for r in report.results}
    oracle = {q.question_id: containment_correct(q.answer, answers[q.question_id]) for q in small.qa_items}
    got = {v["question_id"]: v["verdict"] == "correct" for v in report.verdicts}
    assert got == oracle
    table = report.accuracy["j1"]
    assert table["overall"]["answered"] == len(small.qa_items)
    assert table["overall"]["correct"] == sum(oracle.values())
    for category, count in small.type_counts().items():
        assert table[category]["answered"] + table[category]["unscored"] == count
    assert report.skipped == {"5": 1}
    assert report.eval_usage["judge"]["calls"] == len(small.qa_items)
    assert report.eval_usage["qa"]["calls"] == len(small.qa_items)


def test_parallel_eval_equals_serial(small, prompts):
    cfg = ParadigmConfig()
    build = run_build(small, cfg, MockProvider(dimension=32), prompts)
    serial = run_eval(small, build, cfg, MockProvider(dimension=32), prompts, ["a", "b"])
    parallel = run_eval(small, build, cfg, MockProvider(dimension=32), prompts, ["a", "b"], parallelism=8)
    assert serial.verdicts == parallel.verdicts and serial.accuracy == parallel.accuracy


def test_zero_questions_gives_empty_report(small, prompts):
    conv = load_dataset("synthetic_small")[0]
    conv.qa_items = []
    cfg = ParadigmConfig(paradigm="flat")
    build = run_build(conv, cfg, MockProvider(dimension=16), prompts)
    report = run_eval(conv, build, cfg, MockProvider(dimension=16), prompts, ["j"])
    assert report.results == [] and report.accuracy["j"]["overall"]["accuracy"] is None


def test_failed_answers_are_unscored(small, prompts):
    cfg = ParadigmConfig(paradigm="flat")
    build = run_build(small, cfg, MockProvider(dimension=16), prompts)
    flaky = FlakyProvider(lambda i, stage, kind: stage == "qa" and i == 0, dimension=16)
    report = run_eval(small, build, cfg, flaky, prompts, ["j"])
    assert report.failed_answers == 1
    overall = report.accuracy["j"]["overall"]
    assert overall["unscored"] == 1 and overall["answered"] == 9


@pytest.mark.parametrize("raw,want", [
    ("CORRECT", "correct"), ("wrong", "incorrect"), ("**Incorrect**", "incorrect"),
    ("The answer is CORRECT.", "correct"), ("incorrectly phrased but WRONG", "incorrect"),
    ("maybe", None), ("", None)])
def test_parse_verdict(raw, want):
    assert parse_verdict(raw) == want


def test_accuracy_table_by_hand(small):
    items = small.qa_items[:4]
    verdicts = [JudgeVerdict(items[0].question_id, "j", "correct"),
                JudgeVerdict(items[1].question_id, "j", "incorrect"),
                JudgeVerdict(items[2].question_id, "j", None, error="x")]
    table = accuracy_table(items, verdicts)
    assert table["overall"] == {"correct": 1, "answered": 2, "unscored": 2, "accuracy": 0.5}
    assert np.isclose(table["single_hop"]["accuracy"], 0.5)
