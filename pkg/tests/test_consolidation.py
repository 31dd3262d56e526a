from __future__ import annotations

import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import FlakyProvider, random_store, random_unit
from oracles import brute_top_k, reference_cycle_count, reference_trigger_points
from structmem.consolidation import (
    ConsolidationBuffer,
    ConsolidationConfig,
    Consolidator,
    assemble_cross_context,
    select_seeds,
    should_consolidate,
)
from structmem.core import EntryKind, MemoryEntry, MemoryStore, canonical_timestamp
from structmem.errors import EmptyBuffer
from structmem.providers import MockProvider

T0 = 1_683_000_000  # 2023-05-02T04:00:00Z


def ts(seconds: int) -> str:
    from datetime import datetime, timezone

    return canonical_timestamp(datetime.fromtimestamp(seconds, timezone.utc))


def make_entry(store: MemoryStore, seconds: int, text: str, rng: np.random.Generator,
               kind=EntryKind.FACTUAL) -> MemoryEntry:
    e = MemoryEntry(store.new_ids(1)[0], text, kind, ts(seconds), embedding=random_unit(rng, store.dimension))
    store.add_entries([e])
    return e


def test_defaults():
    cfg = ConsolidationConfig()
    assert cfg.time_threshold_secs == 3600 and cfg.seed_k == 15
    with pytest.raises(ValueError):
        ConsolidationConfig(time_threshold_secs=0)
    with pytest.raises(ValueError):
        ConsolidationConfig(seed_k=-1)


class TestTrigger:
    def setup_method(self):
        self.rng = np.random.default_rng(0)
        self.store = MemoryStore(8)
        self.buffer = ConsolidationBuffer()
        self.cfg = ConsolidationConfig()

    def test_empty_buffer_never_fires(self):
        assert not should_consolidate(self.buffer, ts(T0 + 10**6), self.cfg)

    def test_strictly_greater_than_one_hour(self):
        self.buffer.add(make_entry(self.store, T0, "a", self.rng))
        assert not should_consolidate(self.buffer, ts(T0 + 3600), self.cfg)
        assert should_consolidate(self.buffer, ts(T0 + 3601), self.cfg)

    def test_measured_from_earliest_buffered(self):
        self.buffer.add(make_entry(self.store, T0, "a", self.rng))
        self.buffer.add(make_entry(self.store, T0 + 3000, "b", self.rng))
        assert should_consolidate(self.buffer, ts(T0 + 3700), self.cfg)

    def test_non_monotone_incoming_is_clamped(self, caplog):
        self.buffer.add(make_entry(self.store, T0, "a", self.rng))
        self.buffer.add(make_entry(self.store, T0 + 4000, "b", self.rng))
        assert should_consolidate(self.buffer, ts(T0 + 10), self.cfg)
        assert "non-monotone" in caplog.text


def _drive(stamps, threshold, prompts, seed=0):
    """Feed one entry per timestamp through a Consolidator; return fired indices and cycle count."""
    rng = np.random.default_rng(seed)
    mock = MockProvider(seed=seed, dimension=8)
    store = MemoryStore(8)
    cons = Consolidator(store, prompts, mock, ConsolidationConfig(time_threshold_secs=threshold, seed_k=3))
    fired = []
    for i, t in enumerate(stamps):
        if cons.before_utterance(ts(t)) is not None:
            fired.append(i)
        cons.add([make_entry(store, t, f"item {i} at {t}", rng)])
    cons.flush()
    return fired, len(cons.cycles), cons, store


def test_trigger_count_matches_reference_scan_on_1000_streams(prompts):
    rnd = random.Random(1234)
    for trial in range(1000):
        n = rnd.randint(0, 25)
        threshold = rnd.choice([3600, 3600, 60, 7200])
        t, stamps = T0, []
        for _ in range(n):
            t += rnd.choice([0, 0, 60, 600, 1800, 3599, 3600, 3601, 5000, 86400])
            stamps.append(t)
        fired, cycles, _, _ = _drive(stamps, threshold, prompts, seed=trial)
        assert fired == reference_trigger_points(stamps, threshold), (trial, stamps)
        assert cycles == reference_cycle_count(stamps, threshold), (trial, stamps)


def test_cycle_stores_one_synthesis_at_latest_buffered_time(prompts):
    rng = np.random.default_rng(5)
    mock = MockProvider(dimension=8)
    store = MemoryStore(8, "c")
    old = make_entry(store, T0, "Alice bought a red bike", rng)
    store.mark_consolidated([old.id])
    cons = Consolidator(store, prompts, mock)
    e1 = make_entry(store, T0 + 7200, "Alice rode her bike", rng)
    e2 = make_entry(store, T0 + 7300, "Alice fixed the bike chain", rng)
    cons.add([e1, e2])
    record = cons.flush()
    assert record.error is None and len(record.synthesis_ids) == 1
    synth = store.get(record.synthesis_ids[0])
    assert synth.kind is EntryKind.SYNTHESIS and synth.timestamp == e2.timestamp
    assert store.get(e1.id).consolidated and store.get(e2.id).consolidated
    assert len(cons.buffer) == 0
    assert mock.ledger.stage("consolidation").calls == 1
    assert record.seeds == [old.id] and record.supplementary == [old.id]
    assert record.buffered == [e1.id, e2.id]
    assert old.timestamp in synth.text
    assert record.template == "synthesis" and record.template_sha256 == prompts["synthesis"].sha256


def test_split_synthesis_stores_paragraphs(prompts):
    class Paragraphs(MockProvider):
        def complete(self, call, *, stage):
            out = super().complete(call, stage=stage)
            return type(out)("first link.\n\nsecond link.", out.input_tokens, out.output_tokens)

    rng = np.random.default_rng(1)
    store = MemoryStore(8)
    cons = Consolidator(store, prompts, Paragraphs(dimension=8), ConsolidationConfig(split_synthesis=True))
    cons.add([make_entry(store, T0, "x", rng)])
    record = cons.flush()
    assert [store.get(i).text for i in record.synthesis_ids] == ["first link.", "second link."]


def test_provider_failure_keeps_buffer_and_retries(prompts):
    flaky = FlakyProvider(lambda i, stage, kind: stage == "consolidation" and i == 0, dimension=8)
    rng = np.random.default_rng(2)
    store = MemoryStore(8)
    cons = Consolidator(store, prompts, flaky)
    e = make_entry(store, T0, "x", rng)
    cons.add([e])
    failed = cons.flush()
    assert failed.error and "injected" in failed.error
    assert cons.buffer.ids == [e.id] and not store.get(e.id).consolidated
    ok = cons.flush()
    assert ok.error is None and store.get(e.id).consolidated


def test_empty_buffer_query_rejected(prompts, mock):
    from structmem.consolidation import build_buffer_query

    with pytest.raises(EmptyBuffer):
        build_buffer_query(ConsolidationBuffer(), MemoryStore(mock.dimension), mock)


def _buffer_of(store: MemoryStore, ids) -> ConsolidationBuffer:
    buf = ConsolidationBuffer()
    buf.extend(store.get(i) for i in ids)
    return buf


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 250), k=st.integers(0, 30),
       include_synthesis=st.booleans())
def test_select_seeds_matches_filtered_brute_force(seed, n, k, include_synthesis):
    rng = np.random.default_rng(seed)
    store = random_store(rng, n, dim=8, n_times=10)
    ids = [e.id for e in store]
    buffered = set(rng.choice(ids, size=int(rng.integers(0, min(n, 20) + 1)), replace=False).tolist())
    buf = _buffer_of(store, [i for i in ids if i in buffered])
    query = random_unit(rng, 8)
    got = select_seeds(query, store, buf, k, include_synthesis)
    want = brute_top_k(list(store), query, k,
                       lambda e: e.id not in buffered and (include_synthesis or e.kind is not EntryKind.SYNTHESIS))
    assert [i for i, _ in got] == [i for i, _ in want]
    assert not buffered & {i for i, _ in got}


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 250), n_seeds=st.integers(0, 20))
def test_cross_context_is_sorted_buffer_plus_union_of_seed_events(seed, n, n_seeds):
    rng = np.random.default_rng(seed)
    store = random_store(rng, n, dim=8, n_times=12)
    entries = list(store)
    ids = [e.id for e in entries]
    buffered = rng.choice(ids, size=int(rng.integers(1, min(n, 15) + 1)), replace=False).tolist()
    buf = _buffer_of(store, buffered)
    others = [i for i in ids if i not in set(buffered)]
    seeds = rng.choice(others, size=min(n_seeds, len(others)), replace=False).tolist() if others else []

    ctx = assemble_cross_context(buf, seeds, store)
    order = {e.id: (e.timestamp, pos) for pos, e in enumerate(entries)}
    assert ctx.buffered == sorted(buffered, key=order.__getitem__)
    seed_times = {store.get(s).timestamp for s in seeds}
    expected = {e.id for e in entries if e.timestamp in seed_times} - set(buffered)
    assert set(ctx.supplementary) == expected
    assert len(ctx.supplementary) == len(expected)
    assert ctx.supplementary == sorted(expected, key=order.__getitem__)

    empty = assemble_cross_context(buf, [], store)
    assert empty.buffered == ctx.buffered and empty.supplementary == [] and empty.seeds == []


def test_context_truncation_drops_oldest(prompts):
    rng = np.random.default_rng(0)
    store = MemoryStore(8)
    history = [make_entry(store, T0 + 100 * i, f"h{i}", rng) for i in range(6)]
    current = make_entry(store, T0 + 10_000, "now", rng)
    ctx = assemble_cross_context(_buffer_of(store, [current.id]), [h.id for h in history], store,
                                 max_context_entries=4)
    assert ctx.truncated == 2
    assert ctx.supplementary == [h.id for h in history[2:]]
