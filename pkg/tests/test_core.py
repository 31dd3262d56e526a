from __future__ import annotations

from datetime import datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_store, random_unit
from oracles import brute_top_k, linear_event
from structmem.core import (
    EntryKind,
    MemoryEntry,
    MemoryStore,
    canonical_timestamp,
    cosine_similarity,
    format_entry,
    load_store,
    timestamp_seconds,
)
from structmem.errors import (
    CorruptRecord,
    DimensionMismatch,
    DuplicateId,
    InvalidEmbedding,
    MalformedTimestamp,
    VersionMismatch,
    ZeroVector,
)


def entry(i, ts="2023-05-08T13:56:00Z", vec=None, kind=EntryKind.FACTUAL, dim=4):
    if vec is None:
        vec = np.eye(dim, dtype=np.float32)[i % dim]
    return MemoryEntry(id=f"id{i:03d}", text=f"text {i}", kind=kind, timestamp=ts, embedding=vec)


class TestTimestamps:
    def test_canonical_forms(self):
        assert canonical_timestamp("2023-05-08T13:56:00Z") == "2023-05-08T13:56:00Z"
        assert canonical_timestamp("2023-05-08 13:56:00") == "2023-05-08T13:56:00Z"
        assert canonical_timestamp("2023-05-08T15:56:00+02:00") == "2023-05-08T13:56:00Z"
        assert canonical_timestamp("2023-05-08T13:56:00.999Z") == "2023-05-08T13:56:00Z"
        assert canonical_timestamp(datetime(2023, 5, 8, 13, 56)) == "2023-05-08T13:56:00Z"

    @pytest.mark.parametrize("bad", ["", "yesterday", "2023-13-01T00:00:00Z", 12])
    def test_malformed(self, bad):
        with pytest.raises(MalformedTimestamp):
            canonical_timestamp(bad)

    @given(st.datetimes(min_value=datetime(1971, 1, 1), max_value=datetime(2100, 1, 1),
                        timezones=st.just(timezone.utc)))
    def test_round_trip_seconds(self, dt):
        ts = canonical_timestamp(dt)
        assert canonical_timestamp(ts) == ts
        assert timestamp_seconds(ts) == int(dt.replace(microsecond=0).timestamp())


class TestEntryAndStore:
    def test_add_and_get(self):
        store = MemoryStore(4, "c")
        assert store.add_entries([entry(0), entry(1)]) == 2
        assert len(store) == 2 and "id000" in store
        assert store.get("id001").text == "text 1"

    def test_duplicate_rejected_atomically(self):
        store = MemoryStore(4)
        store.add_entries([entry(0)])
        with pytest.raises(DuplicateId):
            store.add_entries([entry(5), entry(0)])
        assert len(store) == 1 and "id005" not in store

    def test_duplicate_within_batch(self):
        with pytest.raises(DuplicateId):
            MemoryStore(4).add_entries([entry(1), entry(1)])

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            MemoryStore(4).add_entries([entry(0, vec=np.ones(3, dtype=np.float32))])

    def test_zero_and_nonfinite_embeddings(self):
        with pytest.raises(InvalidEmbedding):
            MemoryStore(4).add_entries([entry(0, vec=np.zeros(4))])
        with pytest.raises(InvalidEmbedding):
            MemoryStore(4).add_entries([entry(0, vec=np.array([1, np.nan, 0, 0]))])

    def test_embedding_stored_as_float32(self):
        e = entry(0, vec=np.array([0.1, 0.2, 0.3, 0.4], dtype=np.float64))
        assert e.embedding.dtype == np.float32

    def test_new_ids_are_sequential(self):
        store = MemoryStore(4, "conv")
        assert store.new_ids(2) == ["conv-000000", "conv-000001"]
        store.add_entries([entry(0)])
        assert store.new_ids(1) == ["conv-000001"]

    def test_sort_chronologically_uses_insertion_order_on_ties(self):
        store = MemoryStore(4)
        store.add_entries([entry(2, "2023-01-02T00:00:00Z"), entry(1, "2023-01-01T00:00:00Z"),
                           entry(0, "2023-01-02T00:00:00Z")])
        assert store.sort_chronologically(["id000", "id001", "id002"]) == ["id001", "id002", "id000"]

    def test_format_entry(self):
        assert format_entry(entry(0)) == "[2023-05-08T13:56:00Z] text 0"


class TestSimilarity:
    def test_cosine(self):
        assert cosine_similarity([1, 0], [1, 0]) == 1.0
        assert cosine_similarity([1, 0], [0, 2]) == 0.0
        with pytest.raises(ZeroVector):
            cosine_similarity([0, 0], [1, 0])
        with pytest.raises(DimensionMismatch):
            cosine_similarity([1, 0], [1, 0, 0])

    def test_tie_break_later_timestamp_then_smaller_id(self):
        v = np.array([1, 0, 0, 0], dtype=np.float32)
        store = MemoryStore(4)
        store.add_entries([
            MemoryEntry("b", "x", EntryKind.FACTUAL, "2023-01-01T00:00:00Z", embedding=v),
            MemoryEntry("a", "x", EntryKind.FACTUAL, "2023-01-01T00:00:00Z", embedding=v),
            MemoryEntry("c", "x", EntryKind.FACTUAL, "2023-01-02T00:00:00Z", embedding=v),
        ])
        assert [i for i, _ in store.top_k_similar(v, 3)] == ["c", "a", "b"]
        assert [i for i, _ in store.top_k_similar(v, 2)] == ["c", "a"]

    def test_top_k_edge_cases(self):
        store = MemoryStore(4)
        assert store.top_k_similar(np.ones(4), 3) == []
        store.add_entries([entry(0), entry(1)])
        assert store.top_k_similar(np.ones(4), 0) == []
        assert len(store.top_k_similar(np.ones(4), 10)) == 2
        with pytest.raises(ZeroVector):
            store.top_k_similar(np.zeros(4), 1)
        with pytest.raises(DimensionMismatch):
            store.top_k_similar(np.ones(3), 1)
        with pytest.raises(ValueError):
            store.top_k_similar(np.ones(4), -1)

    def test_unembedded_entries_are_not_ranked(self):
        store = MemoryStore(4)
        store.add_entries([MemoryEntry("x", "t", EntryKind.FACTUAL, "2023-01-01T00:00:00Z"), entry(0)])
        assert [i for i, _ in store.top_k_similar(np.ones(4), 5)] == ["id000"]

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 300), k=st.integers(0, 40),
           kind=st.sampled_from([None, *EntryKind]))
    def test_matches_brute_force(self, seed, n, k, kind):
        rng = np.random.default_rng(seed)
        store = random_store(rng, n, dim=8)
        query = random_unit(rng, 8)
        keep = (lambda e: True) if kind is None else (lambda e: e.kind is kind)
        got = store.top_k_similar(query, k, filter=None if kind is None else keep)
        want = brute_top_k(list(store), query, k, keep)
        assert [i for i, _ in got] == [i for i, _ in want]
        assert np.allclose([s for _, s in got], [s for _, s in want], atol=1e-12)


class TestEvents:
    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), n=st.integers(0, 200))
    def test_reconstruct_matches_linear_scan(self, seed, n):
        rng = np.random.default_rng(seed)
        store = random_store(rng, n, n_times=8)
        entries = list(store)
        for ts in {e.timestamp for e in entries} | {"1999-01-01T00:00:00Z"}:
            event = store.reconstruct_event(ts)
            assert event.timestamp == ts
            assert event.entries == linear_event(entries, ts)

    def test_reconstruct_accepts_equivalent_forms(self):
        store = MemoryStore(4)
        store.add_entries([entry(0, "2023-05-08T13:56:00Z")])
        assert store.reconstruct_event("2023-05-08 15:56:00+02:00").entries == ["id000"]
        assert store.reconstruct_event(datetime(2023, 5, 8, 13, 56) + timedelta(seconds=1)).entries == []


class TestPersistence:
    def test_round_trip_deep_equal(self, tmp_path):
        rng = np.random.default_rng(3)
        store = random_store(rng, 50)
        store.add_entries([MemoryEntry("plain", "no vector", "factual", "2023-01-01T00:00:00Z", speaker="A")])
        store.mark_consolidated(["plain"])
        path = store.persist(tmp_path / "s.jsonl")
        loaded = load_store(path)
        assert loaded == store
        for a in store:
            b = loaded.get(a.id)
            if a.embedding is not None:
                assert a.embedding.tobytes() == b.embedding.tobytes()
        assert loaded.persist(tmp_path / "t.jsonl").read_bytes() == path.read_bytes()
        q = random_unit(rng, 16)
        assert loaded.top_k_similar(q, 10) == store.top_k_similar(q, 10)

    def test_corrupt_line_reported(self, tmp_path):
        store = MemoryStore(4)
        store.add_entries([entry(0), entry(1)])
        path = store.persist(tmp_path / "s.jsonl")
        lines = path.read_text().splitlines()
        lines[2] = lines[2][:20]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(CorruptRecord) as info:
            load_store(path)
        assert info.value.line == 3

    def test_version_mismatch(self, tmp_path):
        path = MemoryStore(4).persist(tmp_path / "s.jsonl")
        path.write_text(path.read_text().replace('"version":1', '"version":99'))
        with pytest.raises(VersionMismatch):
            load_store(path)

    def test_not_a_store(self, tmp_path):
        path = tmp_path / "x.jsonl"
        path.write_text('{"hello": 1}\n')
        with pytest.raises(CorruptRecord):
            load_store(path)
