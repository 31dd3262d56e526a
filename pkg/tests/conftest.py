from __future__ import annotations

import numpy as np
import pytest

from structmem.core import EntryKind, MemoryEntry, MemoryStore
from structmem.prompts import PromptSet
from structmem.providers import MockProvider


@pytest.fixture(scope="session")
def prompts() -> PromptSet:
    return PromptSet.load()


@pytest.fixture
def mock() -> MockProvider:
    return MockProvider(seed=0, dimension=64)


def random_unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return (v / np.linalg.norm(v)).astype(np.float32)


def random_store(rng: np.random.Generator, n: int, dim: int = 16, n_times: int = 20,
                 duplicate_rate: float = 0.1) -> MemoryStore:
    """Store with random unit vectors, clustered timestamps and some exact
    duplicate vectors so similarity ties occur."""
    store = MemoryStore(dim, "fz")
    kinds = list(EntryKind)
    times = [f"2023-01-{1 + i // 24:02d}T{i % 24:02d}:00:00Z" for i in range(n_times)]
    vectors: list[np.ndarray] = []
    entries = []
    for i in range(n):
        if vectors and rng.random() < duplicate_rate:
            vec = vectors[int(rng.integers(len(vectors)))].copy()
        else:
            vec = random_unit(rng, dim)
        vectors.append(vec)
        entries.append(MemoryEntry(
            id=f"e{int(rng.integers(10**6)):06d}-{i}",
            text=f"entry {i}",
            kind=kinds[int(rng.integers(3))],
            timestamp=times[int(rng.integers(n_times))],
            embedding=vec,
        ))
    store.add_entries(entries)
    return store


class FlakyProvider(MockProvider):
    """Mock provider that raises ProviderError on selected chat calls.

    ``fail_on`` is a predicate over ``(call_index, stage, kind)`` where
    ``call_index`` counts every chat call made through this instance.
    """

    def __init__(self, fail_on, seed: int = 0, dimension: int = 64):
        super().__init__(seed=seed, dimension=dimension)
        self.fail_on = fail_on
        self.calls = {"n": 0}

    def complete(self, call, *, stage):
        from structmem.errors import ProviderError

        index = self.calls["n"]
        self.calls["n"] += 1
        if self.fail_on(index, stage, call.kind):
            raise ProviderError(f"injected failure at call {index} ({stage})")
        return super().complete(call, stage=stage)


# --- acceptance summary -------------------------------------------------------------

_CRITERIA: dict[int, tuple[str, list[str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    number, title = marker
    outcomes = _CRITERIA.setdefault(number, (title, []))[1]
    if report.when == "call" or report.outcome != "passed":
        outcomes.append(report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, outcomes = _CRITERIA[number]
        ok = outcomes and all(o == "passed" for o in outcomes)
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}")
