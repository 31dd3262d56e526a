"""Event-bound conversational memory with time-batched cross-event consolidation.

Utterances are turned into factual and relational entries anchored to their
timestamp; entries sharing a timestamp form an event. Periodically the
buffered events are linked to semantically related history in a single
synthesis call. Flat and graph memories are included as baselines, together
with a harness that measures build cost and judged QA accuracy.
"""

from structmem.core import EntryKind, Event, MemoryEntry, MemoryStore, load_store
from structmem.providers import HTTPProvider, MockProvider, ProviderConfig, UsageLedger

__version__ = "0.1.0"

__all__ = [
    "EntryKind", "Event", "HTTPProvider", "MemoryEntry", "MemoryStore", "MockProvider",
    "ProviderConfig", "UsageLedger", "load_store",
]
