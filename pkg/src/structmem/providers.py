"""Language-model and embedding backends plus the per-stage usage ledger.

Two backends ship here: :class:`HTTPProvider` speaks the chat-completions /
embeddings JSON wire format, and :class:`MockProvider` is a deterministic,
hermetic stand-in used by the test-suite and ``--mock`` runs.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass

import httpx
import numpy as np

from structmem.errors import (
    EmptyText,
    HttpError,
    MalformedResponse,
    ProviderError,
    ProviderTimeout,
    RateLimited,
)

logger = logging.getLogger(__name__)

STAGES = (
    "extraction_fact",
    "extraction_rel",
    "consolidation",
    "graph_entity",
    "graph_entity_dedup",
    "graph_relation",
    "graph_relation_dedup",
    "embedding",
    "qa",
    "judge",
    "audit",
)
CHAT_STAGES = tuple(s for s in STAGES if s != "embedding")


def whitespace_tokens(text: str) -> int:
    return len(text.split())


@dataclass(frozen=True)
class ChatCall:
    system_prompt: str
    user_prompt: str
    model_name: str = ""
    temperature: float = 0.0
    # name of the prompt template that produced this call, e.g. "fact_extraction"
    kind: str = ""

    def __post_init__(self) -> None:
        if not self.user_prompt.strip():
            raise ValueError("user prompt must be non-empty")
        if not self.system_prompt.strip():
            raise ValueError("system prompt must be non-empty")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class Completion:
    text: str
    input_tokens: int
    output_tokens: int
    elapsed: float = 0.0


@dataclass
class StageUsage:
    input_tokens: int = 0
    output_tokens: int = 0
    calls: int = 0
    wall_time: float = 0.0

    @property
    def total_tokens(self) -> int:
        return self.input_tokens + self.output_tokens


class UsageLedger:
    """Thread-safe per-stage counters of tokens, calls and wall time."""

    def __init__(self) -> None:
        self._stages: dict[str, StageUsage] = {s: StageUsage() for s in STAGES}
        self._lock = threading.Lock()

    def record(
        self,
        stage: str,
        input_tokens: int,
        output_tokens: int,
        wall_time: float = 0.0,
        calls: int = 1,
    ) -> None:
        if stage not in self._stages:
            raise KeyError(f"unknown ledger stage {stage!r}")
        if min(input_tokens, output_tokens, calls) < 0 or wall_time < 0:
            raise ValueError("ledger increments must be non-negative")
        with self._lock:
            u = self._stages[stage]
            u.input_tokens += int(input_tokens)
            u.output_tokens += int(output_tokens)
            u.calls += int(calls)
            u.wall_time += float(wall_time)

    def stage(self, name: str) -> StageUsage:
        with self._lock:
            return copy.copy(self._stages[name])

    def totals(self, stages: Sequence[str] | None = None) -> StageUsage:
        names = STAGES if stages is None else stages
        out = StageUsage()
        with self._lock:
            for name in names:
                u = self._stages[name]
                out.input_tokens += u.input_tokens
                out.output_tokens += u.output_tokens
                out.calls += u.calls
                out.wall_time += u.wall_time
        return out

    def chat_calls(self) -> int:
        return self.totals(CHAT_STAGES).calls

    def merge(self, other: UsageLedger) -> None:
        for name, u in other.to_dict().items():
            self.record(name, u["input_tokens"], u["output_tokens"], u["wall_time"], u["calls"])

    def to_dict(self) -> dict[str, dict]:
        with self._lock:
            return {name: asdict(u) for name, u in self._stages.items()}

    @classmethod
    def from_dict(cls, data: dict[str, dict]) -> UsageLedger:
        ledger = cls()
        for name, u in data.items():
            ledger.record(name, u["input_tokens"], u["output_tokens"], u["wall_time"], u["calls"])
        return ledger

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, UsageLedger):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    __hash__ = None  # type: ignore[assignment]


@dataclass
class ProviderConfig:
    endpoint: str = "https://api.openai.com/v1"
    chat_model: str = "gpt-4o-mini"
    embedding_model: str = "text-embedding-3-small"
    dimension: int = 1536
    api_key_env: str = "OPENAI_API_KEY"
    timeout_secs: float = 60.0
    max_attempts: int = 5
    backoff_secs: float = 1.0
    max_backoff_secs: float = 30.0
    embed_batch_size: int = 64

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.embed_batch_size < 1:
            raise ValueError("embed_batch_size must be >= 1")
        if self.dimension < 1:
            raise ValueError("dimension must be >= 1")


def _normalize_rows(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    if np.any(norms == 0) or not np.all(np.isfinite(vectors)):
        raise MalformedResponse("embedding backend returned a zero or non-finite vector")
    return (vectors / norms).astype(np.float32)


class Provider:
    """Common surface: ``complete``, ``embed``, ``dimension``, ``ledger``."""

    dimension: int
    ledger: UsageLedger
    chat_model: str = ""

    def bind(self, ledger: UsageLedger) -> Provider:
        """Shallow copy of this provider that records into ``ledger``."""
        clone = copy.copy(self)
        clone.ledger = ledger
        return clone

    def complete(self, call: ChatCall, *, stage: str) -> Completion:
        raise NotImplementedError

    def embed(self, texts: Sequence[str], *, stage: str = "embedding") -> np.ndarray:
        raise NotImplementedError

    def embed_one(self, text: str, *, stage: str = "embedding") -> np.ndarray:
        return self.embed([text], stage=stage)[0]


# --- HTTP backend -------------------------------------------------------------


class HTTPProvider(Provider):
    """Chat-completions / embeddings client with capped exponential backoff."""

    RETRY_STATUSES = frozenset({429, 500, 502, 503, 504})

    def __init__(
        self,
        config: ProviderConfig,
        ledger: UsageLedger | None = None,
        *,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
        rng: random.Random | None = None,
        api_key: str | None = None,
    ):
        self.config = config
        self.dimension = config.dimension
        self.chat_model = config.chat_model
        self.ledger = ledger if ledger is not None else UsageLedger()
        self._sleep = sleep
        self._rng = rng or random.Random()
        key = api_key if api_key is not None else os.environ.get(config.api_key_env, "")
        headers = {"Content-Type": "application/json"}
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._client = httpx.Client(
            base_url=config.endpoint.rstrip("/"),
            headers=headers,
            timeout=config.timeout_secs,
            transport=transport,
        )

    def close(self) -> None:
        self._client.close()

    def _post(self, path: str, payload: dict) -> dict:
        cfg = self.config
        last: ProviderError | None = None
        for attempt in range(1, cfg.max_attempts + 1):
            try:
                resp = self._client.post(path, json=payload)
            except httpx.TimeoutException as exc:
                last = ProviderTimeout(f"{path} timed out after {cfg.timeout_secs}s")
                last.__cause__ = exc
            except httpx.HTTPError as exc:
                raise ProviderError(f"{path}: transport failure: {exc}") from exc
            else:
                if resp.status_code == 200:
                    try:
                        return resp.json()
                    except (json.JSONDecodeError, ValueError) as exc:
                        raise MalformedResponse(f"{path}: response is not JSON") from exc
                if resp.status_code not in self.RETRY_STATUSES:
                    raise HttpError(resp.status_code, resp.text)
                last = RateLimited(resp.text) if resp.status_code == 429 else HttpError(
                    resp.status_code, resp.text
                )
            if attempt < cfg.max_attempts:
                delay = min(cfg.max_backoff_secs, cfg.backoff_secs * 2 ** (attempt - 1))
                delay *= 0.5 + self._rng.random() / 2
                logger.warning("%s failed (%s); retry %d/%d in %.2fs",
                               path, last, attempt, cfg.max_attempts - 1, delay)
                self._sleep(delay)
        assert last is not None
        raise last

    def complete(self, call: ChatCall, *, stage: str) -> Completion:
        payload = {
            "model": call.model_name or self.config.chat_model,
            "temperature": call.temperature,
            "messages": [
                {"role": "system", "content": call.system_prompt},
                {"role": "user", "content": call.user_prompt},
            ],
        }
        start = time.perf_counter()
        data = self._post("/chat/completions", payload)
        elapsed = time.perf_counter() - start
        try:
            text = data["choices"][0]["message"]["content"] or ""
            usage = data["usage"]
            n_in = int(usage["prompt_tokens"])
            n_out = int(usage["completion_tokens"])
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise MalformedResponse(f"chat response missing fields: {exc}") from exc
        self.ledger.record(stage, n_in, n_out, elapsed)
        return Completion(text=text, input_tokens=n_in, output_tokens=n_out, elapsed=elapsed)

    def embed(self, texts: Sequence[str], *, stage: str = "embedding") -> np.ndarray:
        texts = list(texts)
        if not texts:
            raise EmptyText("nothing to embed")
        if any(not t.strip() for t in texts):
            raise EmptyText("cannot embed an empty string")
        out = []
        bs = self.config.embed_batch_size
        for i in range(0, len(texts), bs):
            chunk = texts[i : i + bs]
            start = time.perf_counter()
            data = self._post("/embeddings", {"model": self.config.embedding_model, "input": chunk})
            elapsed = time.perf_counter() - start
            try:
                rows = sorted(data["data"], key=lambda d: d["index"])
                vecs = np.asarray([r["embedding"] for r in rows], dtype=np.float64)
                n_in = int(data.get("usage", {}).get("prompt_tokens", 0))
            except (KeyError, TypeError, ValueError) as exc:
                raise MalformedResponse(f"embedding response missing fields: {exc}") from exc
            if vecs.shape != (len(chunk), self.dimension):
                raise MalformedResponse(
                    f"expected {len(chunk)}x{self.dimension} embeddings, got {vecs.shape}"
                )
            self.ledger.record(stage, n_in, 0, elapsed)
            out.append(_normalize_rows(vecs))
        return np.concatenate(out, axis=0)


# --- deterministic mock -------------------------------------------------------


class UnrecognizedPromptKind(ProviderError):
    pass


_SENTENCE_SPLIT = re.compile(r"(?<=[.!?])\s+")
_CAPITALIZED = re.compile(r"\b[A-Z][a-zA-Z]+(?:'s)?\b")
_WORD = re.compile(r"[a-z0-9]+")
_CANONICAL_TS = re.compile(r"\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}Z")
_ENTITY_STOP = frozenset(
    """I I'm I've I'd The A An On In At It It's We You He She They My Our Your His Her Their
    Yes No Oh Hey Hi Hello Thanks Thank That This These Those What When Where How Why Who Did
    Do Does And But So Just Wow Well Sure Also Really Great Good Nice Sounds Let Let's Have Has
    Had Is Are Was Were Be If Then There Here For With From By As To Of Or Not Me Us Them""".split()
)
_AUDIT_STOP = frozenset(
    "the and that with this from have has had was were are for you your said asked about "
    "shared other speaker mentioned into over also".split()
)

_QUESTION_STOP = _AUDIT_STOP | frozenset(
    "what which who whom whose when where why how did does was were will would could should "
    "is are can name kind".split()
)


def _tag(prompt: str, name: str) -> str:
    m = re.search(rf"<{name}>\n?(.*?)\n?</{name}>", prompt, re.DOTALL)
    return m.group(1).strip() if m else ""


def _json_list(raw: str) -> list:
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        return []
    return value if isinstance(value, list) else []


def _strip_ts_prefix(line: str) -> str:
    return re.sub(r"^\s*[-*]?\s*\[[^\]]*\]\s*", "", line).strip()


class MockProvider(Provider):
    """Hermetic provider with reproducible outputs for a given seed.

    ``embed`` hashes character trigrams into a signed bag-of-features vector
    and normalizes it. ``complete`` dispatches on ``ChatCall.kind`` and emits
    well-formed structured output for each shipped template. Tokens are
    whitespace-separated words. Latency is reported as zero.
    """

    def __init__(self, seed: int = 0, dimension: int = 256, ledger: UsageLedger | None = None):
        self.seed = int(seed)
        self.dimension = int(dimension)
        self.chat_model = "mock"
        self.ledger = ledger if ledger is not None else UsageLedger()
        self._key = hashlib.sha256(f"structmem-mock-{self.seed}".encode()).digest()[:16]
        self._features: dict[str, tuple[int, float]] = {}

    # -- embeddings -----------------------------------------------------------

    def _feature(self, gram: str) -> tuple[int, float]:
        hit = self._features.get(gram)
        if hit is not None:
            return hit
        h = hashlib.blake2b(gram.encode("utf-8"), digest_size=8, key=self._key).digest()
        v = int.from_bytes(h, "little")
        hit = self._features[gram] = (v % self.dimension, 1.0 if (v >> 63) & 1 else -1.0)
        return hit

    def _embed_text(self, text: str) -> np.ndarray:
        padded = f" {' '.join(text.lower().split())} "
        vec = np.zeros(self.dimension, dtype=np.float64)
        for i in range(len(padded) - 2):
            idx, sign = self._feature(padded[i : i + 3])
            vec[idx] += sign
        norm = np.linalg.norm(vec)
        if norm == 0:
            # every trigram cancelled out; fall back to a single fixed feature
            idx, sign = self._feature(padded)
            vec[idx] = sign
            norm = 1.0
        return vec / norm

    def embed(self, texts: Sequence[str], *, stage: str = "embedding") -> np.ndarray:
        texts = list(texts)
        if not texts:
            raise EmptyText("nothing to embed")
        if any(not isinstance(t, str) or not t.strip() for t in texts):
            raise EmptyText("cannot embed an empty string")
        vecs = np.stack([self._embed_text(t) for t in texts]).astype(np.float32)
        self.ledger.record(stage, sum(whitespace_tokens(t) for t in texts), 0, 0.0)
        return vecs

    # -- chat ---------------------------------------------------------------

    def complete(self, call: ChatCall, *, stage: str) -> Completion:
        handler = getattr(self, f"_respond_{call.kind}", None)
        if handler is None:
            logger.warning("mock provider: %s", UnrecognizedPromptKind(call.kind or "<none>"))
            text = "I have no specific information about that."
        else:
            text = handler(call.user_prompt)
        n_in = whitespace_tokens(call.system_prompt) + whitespace_tokens(call.user_prompt)
        n_out = whitespace_tokens(text)
        self.ledger.record(stage, n_in, n_out, 0.0)
        return Completion(text=text, input_tokens=n_in, output_tokens=n_out, elapsed=0.0)

    @staticmethod
    def _date(prompt: str) -> str:
        return _tag(prompt, "timestamp")[:10]

    def _respond_fact_extraction(self, prompt: str) -> str:
        speaker = _tag(prompt, "speaker")
        date = self._date(prompt)
        sentences = [s.strip() for s in _SENTENCE_SPLIT.split(_tag(prompt, "utterance")) if s.strip()]
        return json.dumps([f"{speaker} said on {date}: {s}" for s in sentences], ensure_ascii=False)

    def _respond_relational_extraction(self, prompt: str) -> str:
        speaker = _tag(prompt, "speaker")
        utterance = _tag(prompt, "utterance")
        words = re.sub(r"[^\w\s']", " ", utterance).split()
        if len(words) < 3:
            return "[]"
        verb = "asked the other speaker about" if "?" in utterance else "told the other speaker about"
        return json.dumps([f"{speaker} {verb} {' '.join(words[:6])}"], ensure_ascii=False)

    def _synthesis(self, prompt: str, cite: bool) -> str:
        buffered = [ln for ln in _tag(prompt, "buffer").splitlines() if ln.strip()]
        supplementary = [ln for ln in _tag(prompt, "supplementary").splitlines() if ln.strip()]
        stamps = [m.group(0) for ln in buffered if (m := _CANONICAL_TS.search(ln))]
        first, last = (stamps[0], stamps[-1]) if stamps else ("unknown", "unknown")
        latest = _strip_ts_prefix(buffered[-1]) if buffered else "nothing was recorded"
        parts = [f"Between {first} and {last}, {len(buffered)} events were recorded; most recently, {latest}."]
        seen: set[str] = set()
        for ln in supplementary:
            m = _CANONICAL_TS.search(ln)
            ts = m.group(0) if m else ""
            if ts in seen:
                continue
            seen.add(ts)
            if cite and ts:
                parts.append(f"This continues the event at {ts}: {_strip_ts_prefix(ln)}.")
            else:
                parts.append(f"This continues an earlier event: {_strip_ts_prefix(ln)}.")
        return " ".join(parts)

    def _respond_synthesis(self, prompt: str) -> str:
        return self._synthesis(prompt, cite=True)

    def _respond_synthesis_unconstrained(self, prompt: str) -> str:
        return self._synthesis(prompt, cite=False)

    def _respond_entity_extraction(self, prompt: str) -> str:
        speaker = _tag(prompt, "speaker")
        names = [speaker] if speaker else []
        for tok in _CAPITALIZED.findall(_tag(prompt, "utterance")):
            tok = tok[:-2] if tok.endswith("'s") else tok
            if tok not in _ENTITY_STOP and tok not in names:
                names.append(tok)
        return json.dumps(names, ensure_ascii=False)

    def _respond_entity_dedup(self, prompt: str) -> str:
        existing = [ln.strip() for ln in _tag(prompt, "existing_entities").splitlines() if ln.strip()]
        lookup = {e.lower(): e for e in existing}
        mapping = {}
        for name in _json_list(_tag(prompt, "new_entities")):
            if isinstance(name, str) and name.strip():
                mapping[name] = lookup.get(name.strip().lower(), name)
        return json.dumps(mapping, ensure_ascii=False)

    def _respond_relation_extraction(self, prompt: str) -> str:
        speaker = _tag(prompt, "speaker")
        triples = [
            {"subject": speaker, "relation": "mentioned", "object": e}
            for e in _json_list(_tag(prompt, "entities"))
            if isinstance(e, str) and e.lower() != speaker.lower()
        ]
        return json.dumps(triples, ensure_ascii=False)

    def _respond_relation_dedup(self, prompt: str) -> str:
        existing = {
            tuple(p.strip().lower() for p in ln.split("→"))
            for ln in _tag(prompt, "existing_relations").splitlines()
            if ln.count("→") == 2
        }
        keep = []
        for t in _json_list(_tag(prompt, "new_relations")):
            if not isinstance(t, dict):
                continue
            key = tuple(str(t.get(k, "")).strip().lower() for k in ("subject", "relation", "object"))
            if key not in existing:
                keep.append(t)
        return json.dumps(keep, ensure_ascii=False)

    def _respond_qa(self, prompt: str, blocks: tuple[str, ...]) -> str:
        """The context line sharing the most content words with the question;
        ties go to the earlier line, so rank order breaks them."""
        wanted = {w for w in _WORD.findall(_tag(prompt, "question").lower())
                  if len(w) >= 3 and w not in _QUESTION_STOP}
        best, best_score = None, -1
        for block in blocks:
            for ln in _tag(prompt, block).splitlines():
                body = _strip_ts_prefix(ln)
                if not body:
                    continue
                score = len(wanted & set(_WORD.findall(body.lower())))
                if score > best_score:
                    best, best_score = body, score
        return best if best is not None else "I don't know."

    def _respond_qa_structmem(self, prompt: str) -> str:
        return self._respond_qa(prompt, ("entries", "syntheses"))

    def _respond_qa_flat(self, prompt: str) -> str:
        return self._respond_qa(prompt, ("entries",))

    def _respond_qa_graph(self, prompt: str) -> str:
        return self._respond_qa(prompt, ("entries", "graph"))

    def _respond_judge(self, prompt: str) -> str:
        reference = _tag(prompt, "reference").lower()
        prediction = _tag(prompt, "prediction").lower()
        return "CORRECT" if reference in prediction else "WRONG"

    def _respond_audit_extraction(self, prompt: str) -> str:
        source = set(_WORD.findall(_tag(prompt, "dialogue").lower()))
        words = [w for w in _WORD.findall(_tag(prompt, "entry").lower())
                 if len(w) >= 3 and w not in _AUDIT_STOP]
        missing = [w for w in words if w not in source]
        grounded = not words or len(missing) * 2 <= len(words)
        return json.dumps({
            "verdict": "GROUNDED" if grounded else "HALLUCINATED",
            "reason": f"{len(words) - len(missing)}/{len(words)} content words found in source",
        })

    def _respond_audit_consolidation(self, prompt: str) -> str:
        context = _tag(prompt, "buffer") + "\n" + _tag(prompt, "supplementary")
        known = set(_CANONICAL_TS.findall(context))
        baseline = {s.strip() for s in _SENTENCE_SPLIT.split(_tag(prompt, "summary_a")) if s.strip()}
        links = []
        for sentence in _SENTENCE_SPLIT.split(_tag(prompt, "summary_b")):
            sentence = sentence.strip()
            if not sentence or sentence in baseline:
                continue
            cited = _CANONICAL_TS.findall(sentence)
            spurious = any(ts not in known for ts in cited)
            links.append({
                "link": sentence,
                "spurious": spurious,
                "reason": "cites a timestamp absent from the context" if spurious else "supported",
            })
        return json.dumps({"links": links}, ensure_ascii=False)
