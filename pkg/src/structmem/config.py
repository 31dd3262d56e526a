"""Run configuration: paradigm, retrieval, consolidation, provider and harness.

Precedence is CLI overrides > environment > config file > defaults.
Environment overrides use ``STRUCTMEM__<SECTION>__<KEY>`` (or
``STRUCTMEM__<KEY>`` for top-level keys).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import sys
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from structmem.consolidation import ConsolidationConfig
from structmem.errors import ConfigError
from structmem.providers import ProviderConfig
from structmem.retrieval import RetrievalConfig

PARADIGMS = ("flat", "graph", "structmem")
ENV_PREFIX = "STRUCTMEM__"

# LoCoMo integer codes; category 5 (adversarial) is skipped by default.
DEFAULT_CATEGORY_MAP = {"1": "multi_hop", "2": "temporal", "3": "open_domain", "4": "single_hop"}
DEFAULT_SKIP_CATEGORIES = ("5",)
QUESTION_TYPES = ("multi_hop", "open_domain", "single_hop", "temporal")

_RETRIEVAL_KEYS = {"entries": "entry_count", "synthesis": "synthesis_count",
                   "entry_count": "entry_count", "synthesis_count": "synthesis_count"}


@dataclass
class ParadigmConfig:
    paradigm: str = "structmem"
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    consolidation: ConsolidationConfig | None = field(default_factory=ConsolidationConfig)

    def __post_init__(self) -> None:
        if self.paradigm not in PARADIGMS:
            raise ConfigError(f"unknown paradigm {self.paradigm!r}; expected one of {PARADIGMS}")
        if self.paradigm == "structmem":
            if self.consolidation is None:
                self.consolidation = ConsolidationConfig()
        else:
            self.consolidation = None
            # flat and graph only have the entry circuit
            self.retrieval = RetrievalConfig(self.retrieval.entry_count, 0)

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any], paradigm: str | None = None) -> ParadigmConfig:
        paradigm = paradigm or data.get("paradigm", "structmem")
        if paradigm not in PARADIGMS:
            raise ConfigError(f"unknown paradigm {paradigm!r}; expected one of {PARADIGMS}")
        cons_raw = dict(data.get("consolidation") or {})
        if paradigm != "structmem" and cons_raw:
            key = sorted(cons_raw)[0]
            raise ConfigError(f"consolidation.{key} is only valid for paradigm 'structmem', not {paradigm!r}")
        retrieval = _build(RetrievalConfig, "retrieval", data.get("retrieval") or {}, _RETRIEVAL_KEYS)
        consolidation = _build(ConsolidationConfig, "consolidation", cons_raw) if paradigm == "structmem" else None
        return cls(paradigm=paradigm, retrieval=retrieval, consolidation=consolidation)

    def to_dict(self) -> dict:
        return {
            "paradigm": self.paradigm,
            "retrieval": dataclasses.asdict(self.retrieval),
            "consolidation": None if self.consolidation is None else dataclasses.asdict(self.consolidation),
        }


@dataclass
class HarnessConfig:
    category_map: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_CATEGORY_MAP))
    skip_categories: tuple[str, ...] = DEFAULT_SKIP_CATEGORIES
    judges: tuple[str, ...] = ("gpt-4o-mini",)
    parallelism: int = 1

    def __post_init__(self) -> None:
        self.category_map = {str(k): v for k, v in self.category_map.items()}
        bad = set(self.category_map.values()) - set(QUESTION_TYPES)
        if bad:
            raise ConfigError(f"category_map targets must be among {QUESTION_TYPES}, got {sorted(bad)}")
        self.skip_categories = tuple(str(c) for c in self.skip_categories)
        self.judges = tuple(self.judges)
        if self.parallelism < 1:
            raise ConfigError("harness.parallelism must be >= 1")


@dataclass
class RunConfig:
    paradigm: ParadigmConfig = field(default_factory=ParadigmConfig)
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    harness: HarnessConfig = field(default_factory=HarnessConfig)
    prompts_dir: str | None = None
    seed: int = 0
    mock_dimension: int = 256

    def to_dict(self) -> dict:
        return {
            "paradigm": self.paradigm.to_dict(),
            "provider": dataclasses.asdict(self.provider),
            "harness": {
                "category_map": dict(self.harness.category_map),
                "skip_categories": list(self.harness.skip_categories),
                "judges": list(self.harness.judges),
                "parallelism": self.harness.parallelism,
            },
            "prompts_dir": self.prompts_dir,
            "seed": self.seed,
            "mock_dimension": self.mock_dimension,
        }

    def to_mapping(self) -> dict:
        """Same content as :meth:`to_dict` in the layout ``load_config`` accepts."""
        data = self.to_dict()
        p = data.pop("paradigm")
        data["paradigm"] = p["paradigm"]
        data["retrieval"] = p["retrieval"]
        if p["consolidation"] is not None:
            data["consolidation"] = p["consolidation"]
        if data["prompts_dir"] is None:
            del data["prompts_dir"]
        return data

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _build(cls, section: str, raw: Mapping[str, Any], aliases: Mapping[str, str] | None = None):
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        target = (aliases or {}).get(key, key)
        if target not in names:
            raise ConfigError(f"unknown key {section}.{key}")
        kwargs[target] = _coerce(value, names[target].type, f"{section}.{key}")
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def _coerce(value: Any, type_name: Any, where: str) -> Any:
    t = str(type_name)
    try:
        if isinstance(value, str):
            if t.startswith("bool"):
                low = value.strip().lower()
                if low not in {"1", "0", "true", "false", "yes", "no"}:
                    raise ValueError(value)
                return low in {"1", "true", "yes"}
            if t.startswith("int"):
                return int(value)
            if t.startswith("float"):
                return float(value)
        return value
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot interpret {value!r} as {t}") from exc


def _merge(base: dict, overlay: Mapping[str, Any]) -> dict:
    out = dict(base)
    for key, value in overlay.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), Mapping):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def env_overrides(environ: Mapping[str, str] | None = None) -> dict:
    environ = os.environ if environ is None else environ
    out: dict[str, Any] = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        parts = [p.lower() for p in name[len(ENV_PREFIX):].split("__") if p]
        if not parts:
            continue
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return out


def read_config_file(path: str | Path | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid config {path}: {exc}") from exc


def load_config(
    path: str | Path | None = None,
    overrides: Mapping[str, Any] | None = None,
    environ: Mapping[str, str] | None = None,
    base: Mapping[str, Any] | None = None,
) -> RunConfig:
    """Layer defaults, ``base``, file, environment and explicit overrides into a RunConfig."""
    data = _merge(dict(base or {}), read_config_file(path))
    data = _merge(data, env_overrides(environ))
    data = _merge(data, overrides or {})
    known = {"paradigm", "retrieval", "consolidation", "provider", "harness", "prompts_dir", "seed",
             "mock_dimension"}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config key {unknown[0]!r}")
    paradigm = ParadigmConfig.from_mapping(data)
    provider = _build(ProviderConfig, "provider", data.get("provider") or {})
    harness_raw = dict(data.get("harness") or {})
    for key in ("judges", "skip_categories"):
        if isinstance(harness_raw.get(key), str):
            harness_raw[key] = [j.strip() for j in harness_raw[key].split(",") if j.strip()]
    harness = _build(HarnessConfig, "harness", harness_raw)
    try:
        seed = int(data.get("seed", 0))
        mock_dimension = int(data.get("mock_dimension", 256))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad seed or mock_dimension: {exc}") from exc
    return RunConfig(
        paradigm=paradigm,
        provider=provider,
        harness=harness,
        prompts_dir=data.get("prompts_dir"),
        seed=seed,
        mock_dimension=mock_dimension,
    )
