"""Command-line entry point: ``structmem build|eval|audit|report``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import re
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from structmem import __version__
from structmem.config import RunConfig, load_config
from structmem.errors import ConfigError, DatasetParseError, PromptError, StructMemError
from structmem.harness.agreement import agreement_stats, verdict_sets
from structmem.harness.audit import audit_consolidation_fidelity, audit_extraction_fidelity, mean_rate
from structmem.harness.dataset import BUNDLED, Conversation, load_dataset
from structmem.harness.report import RunReport, combine_reports, emit_report, render_table
from structmem.harness.runner import BuildResult, run_build, run_eval
from structmem.prompts import PromptSet
from structmem.providers import HTTPProvider, MockProvider, Provider, UsageLedger

logger = logging.getLogger("structmem.cli")

MANIFEST = "manifest.json"
SWEEP_KEYS = {"entries": ("retrieval", "entry_count"), "synthesis": ("retrieval", "synthesis_count"),
              "seed_k": ("consolidation", "seed_k")}


class UsageError(StructMemError):
    """Bad invocation; maps to exit code 2."""


# --- helpers ------------------------------------------------------------------------


def _now(mock: bool) -> str:
    """Wall clock for manifests; pinned under SOURCE_DATE_EPOCH or --mock."""
    if "SOURCE_DATE_EPOCH" in os.environ:
        epoch = int(os.environ["SOURCE_DATE_EPOCH"])
    elif mock:
        epoch = 0
    else:
        epoch = int(time.time())
    return datetime.fromtimestamp(epoch, timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


_PLACEHOLDERS = {"--out": "<out>", "--store": "<store>"}


def _redacted_argv(argv: list[str]) -> list[str]:
    """Command line with run directories replaced, so reruns elsewhere match."""
    out, pending = [], None
    for arg in argv:
        flag, sep, _ = arg.partition("=")
        if pending is not None:
            out.append(pending)
            pending = None
        elif arg in _PLACEHOLDERS:
            out.append(arg)
            pending = _PLACEHOLDERS[arg]
        elif sep and flag in _PLACEHOLDERS:
            out.append(f"{flag}={_PLACEHOLDERS[flag]}")
        else:
            out.append(arg)
    return out


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _dataset_fingerprint(dataset: str) -> dict:
    if dataset in BUNDLED:
        from importlib import resources
        raw = (resources.files("structmem") / "data" / BUNDLED[dataset]).read_bytes()
        return {"path": dataset, "sha256": hashlib.sha256(raw).hexdigest()}
    return {"path": dataset, "sha256": _sha256_file(Path(dataset))}


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def write_manifest(out: Path, *, subcommand: str, argv: list[str], config: RunConfig, prompts: PromptSet,
                   mock: bool, inputs: dict, outputs: dict, started: str) -> Path:
    manifest = {
        "tool_version": __version__,
        "subcommand": subcommand,
        "command": _redacted_argv(argv),
        "config": config.to_dict(),
        "config_hash": config.hash(),
        "prompt_hashes": prompts.hashes(),
        "seed": config.seed,
        "mock": mock,
        "embedding_dimension": config.mock_dimension if mock else config.provider.dimension,
        "started_at": started,
        "finished_at": _now(mock),
        "inputs": inputs,
        "outputs": outputs,
    }
    path = out / MANIFEST
    _write_json(path, manifest)
    return path


def read_manifest(run_dir: Path) -> dict:
    path = run_dir / MANIFEST
    if not path.is_file():
        raise UsageError(f"no {MANIFEST} in {run_dir}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise StructMemError(f"corrupt manifest {path}: {exc}") from exc


def _inside(run_dir: Path, rel: str) -> Path:
    path = (run_dir / rel).resolve()
    if not path.is_relative_to(run_dir.resolve()):
        raise StructMemError(f"manifest in {run_dir} points outside the run directory: {rel}")
    return path


def _safe_dirname(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", name) or "conversation"


def _overrides(args: argparse.Namespace) -> dict:
    over: dict = {}
    if getattr(args, "paradigm", None):
        over["paradigm"] = args.paradigm
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "entries", None) is not None:
        over.setdefault("retrieval", {})["entry_count"] = args.entries
    if getattr(args, "synthesis", None) is not None:
        over.setdefault("retrieval", {})["synthesis_count"] = args.synthesis
    if getattr(args, "judges", None):
        over.setdefault("harness", {})["judges"] = args.judges
    if getattr(args, "parallelism", None) is not None:
        over.setdefault("harness", {})["parallelism"] = args.parallelism
    if getattr(args, "prompts_dir", None):
        over["prompts_dir"] = args.prompts_dir
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        node = over
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return over


def make_provider(config: RunConfig, mock: bool) -> Provider:
    if mock:
        return MockProvider(seed=config.seed, dimension=config.mock_dimension)
    if not os.environ.get(config.provider.api_key_env):
        raise ConfigError(f"environment variable {config.provider.api_key_env} is not set (or use --mock)")
    return HTTPProvider(config.provider)


def _select(conversations: list[Conversation], wanted: list[str] | None) -> list[Conversation]:
    if not wanted:
        return conversations
    by_id = {c.conversation_id: c for c in conversations}
    missing = [w for w in wanted if w not in by_id]
    if missing:
        raise UsageError(f"conversation(s) not in dataset: {', '.join(missing)}; "
                         f"available: {', '.join(by_id)}")
    return [by_id[w] for w in wanted]


def _load_conversations(dataset: str, config: RunConfig, wanted: list[str] | None) -> list[Conversation]:
    convs = load_dataset(dataset, category_map=config.harness.category_map,
                         skip_categories=config.harness.skip_categories)
    return _select(convs, wanted)


def _build_all(conversations, config: RunConfig, provider: Provider, prompts: PromptSet,
               out: Path, prefix: str = "") -> tuple[list[BuildResult], dict]:
    builds, outputs = [], {}
    for conv in conversations:
        sub = _safe_dirname(conv.conversation_id)
        rel = f"{prefix}{sub}"
        logger.info("building %s with %s", conv.conversation_id, config.paradigm.paradigm)
        result = run_build(conv, config.paradigm, provider, prompts)
        files = result.save(out / rel)
        outputs[conv.conversation_id] = {k: f"{rel}/{v}" for k, v in sorted(files.items())}
        if result.failures:
            logger.warning("%s: %d utterance(s) failed", conv.conversation_id, len(result.failures))
        builds.append(result)
    return builds, outputs


# --- subcommands --------------------------------------------------------------------


def cmd_build(args: argparse.Namespace, argv: list[str]) -> int:
    config = load_config(args.config, _overrides(args))
    started = _now(args.mock)
    conversations = _load_conversations(args.dataset, config, args.conversation)
    provider = make_provider(config, args.mock)
    prompts = PromptSet.load(config.prompts_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    builds, outputs = _build_all(conversations, config, provider, prompts, out)
    write_manifest(out, subcommand="build", argv=argv, config=config, prompts=prompts, mock=args.mock,
                   inputs={"dataset": _dataset_fingerprint(args.dataset),
                           "conversations": [c.conversation_id for c in conversations]},
                   outputs={"builds": outputs}, started=started)
    for b in builds:
        chat = b.ledger.totals()
        print(f"{b.conversation_id}: {b.paradigm} {b.utterance_count} utterances, "
              f"{b.ledger.chat_calls()} chat calls, {len(b.cycles)} cycles, {len(b.store)} entries, "
              f"{chat.total_tokens} tokens")
    return 0


def _parse_sweep(sweep: str | None, paradigm: str) -> tuple[str | None, list]:
    if not sweep:
        return None, [None]
    key, sep, raw = sweep.partition("=")
    if not sep or key not in SWEEP_KEYS:
        raise UsageError(f"--sweep expects one of {sorted(SWEEP_KEYS)}=v1,v2,..., got {sweep!r}")
    try:
        values = [int(v) for v in raw.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--sweep values must be integers: {raw!r}") from exc
    if not values:
        raise UsageError("--sweep needs at least one value")
    if key in ("synthesis", "seed_k") and paradigm != "structmem":
        raise UsageError(f"--sweep {key} only applies to the structmem paradigm, not {paradigm!r}")
    return key, values


def cmd_eval(args: argparse.Namespace, argv: list[str]) -> int:
    build_dir = Path(args.store)
    if not build_dir.is_dir():
        raise UsageError(f"store directory {build_dir} does not exist")
    build_manifest = read_manifest(build_dir)
    if build_manifest.get("subcommand") != "build":
        raise UsageError(f"{build_dir} is not a build run directory")
    mock = args.mock or bool(build_manifest.get("mock"))
    base = _config_from_manifest(build_manifest).to_mapping()
    config = load_config(args.config, _overrides(args), base=base)
    if mock and config.seed != build_manifest.get("seed"):
        logger.warning("mock seed %s differs from the build's seed %s; embeddings will not match",
                       config.seed, build_manifest.get("seed"))
    dataset = args.dataset or build_manifest["inputs"]["dataset"]["path"]
    wanted = list(build_manifest["outputs"]["builds"])
    conversations = _load_conversations(dataset, config, args.conversation or wanted)
    provider = make_provider(config, mock)
    prompts = PromptSet.load(config.prompts_dir)
    started = _now(mock)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sweep_key, values = _parse_sweep(args.sweep, config.paradigm.paradigm)

    builds: dict[str, BuildResult] = {}
    for conv in conversations:
        if conv.conversation_id not in build_manifest["outputs"]["builds"]:
            raise UsageError(f"{build_dir} has no build for conversation {conv.conversation_id}")
        store_rel = build_manifest["outputs"]["builds"][conv.conversation_id]["store"]
        builds[conv.conversation_id] = BuildResult.load(_inside(build_dir, str(Path(store_rel).parent)))

    outputs: dict = {"reports": [], "tables": [], "agreement": [], "rebuilds": {}}
    if sweep_key == "seed_k":
        logger.warning("sweeping seed_k changes what consolidation writes; rebuilding each store per value")
    for value in values:
        cfg = config
        stem = "report"
        if sweep_key is not None:
            section, field_name = SWEEP_KEYS[sweep_key]
            cfg = load_config(None, {section: {field_name: value}}, environ={}, base=config.to_mapping())
            stem = f"report-{sweep_key}-{value}"
        current = builds
        if sweep_key == "seed_k":
            rebuilt, rebuild_outputs = _build_all(conversations, cfg, provider, prompts, out,
                                                  prefix=f"builds/seed_k-{value}/")
            current = {b.conversation_id: b for b in rebuilt}
            outputs["rebuilds"][str(value)] = rebuild_outputs
        per_conv = [
            run_eval(conv, current[conv.conversation_id], cfg.paradigm, provider, prompts,
                     cfg.harness.judges, parallelism=cfg.harness.parallelism, config_snapshot=cfg.to_dict())
            for conv in conversations
        ]
        report = combine_reports(per_conv)
        report.label = cfg.paradigm.paradigm if sweep_key is None else f"{cfg.paradigm.paradigm} {sweep_key}={value}"
        files = emit_report(report, out, stem)
        outputs["reports"].append(files["report"])
        outputs["tables"].append(files["table"])
        if len(cfg.harness.judges) >= 2:
            agreement = agreement_stats(verdict_sets(report.verdicts))
            name = f"agreement{stem[len('report'):]}.json"
            _write_json(out / name, agreement.to_dict())
            outputs["agreement"].append(name)
        print(render_table([report]), end="")
    write_manifest(out, subcommand="eval", argv=argv, config=config, prompts=prompts, mock=mock,
                   inputs={"dataset": _dataset_fingerprint(dataset),
                           "build_manifest_sha256": _sha256_file(build_dir / MANIFEST),
                           "build_config_hash": build_manifest.get("config_hash")},
                   outputs=outputs, started=started)
    return 0


def _config_from_manifest(manifest: dict) -> RunConfig:
    cfg = manifest["config"]
    p = cfg["paradigm"]
    mapping = {k: v for k, v in cfg.items() if k != "paradigm" and v is not None}
    mapping["paradigm"] = p["paradigm"]
    mapping["retrieval"] = p["retrieval"]
    if p.get("consolidation"):
        mapping["consolidation"] = p["consolidation"]
    return load_config(None, mapping, environ={})


def cmd_audit(args: argparse.Namespace, argv: list[str]) -> int:
    build_dir = Path(args.store)
    if not build_dir.is_dir():
        raise UsageError(f"store directory {build_dir} does not exist")
    build_manifest = read_manifest(build_dir)
    if build_manifest.get("subcommand") != "build":
        raise UsageError(f"{build_dir} is not a build run directory")
    mock = args.mock or bool(build_manifest.get("mock"))
    config = load_config(args.config, _overrides(args), base=_config_from_manifest(build_manifest).to_mapping())
    if args.mode == "consolidation" and config.paradigm.paradigm != "structmem":
        raise UsageError("consolidation audit needs a structmem build")
    dataset = args.dataset or build_manifest["inputs"]["dataset"]["path"]
    conversations = _load_conversations(dataset, config, list(build_manifest["outputs"]["builds"]))
    provider = make_provider(config, mock)
    ledger = UsageLedger()
    p = provider.bind(ledger)
    prompts = PromptSet.load(config.prompts_dir)
    judge = args.judge or config.harness.judges[0]
    started = _now(mock)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result: dict = {"mode": args.mode, "judge": judge}
    for conv in conversations:
        store_rel = build_manifest["outputs"]["builds"][conv.conversation_id]["store"]
        build = BuildResult.load(_inside(build_dir, str(Path(store_rel).parent)))
        if args.mode == "extraction":
            audit = audit_extraction_fidelity(build.store, conv, prompts, p, judge)
            result.setdefault("conversations", []).append(audit)
            print(f"{conv.conversation_id}: {audit.hallucinated}/{audit.total} hallucinated "
                  f"({audit.unscored} unscored)")
        else:
            variants = ("constrained", "unconstrained") if args.variant == "both" else (args.variant,)
            for variant in variants:
                audit = audit_consolidation_fidelity(build.store, build.cycles, prompts, p, judge, variant=variant)
                result.setdefault("conversations", []).append(audit)
                print(f"{conv.conversation_id} {variant}: S={audit.spurious} T={audit.total} "
                      f"R={'undefined' if audit.rate is None else f'{audit.rate:.4f}'} "
                      f"template={audit.template} sha256={audit.template_sha256[:12]}")
    audits = result.get("conversations", [])
    if args.mode == "extraction":
        result["mean_rate"] = mean_rate(audits)
    result["conversations"] = [a.to_dict() for a in audits]
    result["usage"] = ledger.to_dict()
    name = f"audit_{args.mode}.json"
    _write_json(out / name, result)
    write_manifest(out, subcommand="audit", argv=argv, config=config, prompts=prompts, mock=mock,
                   inputs={"dataset": _dataset_fingerprint(dataset),
                           "build_manifest_sha256": _sha256_file(build_dir / MANIFEST)},
                   outputs={"audit": name}, started=started)
    return 0


def _find_run_dirs(paths: list[str]) -> list[Path]:
    found = []
    for raw in paths:
        path = Path(raw)
        if (path / MANIFEST).is_file():
            found.append(path)
        elif path.is_dir():
            found += sorted(p.parent for p in path.glob(f"*/{MANIFEST}"))
    return found


def _build_report(run_dir: Path, manifest: dict) -> RunReport:
    reports = []
    paradigm = manifest["config"]["paradigm"]["paradigm"]
    for conv_id, files in manifest["outputs"]["builds"].items():
        info = json.loads(_inside(run_dir, files["build_info"]).read_text(encoding="utf-8"))
        usage = json.loads(_inside(run_dir, files["ledger"]).read_text(encoding="utf-8"))
        reports.append(RunReport(paradigm=paradigm, conversations=[conv_id], build_usage=usage,
                                 utterances=info["utterances"], cycles=info["cycles"],
                                 eval_usage=UsageLedger().to_dict()))
    report = combine_reports(reports)
    report.label = paradigm
    return report


def cmd_report(args: argparse.Namespace, argv: list[str]) -> int:
    run_dirs = _find_run_dirs(args.run_dir)
    if not run_dirs:
        raise StructMemError(f"no runs found under {', '.join(args.run_dir)}")
    reports, dims = [], {}
    for run_dir in run_dirs:
        manifest = read_manifest(run_dir)
        dims[str(run_dir)] = manifest.get("embedding_dimension")
        kind = manifest.get("subcommand")
        if kind == "build":
            reports.append(_build_report(run_dir, manifest))
        elif kind == "eval":
            reports += [RunReport.load(_inside(run_dir, rel)) for rel in manifest["outputs"]["reports"]]
        else:
            logger.info("skipping %s run in %s", kind, run_dir)
    if len(set(dims.values())) > 1:
        detail = ", ".join(f"{d}={n}" for d, n in dims.items())
        raise UsageError(f"runs use different embedding dimensions and cannot be compared: {detail}")
    if not reports:
        raise StructMemError("no build or eval runs found")
    table = render_table(reports)
    print(table, end="")
    if args.out:
        Path(args.out).write_text(table, encoding="utf-8")
    return 0


# --- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="structmem", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--mock", action="store_true", help="use the deterministic offline provider")
        p.add_argument("--seed", type=int, help="mock provider seed")
        p.add_argument("--prompts-dir", help="directory overriding bundled prompt templates")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override")
        p.add_argument("--out", required=True, help="run directory to write")

    b = sub.add_parser("build", help="build memory for one or more conversations")
    b.add_argument("--dataset", required=True, help="LoCoMo-format JSON file or bundled fixture name")
    b.add_argument("--conversation", action="append", help="conversation id (repeatable; default all)")
    b.add_argument("--paradigm", choices=("flat", "graph", "structmem"))
    common(b)
    b.set_defaults(func=cmd_build)

    e = sub.add_parser("eval", help="answer and judge every question against a build")
    e.add_argument("--store", required=True, help="build run directory")
    e.add_argument("--dataset", help="dataset (default: the one recorded by the build)")
    e.add_argument("--conversation", action="append")
    e.add_argument("--judges", help="comma-separated judge model names")
    e.add_argument("--entries", type=int, help="atomic entries retrieved per question")
    e.add_argument("--synthesis", type=int, help="synthesis entries retrieved per question")
    e.add_argument("--sweep", help="entries=..., synthesis=... or seed_k=... (comma-separated values)")
    e.add_argument("--parallelism", type=int)
    common(e)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("audit", help="extraction or consolidation fidelity audit")
    a.add_argument("--mode", required=True, choices=("extraction", "consolidation"))
    a.add_argument("--store", required=True, help="build run directory")
    a.add_argument("--dataset")
    a.add_argument("--judge", help="judge model name")
    a.add_argument("--variant", choices=("constrained", "unconstrained", "both"), default="both")
    common(a)
    a.set_defaults(func=cmd_audit)

    r = sub.add_parser("report", help="comparison table across run directories")
    r.add_argument("--run-dir", required=True, nargs="+", help="run directories, or parents of them")
    r.add_argument("--out", help="also write the table to this file")
    r.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args, argv)
    except (UsageError, ConfigError, DatasetParseError, PromptError) as exc:
        print(f"structmem: error: {exc}", file=sys.stderr)
        return 2
    except StructMemError as exc:
        print(f"structmem: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
