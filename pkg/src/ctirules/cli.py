"""Command-line entry point: ``ctirules <subcommand> ...``.

Exit status is 0 on success, 1 for input errors and 2 for backend failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

from .attack_kb import TechniqueCatalog, VectorStore, build_technique_index, load_attack_matrix, load_sample_catalog
from .detection import evaluate_detection, evaluate_sets, load_events, run_detection
from .errors import CtiError, GatewayError, InputError, UnreadableSource
from .extraction import AttackIntel, ExtractionConfig, extract_report
from .gateway import BackendConfig, Gateway
from .procedures import (
    EntityGraph,
    ProcedureCorpus,
    build_procedure_graph,
    completeness_sidecar,
    generate_procedures,
    load_procedure_corpus,
    retrieve_procedure_context,
)
from .rulegen import MAX_ATTEMPTS, RuleRun, rules_for_report, write_rule_bundle
from .sigma import compile_to_splunk, parse_sigma

log = logging.getLogger("ctirules")

SUBCOMMANDS = ("kb", "extract", "procedures", "gen-rules", "compile-rule", "match", "eval", "pipeline")


class UnknownSubcommand(InputError):
    pass


class UsageError(InputError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    catalog_path: str | None = None
    store_path: str | None = None
    corpus_path: str | None = None
    graph_path: str | None = None
    cache_dir: str | None = None
    backend: BackendConfig = field(default_factory=BackendConfig)
    k_retrieval: int = 3
    window_w: int = 3
    max_repair_attempts: int = MAX_ATTEMPTS
    fold_subtechniques: bool = False
    max_drafts_per_report: int = 20
    field_study_profile: bool = False
    ioc_mode: str = "regex_plus_llm"

    def __post_init__(self):
        if self.k_retrieval < 1:
            raise UsageError("k_retrieval must be >= 1")
        if not 1 <= self.max_repair_attempts <= MAX_ATTEMPTS:
            raise UsageError(f"max_repair_attempts must lie in [1, {MAX_ATTEMPTS}]")
        if self.window_w < 1:
            raise UsageError("window_w must be >= 1")


def _read_config(path: str) -> dict:
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise UnreadableSource(f"{path}: {exc}") from exc
    try:
        if p.suffix.lower() == ".json":
            return json.loads(raw)
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        return tomllib.loads(raw.decode("utf-8"))
    except ValueError as exc:
        raise UsageError(f"{path}: cannot parse config: {exc}") from None


def _backend_from(values: dict) -> dict:
    allowed = {f.name for f in fields(BackendConfig)}
    unknown = set(values) - allowed
    if unknown:
        raise UsageError(f"unknown backend keys: {sorted(unknown)}")
    return values


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    """Defaults, then the config file, then command-line flags."""
    data: dict[str, Any] = {}
    backend: dict[str, Any] = {}
    if getattr(args, "config", None):
        raw = _read_config(args.config)
        b = raw.pop("backend", {})
        backend.update(_backend_from({"kind": b} if isinstance(b, str) else dict(b)))
        known = {f.name for f in fields(PipelineConfig)} - {"backend"}
        unknown = set(raw) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        data.update(raw)
    flag_map = {
        "catalog": "catalog_path",
        "store": "store_path",
        "corpus": "corpus_path",
        "graph": "graph_path",
        "cache": "cache_dir",
        "k": "k_retrieval",
        "window": "window_w",
        "max_attempts": "max_repair_attempts",
        "max_drafts": "max_drafts_per_report",
        "ioc_mode": "ioc_mode",
    }
    for flag, key in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            data[key] = value
    if getattr(args, "field_study", False):
        data["field_study_profile"] = True
    if getattr(args, "fold_subtechniques", False):
        data["fold_subtechniques"] = True
    if getattr(args, "backend", None):
        backend["kind"] = args.backend
    if getattr(args, "fixtures", None):
        backend["fixture_dir"] = args.fixtures
    if getattr(args, "endpoint", None):
        backend["endpoint"] = args.endpoint
    if getattr(args, "workers", None):
        backend["max_parallel"] = args.workers
    try:
        data["backend"] = BackendConfig(**backend)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return PipelineConfig(**data)


# -- shared resources --------------------------------------------------------------

class Context:
    def __init__(self, config: PipelineConfig):
        self.config = config
        self._gateway: Gateway | None = None
        self._catalog: TechniqueCatalog | None = None
        self._store: VectorStore | None = None

    @property
    def gateway(self) -> Gateway:
        if self._gateway is None:
            self._gateway = Gateway(self.config.backend, cache_dir=self.config.cache_dir)
        return self._gateway

    @property
    def catalog(self) -> TechniqueCatalog:
        if self._catalog is None:
            path = self.config.catalog_path
            fold = self.config.fold_subtechniques
            self._catalog = load_attack_matrix(path, fold_subtechniques=fold) if path else load_sample_catalog(fold_subtechniques=fold)
        return self._catalog

    @property
    def store(self) -> VectorStore:
        if self._store is None:
            path = self.config.store_path
            if path and Path(path).exists():
                store = VectorStore.load(path)
                if store.embedder_id and store.embedder_id != self.gateway.embedder_id:
                    raise UsageError(
                        f"store {path} was built with {store.embedder_id}, backend embeds with {self.gateway.embedder_id}"
                    )
                self._store = store
            else:
                self._store = build_technique_index(self.catalog, self.gateway.embed, self.gateway.embedder_id)
        return self._store

    def extraction_config(self, report_id: str) -> ExtractionConfig:
        c = self.config
        return ExtractionConfig(
            report_id=report_id,
            k=c.k_retrieval,
            window=c.window_w,
            ioc_mode=c.ioc_mode,
            fold_subtechniques=c.fold_subtechniques,
        )


def _read_text(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise UnreadableSource(f"{path}: {exc}") from exc


def _read_json(path: str) -> Any:
    text = _read_text(path)
    try:
        return json.loads(text)
    except ValueError as exc:
        raise UsageError(f"{path}: invalid JSON: {exc}") from None


def dumps(obj: Any) -> str:
    return json.dumps(obj, indent=2, ensure_ascii=False) + "\n"


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _report_id(path: str) -> str:
    return Path(path).stem


# -- stages ------------------------------------------------------------------------------

def stage_extract(ctx: Context, report_path: str) -> tuple[str, AttackIntel]:
    text = _read_text(report_path)
    intel = extract_report(text, ctx.catalog, ctx.store, ctx.gateway, ctx.extraction_config(_report_id(report_path)))
    return text, intel


def _load_corpus(ctx: Context) -> ProcedureCorpus | None:
    path = ctx.config.corpus_path
    return load_procedure_corpus(path) if path else None


def _load_graph(ctx: Context, corpus: ProcedureCorpus | None) -> EntityGraph | None:
    path = ctx.config.graph_path
    if path and Path(path).exists():
        return EntityGraph.load(path)
    if corpus is None or not len(corpus):
        return None
    graph = build_procedure_graph(corpus, ctx.gateway, max_workers=ctx.config.backend.max_parallel)
    if path:
        graph.save(path)
    return graph


def stage_procedures(ctx: Context, report_text: str, intel: AttackIntel) -> tuple[dict, dict, list[str]]:
    corpus = _load_corpus(ctx)
    context = ""
    diagnostics = []
    if corpus is not None and intel.techniques:
        graph = _load_graph(ctx, corpus)
        ctx_obj = retrieve_procedure_context(intel, corpus, graph, ctx.gateway)
        context = ctx_obj
        if ctx_obj.empty:
            diagnostics.append("procedure context is empty")
        if ctx_obj.truncated:
            diagnostics.append("procedure context truncated to the character budget")
    result = generate_procedures(report_text, intel, context, ctx.gateway)
    diagnostics.extend(result.diagnostics)
    return result.to_json(), completeness_sidecar(result.steps), diagnostics


def stage_rules(ctx: Context, report_text: str, intel: AttackIntel | None, report_id: str, *, use_ttp: bool) -> RuleRun:
    c = ctx.config
    return rules_for_report(
        report_text,
        intel,
        ctx.gateway,
        report_id=report_id,
        use_ttp=use_ttp,
        field_study=c.field_study_profile,
        max_drafts=c.max_drafts_per_report,
        max_attempts=c.max_repair_attempts,
        catalog=ctx.catalog,
    )


def _write_run(run: RuleRun, out_dir: str) -> list[str]:
    slugs = write_rule_bundle(out_dir, run)
    traces = [{"draft": o.draft_index, **o.repair.trace.to_json()} for o in run.outcomes]
    Path(out_dir, "traces.json").write_text(dumps(traces), encoding="utf-8")
    return slugs


# -- commands -----------------------------------------------------------------------------

def cmd_kb(args, ctx: Context) -> int:
    if args.action != "build":
        raise UnknownSubcommand(f"kb {args.action}")
    store = build_technique_index(ctx.catalog, ctx.gateway.embed, ctx.gateway.embedder_id)
    out = args.out or ctx.config.store_path
    if not out:
        raise UsageError("kb build needs --out or --store")
    store.save(out)
    print(f"{len(store)} techniques, {len(ctx.catalog.tactics)} tactics, catalog {ctx.catalog.version_label} -> {out}", file=sys.stderr)
    return 0


def cmd_extract(args, ctx: Context) -> int:
    _, intel = stage_extract(ctx, args.report)
    _emit(dumps(intel.to_json()), args.out)
    return 0


def _intel_arg(path: str | None) -> AttackIntel | None:
    return AttackIntel.from_json(_read_json(path)) if path else None


def cmd_procedures(args, ctx: Context) -> int:
    text = _read_text(args.report)
    intel = _intel_arg(args.intel)
    if intel is None:
        _, intel = stage_extract(ctx, args.report)
    procs, sidecar, diags = stage_procedures(ctx, text, intel)
    for d in diags:
        print(f"warning: {d}", file=sys.stderr)
    _emit(dumps(procs), args.out)
    if args.out:
        Path(args.out).with_suffix(".completeness.json").write_text(dumps(sidecar), encoding="utf-8")
    return 0


def cmd_gen_rules(args, ctx: Context) -> int:
    text = _read_text(args.report)
    intel = _intel_arg(args.intel)
    if intel is None and not args.no_ttp:
        _, intel = stage_extract(ctx, args.report)
    run = stage_rules(ctx, text, intel, _report_id(args.report), use_ttp=not args.no_ttp)
    if not args.out:
        raise UsageError("gen-rules needs --out DIR")
    slugs = _write_run(run, args.out)
    print(f"{len(slugs)} rules kept of {len(run.outcomes)} drafts", file=sys.stderr)
    return 0


def cmd_compile_rule(args, ctx: Context) -> int:
    rule = parse_sigma(_read_text(args.rule))
    for w in rule.warnings:
        print(f"warning: {w}", file=sys.stderr)
    _emit(compile_to_splunk(rule).text + "\n", args.out)
    return 0


def _collect_queries(paths: Sequence[str]) -> dict[str, str]:
    queries: dict[str, str] = {}
    for p in paths:
        path = Path(p)
        files = sorted(path.glob("*.spl")) + sorted(path.glob("*.yml")) if path.is_dir() else [path]
        for f in files:
            if f.stem in queries:
                continue
            text = _read_text(str(f))
            queries[f.stem] = compile_to_splunk(parse_sigma(text)).text if f.suffix in (".yml", ".yaml") else text.strip()
    return queries


def cmd_match(args, ctx: Context) -> int:
    events = load_events(args.events)
    report = run_detection(_collect_queries(args.rules), events)
    doc = report.to_json()
    doc["eval"] = evaluate_detection(report, events).to_json()
    _emit(dumps(doc), args.out)
    return 0


def _id_set(obj: Any, path: str) -> set[str]:
    if isinstance(obj, list):
        return {str(x) for x in obj}
    if isinstance(obj, dict):
        if "techniques" in obj:
            return {t["technique_id"] if isinstance(t, dict) else str(t) for t in obj["techniques"]}
        if "ids" in obj:
            return {str(x) for x in obj["ids"]}
    raise UsageError(f"{path}: expected a list of ids, an object with 'ids', or intel JSON")


def cmd_eval(args, ctx: Context) -> int:
    pred = _id_set(_read_json(args.pred), args.pred)
    truth = _id_set(_read_json(args.truth), args.truth)
    _emit(dumps(evaluate_sets(pred, truth).to_json()), args.out)
    return 0


def cmd_pipeline(args, ctx: Context) -> int:
    if not args.out:
        raise UsageError("pipeline needs --out DIR")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text, intel = stage_extract(ctx, args.report)
    (out / "intel.json").write_text(dumps(intel.to_json()), encoding="utf-8")
    if intel.techniques:
        procs, sidecar, diags = stage_procedures(ctx, text, intel)
    else:
        procs, sidecar, diags = {"procedure": []}, {"completeness": []}, ["no accepted techniques; procedures skipped"]
    for d in diags:
        print(f"warning: {d}", file=sys.stderr)
    (out / "procedures.json").write_text(dumps(procs), encoding="utf-8")
    (out / "procedures.completeness.json").write_text(dumps(sidecar), encoding="utf-8")
    run = stage_rules(ctx, text, intel, intel.report_id, use_ttp=not args.no_ttp)
    slugs = _write_run(run, str(out / "rules"))
    print(f"{len(intel.techniques)} techniques, {len(procs['procedure'])} procedure steps, {len(slugs)} rules", file=sys.stderr)
    return 0


# -- argument parsing ----------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or TOML config file; flags override it")
    common.add_argument("--backend", choices=("http_api", "replay", "deterministic_mock"))
    common.add_argument("--fixtures", help="replay fixture directory")
    common.add_argument("--endpoint", help="chat-completions URL for http_api")
    common.add_argument("--cache", help="response cache directory")
    common.add_argument("--workers", type=int, help="maximum parallel backend calls")
    common.add_argument("--k", type=int, help="retrieval top-k")
    common.add_argument("--window", type=int, help="fallback window size in sentences")
    common.add_argument("--max-attempts", type=int, dest="max_attempts")
    common.add_argument("--max-drafts", type=int, dest="max_drafts")
    common.add_argument("--ioc-mode", choices=("regex_only", "regex_plus_llm"), dest="ioc_mode")
    common.add_argument("--catalog", help="ATT&CK catalog (simplified JSON or STIX bundle)")
    common.add_argument("--store", help="technique vector store (JSON lines)")
    common.add_argument("--corpus", help="procedure corpus (JSON lines)")
    common.add_argument("--graph", help="entity graph JSON (built and saved when missing)")
    common.add_argument("--fold-subtechniques", action="store_true", dest="fold_subtechniques")
    common.add_argument("--field-study", action="store_true", dest="field_study")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="ctirules", description="Threat report to detection rule pipeline.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    kb = sub.add_parser("kb", parents=[common], help="technique knowledge base")
    kb.add_argument("action", help="build")
    kb.set_defaults(func=cmd_kb)

    p = sub.add_parser("extract", parents=[common], help="report -> attack intel JSON")
    p.add_argument("report")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("procedures", parents=[common], help="report + intel -> procedure steps")
    p.add_argument("report")
    p.add_argument("--intel")
    p.set_defaults(func=cmd_procedures)

    p = sub.add_parser("gen-rules", parents=[common], help="report + intel -> rule bundle")
    p.add_argument("report")
    p.add_argument("--intel")
    p.add_argument("--no-ttp", action="store_true", dest="no_ttp")
    p.set_defaults(func=cmd_gen_rules)

    p = sub.add_parser("compile-rule", parents=[common], help="Sigma YAML -> Splunk query")
    p.add_argument("rule")
    p.set_defaults(func=cmd_compile_rule)

    p = sub.add_parser("match", parents=[common], help="run queries over events")
    p.add_argument("--rules", nargs="+", required=True, help=".spl/.yml files or bundle directories")
    p.add_argument("--events", required=True)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval", parents=[common], help="precision/recall/F1 of id sets")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", parents=[common], help="extract -> procedures -> rules")
    p.add_argument("report")
    p.add_argument("--no-ttp", action="store_true", dest="no_ttp")
    p.set_defaults(func=cmd_pipeline)
    return parser


def run_command(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        if argv and not argv[0].startswith("-") and argv[0] not in SUBCOMMANDS:
            raise UnknownSubcommand(f"unknown subcommand {argv[0]!r}; expected one of {', '.join(SUBCOMMANDS)}")
        args = build_parser().parse_args(argv)
        if not getattr(args, "command", None):
            raise UnknownSubcommand(f"a subcommand is required: {', '.join(SUBCOMMANDS)}")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        ctx = Context(resolve_config(args))
        return args.func(args, ctx)
    except GatewayError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return 2
    except CtiError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
