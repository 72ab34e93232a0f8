"""Command-line entry points: eval, report, repl, derive-schema.

Exit codes: 0 success, 2 configuration error, 3 dataset error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence, TextIO

from . import multiwoz_schema
from .backend import CompletionBackend, HttpBackend, ScriptedBackend
from .datasets import load_multiwoz, load_sgd, load_sgd_schema
from .engine import EngineConfig, Mode, TurnContext, run_dialogue, run_turn
from .errors import BackendError, ParseError, ToolDSTError
from .metrics import FUZZY_THRESHOLD, build_report, render_text
from .schema import Schema, derive_multiwoz_schema, derive_sgd_schema, dump_schema, load_schema_file
from .state import BeliefState
from .tools import DialogueTurn

log = logging.getLogger("tooldst")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATASET = 3

TRACES_FILE = "traces.jsonl"
MANIFEST_FILE = "manifest.json"
REPORT_JSON = "report.json"
REPORT_TXT = "report.txt"


class ConfigError(ToolDSTError):
    pass


@dataclass
class RunManifest:
    schema_path: Optional[str]
    dataset: str
    dataset_path: str
    backend_config: Dict[str, Any]
    engine_config: Dict[str, Any]
    output_dir: str
    concurrency: int = 1
    limit: Optional[int] = None
    fuzzy: bool = True
    fuzzy_threshold: float = FUZZY_THRESHOLD

    def validate(self) -> None:
        if self.concurrency < 1:
            raise ConfigError("concurrency must be >= 1")
        if self.dataset not in ("multiwoz", "sgd"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        try:
            os.makedirs(self.output_dir, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"output dir {self.output_dir} is not writable: {exc}") from exc
        if not os.access(self.output_dir, os.W_OK):
            raise ConfigError(f"output dir {self.output_dir} is not writable")

    def to_json(self) -> Dict[str, Any]:
        return asdict(self)


def make_backend(cfg: Dict[str, Any]) -> CompletionBackend:
    kind = cfg.get("kind", "scripted")
    native = bool(cfg.get("native_tools", False))
    if kind == "scripted":
        fixture = cfg.get("fixture")
        if not fixture or not os.path.exists(fixture):
            raise ConfigError(f"scripted backend needs an existing --fixture, got {fixture!r}")
        return ScriptedBackend.from_file(fixture, native_tools=native)
    if kind == "http":
        try:
            return HttpBackend.from_env(native_tools=native)
        except BackendError as exc:
            raise ConfigError(str(exc)) from exc
    raise ConfigError(f"unknown backend {kind!r}")


def engine_config(cfg: Dict[str, Any]) -> EngineConfig:
    try:
        return EngineConfig(
            k_max=int(cfg.get("k_max", 6)),
            temperature=float(cfg.get("temperature", 0.0)),
            mode=Mode(cfg.get("mode", "full")),
        )
    except (ValueError, ToolDSTError) as exc:
        raise ConfigError(str(exc)) from exc


def resolve_schema(manifest: RunManifest) -> Schema:
    if manifest.schema_path:
        try:
            return load_schema_file(manifest.schema_path)
        except (OSError, ToolDSTError) as exc:
            raise ConfigError(f"cannot load schema {manifest.schema_path}: {exc}") from exc
    if manifest.dataset == "multiwoz":
        return multiwoz_schema()
    return derive_sgd_schema(load_sgd_schema(manifest.dataset_path))


def load_dataset(manifest: RunManifest):
    if manifest.dataset == "multiwoz":
        dialogues = load_multiwoz(manifest.dataset_path)
    else:
        dialogues = load_sgd(manifest.dataset_path)
    dialogues = [d for d in dialogues if d]
    if manifest.limit is not None:
        dialogues = dialogues[: manifest.limit]
    return dialogues


def read_traces(path: str) -> List[Dict[str, Any]]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{n}: malformed trace line: {exc.msg}") from exc
            if not isinstance(rec, dict) or "steps" not in rec:
                raise ParseError(f"{path}:{n}: not a trace record")
            records.append(rec)
    return records


def write_report(records: Sequence[Dict[str, Any]], out_dir: str, manifest: Optional[Dict[str, Any]]):
    fuzzy = manifest.get("fuzzy", True) if manifest else True
    threshold = manifest.get("fuzzy_threshold", FUZZY_THRESHOLD) if manifest else FUZZY_THRESHOLD
    report = build_report(records, fuzzy=fuzzy, threshold=threshold)
    doc = {"manifest": manifest, "report": report.to_json()}
    with open(os.path.join(out_dir, REPORT_JSON), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")
    with open(os.path.join(out_dir, REPORT_TXT), "w", encoding="utf-8") as fh:
        fh.write(render_text(report))
    return report


def cmd_eval(manifest: RunManifest) -> int:
    try:
        manifest.validate()
        config = engine_config(manifest.engine_config)
        backend = make_backend(manifest.backend_config)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    try:
        schema = resolve_schema(manifest)
        dialogues = load_dataset(manifest)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (OSError, ToolDSTError) as exc:
        log.error("dataset error: %s", exc)
        return EXIT_DATASET

    def work(dialogue):
        try:
            return run_dialogue(dialogue, schema, backend, config).trace_records(config, schema)
        except Exception:  # one broken dialogue must not sink the run
            log.exception("dialogue %s failed", dialogue[0].dialogue_id)
            return []

    if manifest.concurrency == 1:
        results = [work(d) for d in dialogues]
    else:
        with ThreadPoolExecutor(max_workers=manifest.concurrency) as pool:
            results = list(pool.map(work, dialogues))

    records = [rec for batch in results for rec in batch]
    out = manifest.output_dir
    with open(os.path.join(out, TRACES_FILE), "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    with open(os.path.join(out, MANIFEST_FILE), "w", encoding="utf-8") as fh:
        json.dump(manifest.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    report = write_report(records, out, manifest.to_json())
    sys.stdout.write(render_text(report))
    log.info("%d dialogues, %d turns -> %s", len(dialogues), len(records), out)
    return EXIT_OK


def cmd_report(traces_paths: Sequence[str], out_dir: Optional[str] = None) -> int:
    records: List[Dict[str, Any]] = []
    try:
        for path in traces_paths:
            records.extend(read_traces(path))
    except OSError as exc:
        log.error("cannot read traces: %s", exc)
        return EXIT_DATASET
    except ParseError as exc:
        log.error("%s", exc)
        return EXIT_DATASET
    manifest = None
    if len(traces_paths) == 1:
        candidate = os.path.join(os.path.dirname(os.path.abspath(traces_paths[0])), MANIFEST_FILE)
        if os.path.exists(candidate):
            with open(candidate, encoding="utf-8") as fh:
                manifest = json.load(fh)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_report(records, out_dir, manifest)
    fuzzy = manifest.get("fuzzy", True) if manifest else True
    threshold = manifest.get("fuzzy_threshold", FUZZY_THRESHOLD) if manifest else FUZZY_THRESHOLD
    sys.stdout.write(render_text(build_report(records, fuzzy, threshold)))
    return EXIT_OK


# -- REPL -----------------------------------------------------------------------

REPL_HELP = ":state  show the belief state\n:reset  clear state and history\n:system <text>  set the previous system utterance\n:quit  leave"


def _print_turn(out, stdout: TextIO) -> None:
    for i, step in enumerate(out.trace.steps):
        if step.thought:
            stdout.write(f"[{i}] Thought: {step.thought}\n")
        action = f"{step.call.name} {json.dumps(dict(step.call.arguments), ensure_ascii=False)}" if step.call else "(unparseable)"
        stdout.write(f"[{i}] Action: {action}\n")
        if step.outcome.passed:
            stdout.write(f"[{i}] Validation: pass\n")
        else:
            for v in step.outcome.violations:
                stdout.write(f"[{i}] Validation: {v.code.value}: {v.message}\n")
        if step.observation:
            stdout.write(f"[{i}] Observation: {step.observation}\n")
    status = "degraded" if out.degraded else ("committed" if out.committed else "no update")
    stdout.write(f"intent: {out.intent or '(none)'}, {status}, {out.llm_calls} LLM calls\n")


def _print_state(state: BeliefState, stdout: TextIO) -> None:
    if not state.entries:
        stdout.write("state: (empty)\n")
        return
    stdout.write("state:\n")
    for k, v in state.entries.items():
        stdout.write(f"  {k} = {v.norm}\n")


def cmd_repl(
    schema: Schema,
    backend: CompletionBackend,
    config: EngineConfig = EngineConfig(),
    stdin: TextIO = sys.stdin,
    stdout: TextIO = sys.stdout,
) -> int:
    state = BeliefState()
    history: List[DialogueTurn] = []
    intents: List[str] = []
    system = ""
    stdout.write(f"schema {schema.name}, mode {config.mode.value}, k_max {config.k_max}\n{REPL_HELP}\n")
    while True:
        stdout.write("> ")
        stdout.flush()
        line = stdin.readline()
        if not line:
            break
        line = line.strip()
        if not line:
            continue
        if line == ":quit":
            break
        if line == ":state":
            _print_state(state, stdout)
            continue
        if line == ":reset":
            state, history, intents, system = BeliefState(), [], [], ""
            _print_state(state, stdout)
            continue
        if line.startswith(":system"):
            system = line[len(":system"):].strip()
            continue
        if line.startswith(":"):
            stdout.write(f"unknown command {line}\n{REPL_HELP}\n")
            continue
        ctx = TurnContext(line, system, state, tuple(intents), tuple(history), "repl", len(history))
        try:
            out = run_turn(ctx, schema, backend, config)
        except Exception as exc:  # keep the session alive whatever the backend does
            stdout.write(f"error: {exc}\n")
            continue
        _print_turn(out, stdout)
        if out.error:
            stdout.write(f"backend error: {out.error}\n")
        state = out.new_state
        if out.committed and out.delta and out.intent and out.intent not in intents:
            intents.append(out.intent)
        history.append(DialogueTurn(line, system))
        system = ""
        _print_state(state, stdout)
    return EXIT_OK


# -- argparse --------------------------------------------------------------------


def _add_engine_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--schema", help="schema JSON file (default: bundled MultiWOZ schema or derived SGD schema)")
    p.add_argument("--mode", choices=[m.value for m in Mode], default="full")
    p.add_argument("--k-max", type=int, default=6)
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--backend", choices=["http", "scripted"], default="http")
    p.add_argument("--fixture", help="JSONL fixture for the scripted backend")
    p.add_argument("--native-tools", action="store_true", help="use native tool calling instead of the text grammar")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tooldst", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    ev = sub.add_parser("eval", help="run a dataset through the engine and write traces and a report")
    _add_engine_flags(ev)
    ev.add_argument("--dataset", choices=["multiwoz", "sgd"], required=True)
    ev.add_argument("--data-path", required=True)
    ev.add_argument("--concurrency", type=int, default=1)
    ev.add_argument("--limit", type=int, help="only the first N dialogues")
    ev.add_argument("--no-fuzzy", action="store_true", help="exact matching for every slot")
    ev.add_argument("--out", required=True)

    rp = sub.add_parser("report", help="recompute the report from trace files")
    rp.add_argument("traces", nargs="+")
    rp.add_argument("--out", help="directory for report.json / report.txt")

    rl = sub.add_parser("repl", help="type user turns, watch the agent work")
    _add_engine_flags(rl)

    ds = sub.add_parser("derive-schema", help="derive a schema file from MultiWOZ 2.2 or SGD metadata")
    ds.add_argument("--dataset", choices=["multiwoz", "sgd"], required=True)
    ds.add_argument("--source", help="MultiWOZ 2.2 schema.json or SGD schema.json (default: bundled MultiWOZ metadata)")
    ds.add_argument("--types", help="slot-type annotation JSON for MultiWOZ (default: bundled table)")
    ds.add_argument("--out", help="output file (default: stdout)")
    return parser


def _backend_cfg(args) -> Dict[str, Any]:
    return {"kind": args.backend, "fixture": args.fixture, "native_tools": args.native_tools}


def _engine_cfg(args) -> Dict[str, Any]:
    return {"mode": args.mode, "k_max": args.k_max, "temperature": args.temperature}


def cmd_derive_schema(args) -> int:
    try:
        if args.dataset == "multiwoz":
            if args.source is None and args.types is None:
                schema = multiwoz_schema()
            else:
                from . import _data

                raw = json.load(open(args.source, encoding="utf-8")) if args.source else _data("multiwoz22_schema.json")
                types = json.load(open(args.types, encoding="utf-8")) if args.types else _data("multiwoz_slot_types.json")
                schema = derive_multiwoz_schema(raw, types)
        else:
            if not args.source:
                raise ConfigError("--source is required for sgd")
            schema = derive_sgd_schema(json.load(open(args.source, encoding="utf-8")))
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (OSError, ValueError, ToolDSTError) as exc:
        log.error("cannot derive schema: %s", exc)
        return EXIT_DATASET
    text = dump_schema(schema)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "eval":
        manifest = RunManifest(
            schema_path=args.schema,
            dataset=args.dataset,
            dataset_path=args.data_path,
            backend_config=_backend_cfg(args),
            engine_config=_engine_cfg(args),
            output_dir=args.out,
            concurrency=args.concurrency,
            limit=args.limit,
            fuzzy=not args.no_fuzzy,
        )
        return cmd_eval(manifest)
    if args.command == "report":
        return cmd_report(args.traces, args.out)
    if args.command == "derive-schema":
        return cmd_derive_schema(args)
    try:
        config = engine_config(_engine_cfg(args))
        backend = make_backend(_backend_cfg(args))
        schema = load_schema_file(args.schema) if args.schema else multiwoz_schema()
    except (ConfigError, OSError, ToolDSTError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    return cmd_repl(schema, backend, config)


if __name__ == "__main__":
    sys.exit(main())
