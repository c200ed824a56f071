"""Operator entry points.

Subcommands: ``run`` a task, ``resume`` a finished transcript with a
follow-up, ``replay`` a transcript deterministically, ``bench`` a task
directory, ``stats`` over transcripts, ``export-notebook``, and ``serve``
the session API.

Exit codes: 0 success, 2 usage error, 3 task aborted, 4 replay divergence.
Secrets never live in config files: the HTTP provider reads its API key
from the environment variable named in the config.
"""

from __future__ import annotations

import argparse
import dataclasses
import glob
import shutil
import json
import sys
import tempfile
from pathlib import Path

import yaml

from .cellmodel import SessionMeta, write_notebook
from .evalharness import BenchConfig, run_benchmark, transition_stats
from .executor import LocalBackendConfig
from .executor.gateway import GatewayConfig
from .llmgateway import (
    EndpointConfig,
    HttpProvider,
    Provider,
    ReplayDivergence,
    ScriptedProvider,
    load_price_table,
)
from .orchestrator import (
    Ablations,
    Outcome,
    Session,
    SessionConfig,
    SessionDeps,
    replay_transcript,
)
from .statemachine import Budgets
from .toolkit import ToolDescriptor, load_tool_registry
from .transcript import load_events, normalize_events, normalize_file
from .trajectory import trace_cells_from_events

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_ABORTED = 3
EXIT_DIVERGED = 4


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    text = Path(path).read_text(encoding="utf-8")
    return yaml.safe_load(text) or {}


def _session_config(record: dict, args: argparse.Namespace) -> SessionConfig:
    budgets_rec = dict(record.get("budgets", {}))
    for name in (
        "max_planning_number",
        "max_execution_number",
        "max_debug_number",
        "max_planning_execution_number",
    ):
        value = getattr(args, name, None)
        if value is not None:
            budgets_rec[name] = value
    backend_rec = record.get("backend", {"kind": "local"})
    if getattr(args, "backend", None):
        backend_rec = {"kind": args.backend, **record.get("backend_options", {})}
    backend = (
        LocalBackendConfig()
        if backend_rec.get("kind", "local") == "local"
        else GatewayConfig(**{k: v for k, v in backend_rec.items() if k != "kind"})
    )
    ablations = Ablations(
        disable_planning=bool(
            getattr(args, "disable_planning", False)
            or record.get("ablations", {}).get("disable_planning", False)
        ),
        disable_repair=bool(
            getattr(args, "disable_repair", False)
            or record.get("ablations", {}).get("disable_repair", False)
        ),
    )
    return SessionConfig(
        model=getattr(args, "model", None) or record.get("model", "scripted"),
        temperature=(
            args.temperature
            if getattr(args, "temperature", None) is not None
            else record.get("temperature", 0.0)
        ),
        budgets=Budgets(**budgets_rec) if budgets_rec else Budgets(),
        language_tag=record.get("language_tag", "python"),
        workdir=getattr(args, "workdir", None) or record.get("workdir", "."),
        ablations=ablations,
        task_timeout_s=(
            args.timeout
            if getattr(args, "timeout", None) is not None
            else record.get("task_timeout_s", 3600.0)
        ),
        retry_on_parse_error=record.get("retry_on_parse_error", 2),
        backend=backend,
        prompt_dir=record.get("prompt_dir"),
        price_table=load_price_table(record.get("price_table", {})),
        max_tokens=record.get("max_tokens"),
    )


def _provider(record: dict) -> Provider:
    spec = record.get("provider", {})
    kind = spec.get("kind", "http")
    if kind == "scripted":
        replies = spec.get("replies")
        if replies is None and spec.get("replies_path"):
            replies = json.loads(Path(spec["replies_path"]).read_text("utf-8"))
        return ScriptedProvider(replies or [])
    if kind == "http":
        endpoint = EndpointConfig(
            base_url=spec.get("base_url", "http://127.0.0.1:8000"),
            path=spec.get("path", "/v1/chat/completions"),
            api_key_env=spec.get("api_key_env", "CELLFLOW_API_KEY"),
            auth_header=spec.get("auth_header", "Authorization"),
            auth_scheme=spec.get("auth_scheme", "Bearer"),
            timeout_s=spec.get("timeout_s", 120.0),
        )
        return HttpProvider(endpoint)
    raise SystemExit(f"unknown provider kind {kind!r}")


def _tools(record: dict) -> tuple[ToolDescriptor, ...]:
    tools: list[ToolDescriptor] = []
    registry = record.get("tool_registry")
    if registry:
        tools.extend(load_tool_registry(registry))
    for entry in record.get("tools", []):
        tools.append(ToolDescriptor.from_json(entry))
    return tuple(tools)


def _read_instruction(spec: str) -> str:
    if spec == "-":
        return sys.stdin.read()
    return Path(spec).read_text(encoding="utf-8")


def _finish_run(session: Session, outcome: Outcome) -> int:
    events = session.transcript.events()
    notebook_path = Path(session.config.workdir) / "notebook.ipynb"
    write_notebook(
        notebook_path,
        trace_cells_from_events(events),
        SessionMeta(session_id=session.handle.session_id, language_tag=session.config.language_tag),
        workdir=session.config.workdir,
    )
    print(f"transcript: {session.transcript.path}")
    print(f"notebook:   {notebook_path}")
    print(f"outcome:    {outcome.value}")
    return EXIT_ABORTED if outcome is Outcome.ABORTED else EXIT_OK


def _cmd_run(args: argparse.Namespace) -> int:
    record = _load_config_file(args.config)
    config = _session_config(record, args)
    deps = SessionDeps(provider=_provider(record), tools=_tools(record))
    instruction = _read_instruction(args.instruction)
    session = Session(config, deps)
    try:
        result = session.run(instruction)
        return _finish_run(session, result.outcome)
    finally:
        session.close()


def _cmd_resume(args: argparse.Namespace) -> int:
    record = _load_config_file(args.config)
    events = load_events(args.transcript)
    first = next(e for e in events if e.type == "user_input")
    config = SessionConfig.from_json(first.payload["config"])
    if args.workdir:
        config = dataclasses.replace(config, workdir=args.workdir)
    deps = SessionDeps(
        provider=_provider(record),
        tools=tuple(ToolDescriptor.from_json(t) for t in first.payload.get("tools", ())),
        env_info=first.payload.get("env_info"),
    )
    transcript_path = Path(config.workdir) / "transcript.resumed.jsonl"
    session = Session.from_transcript(events, config, deps, transcript_path=transcript_path)
    try:
        result = session.run(args.followup)
        return _finish_run(session, result.outcome)
    finally:
        session.close()


def _cmd_replay(args: argparse.Namespace) -> int:
    events = load_events(args.transcript)
    if args.workdir:
        workdir = args.workdir
    else:
        # Replay re-executes code, so the scratch dir is seeded with the
        # recorded workdir's files (inputs included); transcripts and
        # notebooks are regenerated, not copied.
        workdir = tempfile.mkdtemp(prefix="cellflow-replay-")
        source = Path(args.transcript).resolve().parent
        if source.is_dir():
            shutil.copytree(
                source,
                workdir,
                dirs_exist_ok=True,
                ignore=shutil.ignore_patterns("*.jsonl", "*.ipynb"),
            )
    replay_path = Path(workdir) / "transcript.replay.jsonl"
    try:
        replay_transcript(events, workdir, transcript_path=replay_path)
    except ReplayDivergence as exc:
        print(f"replay diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    original = normalize_events(events)
    replayed = normalize_file(replay_path)
    if original != replayed:
        print("replay diverged: normalized transcripts differ", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"replay ok: {replay_path}")
    return EXIT_OK


def _cmd_bench(args: argparse.Namespace) -> int:
    record = _load_config_file(args.config)
    config = _session_config(record, args)

    def provider_factory(_manifest):
        return _provider(record)

    bench = BenchConfig(
        session_config=config,
        limit_seconds=args.limit_seconds,
        workers=args.workers,
        provider_factory=provider_factory,
        work_root=args.work_root,
    )
    report = run_benchmark(args.tasks, bench)
    out = Path(args.work_root) / "report.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report.to_json(), indent=2), encoding="utf-8")
    print(report.render_table())
    print(f"report: {out}")
    return EXIT_OK


def _cmd_stats(args: argparse.Namespace) -> int:
    paths = sorted(glob.glob(args.transcripts))
    if not paths:
        print("no transcripts matched", file=sys.stderr)
        return EXIT_USAGE
    transcripts = [load_events(p) for p in paths]
    stats = transition_stats(transcripts)
    print(f"{'transcripts':<14} {len(paths)}")
    print(f"{'avg llm calls':<14} {stats.avg_llm_calls:.2f}")
    print(f"{'planning':<14} {stats.avg_planning_entries:.2f}")
    print(f"{'code repair':<14} {stats.avg_repair_entries:.2f}")
    return EXIT_OK


def _cmd_export_notebook(args: argparse.Namespace) -> int:
    events = load_events(args.transcript)
    workdir = Path(args.transcript).resolve().parent
    write_notebook(args.out, trace_cells_from_events(events), workdir=workdir)
    print(f"notebook: {args.out}")
    return EXIT_OK


def _cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .sessionservice import create_app

    record = _load_config_file(args.config)
    app = create_app(default_config=record)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cellflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--model")
        p.add_argument("--temperature", type=float)
        p.add_argument("--timeout", type=float, help="task timeout in seconds")
        p.add_argument("--backend", choices=["local", "gateway"])
        p.add_argument("--disable-planning", action="store_true")
        p.add_argument("--disable-repair", action="store_true")
        for name in (
            "max-planning-number",
            "max-execution-number",
            "max-debug-number",
            "max-planning-execution-number",
        ):
            p.add_argument(f"--{name}", type=int, dest=name.replace("-", "_"))

    p_run = sub.add_parser("run", help="run one instruction")
    p_run.add_argument("--instruction", required=True, help="instruction file or - for stdin")
    p_run.add_argument("--workdir", required=True)
    add_common(p_run)
    p_run.set_defaults(func=_cmd_run)

    p_resume = sub.add_parser("resume", help="resume a recorded session with a follow-up")
    p_resume.add_argument("--transcript", required=True)
    p_resume.add_argument("--followup", required=True)
    p_resume.add_argument("--workdir")
    add_common(p_resume)
    p_resume.set_defaults(func=_cmd_resume)

    p_replay = sub.add_parser("replay", help="deterministically replay a transcript")
    p_replay.add_argument("--transcript", required=True)
    p_replay.add_argument("--workdir", help="scratch dir (default: temp)")
    p_replay.set_defaults(func=_cmd_replay)

    p_bench = sub.add_parser("bench", help="run a benchmark task directory")
    p_bench.add_argument("--tasks", required=True)
    p_bench.add_argument("--limit-seconds", type=float, default=3600.0)
    p_bench.add_argument("--workers", type=int, default=1)
    p_bench.add_argument("--work-root", default="bench_work")
    add_common(p_bench)
    p_bench.set_defaults(func=_cmd_bench)

    p_stats = sub.add_parser("stats", help="transition statistics over transcripts")
    p_stats.add_argument("--transcripts", required=True, help="glob pattern")
    p_stats.set_defaults(func=_cmd_stats)

    p_export = sub.add_parser("export-notebook", help="export a transcript as .ipynb")
    p_export.add_argument("--transcript", required=True)
    p_export.add_argument("--out", required=True)
    p_export.set_defaults(func=_cmd_export_notebook)

    p_serve = sub.add_parser("serve", help="serve the session API")
    p_serve.add_argument("--port", type=int, default=8777)
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--config")
    p_serve.set_defaults(func=_cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ReplayDivergence as exc:
        print(f"replay diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FileNotFoundError, ValueError) as exc:
        parser.exit(EXIT_USAGE, f"error: {exc}\n")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
