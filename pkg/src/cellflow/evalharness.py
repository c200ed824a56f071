"""Benchmark metrics, task runners, and transition statistics.

Three accuracy views over question suites (per-question averaged, all-or-
nothing, and pooled subquestions), the clamped normalized score for
modeling tasks, a manifest-driven benchmark runner with a per-task time
limit, and per-task transition statistics computed purely from transcripts.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import shutil
import subprocess
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Callable, Sequence

from .orchestrator import Outcome, Session, SessionConfig, SessionDeps
from .transcript import CorruptTranscript, Event, load_events

logger = logging.getLogger(__name__)


class Empty(ValueError):
    pass


class DegenerateBounds(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class QuestionResult:
    """Per-subquestion correctness flags for one benchmark question."""

    question_id: str
    flags: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.flags:
            raise ValueError("a question needs at least one subquestion")
        if any(f not in (0, 1) for f in self.flags):
            raise ValueError("subquestion flags must be 0 or 1")


@dataclass(frozen=True)
class AnalysisScores:
    pasq: float
    abq: float
    uasq: float


def score_analysis(results: Sequence[QuestionResult]) -> AnalysisScores:
    """Per-question averaged, all-correct, and pooled subquestion accuracy."""

    if not results:
        raise Empty("no question results to score")
    pasq = sum(sum(q.flags) / len(q.flags) for q in results) / len(results)
    abq = sum(1 for q in results if all(q.flags)) / len(results)
    total = sum(len(q.flags) for q in results)
    uasq = sum(sum(q.flags) for q in results) / total
    return AnalysisScores(pasq=pasq, abq=abq, uasq=uasq)


@dataclass(frozen=True)
class ModelingEntry:
    """One modeling task: agent score vs. baseline and best-known scores."""

    task_id: str
    p: float
    b: float
    g: float
    completed: bool = True
    elapsed: float = 0.0
    higher_is_better: bool = True


def score_rpg(entries: Sequence[ModelingEntry]) -> float:
    """Mean zero-clamped normalized gain over the baseline, in [0, 1].

    Incomplete entries score at the baseline (zero credit).  Lower-is-better
    metrics are negated before normalizing.
    """

    if not entries:
        raise Empty("no modeling entries to score")
    total = 0.0
    for entry in entries:
        sign = 1.0 if entry.higher_is_better else -1.0
        p = sign * (entry.p if entry.completed else entry.b)
        b, g = sign * entry.b, sign * entry.g
        if g == b:
            raise DegenerateBounds(f"task {entry.task_id}: best equals baseline")
        total += max((p - b) / (g - b), 0.0)
    return total / len(entries)


@dataclass(frozen=True)
class TransitionStats:
    avg_llm_calls: float
    avg_planning_entries: float
    avg_repair_entries: float

    def to_json(self) -> dict:
        return {
            "avg_llm_calls": self.avg_llm_calls,
            "avg_planning_entries": self.avg_planning_entries,
            "avg_repair_entries": self.avg_repair_entries,
        }


def _per_task_counts(events: Sequence[dict]) -> tuple[int, int, int]:
    llm_calls = 0
    planning = 0
    repairs = 0
    for i, record in enumerate(events):
        etype = record.get("type")
        if etype == "llm_call":
            llm_calls += 1
        elif etype == "transition":
            payload = record.get("payload", {})
            target = payload.get("to")
            if i + 1 < len(events) and events[i + 1].get("type") == "forced":
                target = events[i + 1].get("payload", {}).get("to")
            if target == "plan":
                planning += 1
            elif target == "debug" and payload.get("from") != "debug":
                repairs += 1
    return llm_calls, planning, repairs


def transition_stats(transcripts: Sequence[Sequence]) -> TransitionStats:
    """Average per-task LLM calls, planning entries, and repair entries.

    Budget-forced moves count as stage entries but never as LLM calls.
    """

    if not transcripts:
        raise Empty("no transcripts")
    totals = [0, 0, 0]
    for events in transcripts:
        try:
            records = [e.to_json() if isinstance(e, Event) else dict(e) for e in events]
            counts = _per_task_counts(records)
        except (AttributeError, TypeError, KeyError) as exc:
            raise CorruptTranscript(f"malformed transcript: {exc}") from exc
        for i, value in enumerate(counts):
            totals[i] += value
    n = len(transcripts)
    return TransitionStats(
        avg_llm_calls=totals[0] / n,
        avg_planning_entries=totals[1] / n,
        avg_repair_entries=totals[2] / n,
    )


@dataclass(frozen=True)
class GraderSpec:
    kind: str  # exact_answer | file_exists | external
    answer_path: str | None = None
    command: str | None = None
    numeric_tolerance: float = 1e-9

    def __post_init__(self) -> None:
        if self.kind not in ("exact_answer", "file_exists", "external"):
            raise ManifestError(f"unknown grader kind {self.kind!r}")


@dataclass(frozen=True)
class TaskManifest:
    id: str
    instruction_path: str
    input_dir: str | None
    expected_artifact: str
    grader: GraderSpec
    base_dir: Path

    @staticmethod
    def load(path: str | Path) -> "TaskManifest":
        path = Path(path)
        try:
            record = json.loads(path.read_text(encoding="utf-8"))
            grader_rec = record.get("grader", {"kind": "file_exists"})
            if isinstance(grader_rec, str):
                grader_rec = {"kind": grader_rec}
            return TaskManifest(
                id=record["id"],
                instruction_path=record["instruction_path"],
                input_dir=record.get("input_dir"),
                expected_artifact=record["expected_artifact"],
                grader=GraderSpec(**grader_rec),
                base_dir=path.parent,
            )
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise ManifestError(f"{path}: {exc}") from exc


def discover_manifests(task_dir: str | Path) -> list[Path]:
    base = Path(task_dir)
    found = sorted(base.glob("*/manifest.json")) + sorted(
        p for p in base.glob("*.json") if p.name != "report.json"
    )
    return found


@dataclass
class TaskReport:
    task_id: str
    success: bool
    outcome: str
    elapsed: float
    completed: bool
    cost: str
    score: float | None = None
    error: str | None = None
    transcript_path: str | None = None

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class BenchReport:
    tasks: list[TaskReport]
    limit_seconds: float
    stats: TransitionStats | None = None
    manifest_errors: list[str] = field(default_factory=list)

    @property
    def success_rate(self) -> float:
        if not self.tasks:
            return 0.0
        return sum(1 for t in self.tasks if t.success) / len(self.tasks)

    def to_json(self) -> dict:
        return {
            "limit_seconds": self.limit_seconds,
            "n_tasks": len(self.tasks),
            "success_rate": self.success_rate,
            "avg_elapsed": (
                sum(t.elapsed for t in self.tasks) / len(self.tasks) if self.tasks else 0.0
            ),
            "total_cost": str(sum((Decimal(t.cost) for t in self.tasks), Decimal(0))),
            "stats": self.stats.to_json() if self.stats else None,
            "tasks": [t.to_json() for t in self.tasks],
            "manifest_errors": self.manifest_errors,
        }

    def render_table(self) -> str:
        header = f"{'task':<24} {'ok':<4} {'outcome':<12} {'elapsed/s':>10} {'cost':>10}"
        lines = [header, "-" * len(header)]
        for t in self.tasks:
            lines.append(
                f"{t.task_id:<24} {'yes' if t.success else 'no':<4} "
                f"{t.outcome:<12} {t.elapsed:>10.2f} {t.cost:>10}"
            )
        lines.append("-" * len(header))
        lines.append(
            f"tasks={len(self.tasks)} success_rate={self.success_rate:.2%}"
        )
        if self.stats:
            lines.append(
                f"avg llm calls={self.stats.avg_llm_calls:.2f} "
                f"planning={self.stats.avg_planning_entries:.2f} "
                f"code repair={self.stats.avg_repair_entries:.2f}"
            )
        return "\n".join(lines)


def _grade(manifest: TaskManifest, artifact: Path) -> tuple[bool, float | None]:
    """Artifact-based success plus an optional grader score."""

    if not artifact.is_file():
        return False, None
    grader = manifest.grader
    if grader.kind == "file_exists":
        return True, None
    if grader.kind == "exact_answer":
        expected = (manifest.base_dir / (grader.answer_path or "")).read_text("utf-8").strip()
        actual = artifact.read_text("utf-8").strip()
        if expected == actual:
            return True, 1.0
        try:
            if abs(float(expected) - float(actual)) <= grader.numeric_tolerance:
                return True, 1.0
        except ValueError:
            pass
        return True, 0.0  # artifact produced (task ran to completion), answer wrong
    # external: command template with {artifact}; stdout is a float score
    command = (grader.command or "").replace("{artifact}", str(artifact))
    proc = subprocess.run(command, shell=True, capture_output=True, text=True, timeout=300)
    if proc.returncode != 0:
        return True, 0.0
    try:
        return True, float(proc.stdout.strip().splitlines()[-1])
    except (ValueError, IndexError):
        return True, 0.0


@dataclass
class BenchConfig:
    session_config: SessionConfig
    limit_seconds: float = 3600.0
    workers: int = 1
    provider_factory: Callable[[TaskManifest], object] | None = None
    work_root: str | Path = "bench_work"


def _run_one(manifest: TaskManifest, config: BenchConfig) -> TaskReport:
    work = Path(config.work_root) / manifest.id
    work.mkdir(parents=True, exist_ok=True)
    if manifest.input_dir:
        src = manifest.base_dir / manifest.input_dir
        if src.is_dir():
            shutil.copytree(src, work / "input", dirs_exist_ok=True)
    instruction = (manifest.base_dir / manifest.instruction_path).read_text("utf-8")
    session_config = dataclasses.replace(
        config.session_config,
        workdir=str(work),
        task_timeout_s=config.limit_seconds,
    )
    assert config.provider_factory is not None, "benchmark needs a provider factory"
    deps = SessionDeps(provider=config.provider_factory(manifest))
    started = time.monotonic()
    session = None
    try:
        session = Session(session_config, deps)
        result = session.run(instruction)
        elapsed = min(time.monotonic() - started, config.limit_seconds)
        completed = result.outcome is not Outcome.TIMEOUT
        if not completed:
            elapsed = config.limit_seconds
        artifact = work / manifest.expected_artifact
        produced, score = _grade(manifest, artifact)
        success = produced and result.outcome is not Outcome.ABORTED and completed
        return TaskReport(
            task_id=manifest.id,
            success=success,
            outcome=result.outcome.value,
            elapsed=elapsed,
            completed=completed,
            cost=str(result.cost),
            score=score,
            transcript_path=str(result.transcript.path) if result.transcript.path else None,
        )
    except Exception as exc:  # noqa: BLE001 - a task failure never stops the run
        logger.exception("task %s aborted", manifest.id)
        return TaskReport(
            task_id=manifest.id,
            success=False,
            outcome="aborted",
            elapsed=min(time.monotonic() - started, config.limit_seconds),
            completed=False,
            cost="0",
            error=str(exc),
        )
    finally:
        if session is not None:
            session.close()


def run_benchmark(task_dir: str | Path, config: BenchConfig) -> BenchReport:
    """Run every task manifest under ``task_dir`` and aggregate a report."""

    manifests: list[TaskManifest] = []
    errors: list[str] = []
    for path in discover_manifests(task_dir):
        try:
            manifests.append(TaskManifest.load(path))
        except ManifestError as exc:
            errors.append(str(exc))
    reports: list[TaskReport]
    if not manifests:
        return BenchReport(tasks=[], limit_seconds=config.limit_seconds, manifest_errors=errors)
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            reports = list(pool.map(lambda m: _run_one(m, config), manifests))
    else:
        reports = [_run_one(m, config) for m in manifests]
    transcripts = []
    for report in reports:
        if report.transcript_path:
            try:
                transcripts.append(load_events(report.transcript_path))
            except CorruptTranscript:
                pass
    stats = transition_stats(transcripts) if transcripts else None
    return BenchReport(
        tasks=reports,
        limit_seconds=config.limit_seconds,
        stats=stats,
        manifest_errors=errors,
    )
