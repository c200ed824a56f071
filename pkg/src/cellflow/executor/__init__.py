"""Stateful code execution sessions behind one handle API.

Two backends: a local sandboxed interpreter subprocess (framed pipe
protocol) and a remote kernel-gateway client.  All executions on a handle
share one interpreter state; distinct handles never share state or files
outside their workdirs.
"""

from __future__ import annotations

import itertools
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

from ..cellmodel import Cell, CellKind, CellOutput, OutputChannel
from ..statemachine import Feedback
from .gateway import GatewayConfig, GatewayWorker
from .local import BackendUnavailable, KernelDead, LocalWorker

__all__ = [
    "BackendConfig",
    "BackendUnavailable",
    "ExecResult",
    "GatewayConfig",
    "KernelDead",
    "KernelHandle",
    "LocalBackendConfig",
    "classify_feedback",
    "execute_cells",
    "interrupt",
    "start_session",
]


@dataclass(frozen=True)
class LocalBackendConfig:
    kind: str = "local"

    def to_json(self) -> dict:
        return {"kind": self.kind}


BackendConfig = Union[LocalBackendConfig, GatewayConfig]


@dataclass
class ExecResult:
    """Outcome of executing one action's cells in order."""

    cell_outputs: tuple[tuple[CellOutput, ...], ...]
    feedback: Feedback
    elapsed: float
    aborted_at_cell: int | None = None


class KernelHandle:
    """One live interpreter session; executions are serialized per handle."""

    def __init__(self, worker, backend_kind: str, workdir: Path) -> None:
        self._worker = worker
        self.backend_kind = backend_kind
        self.session_id = uuid.uuid4().hex[:12]
        self.workdir = workdir
        self.accumulated_wall_time = 0.0
        self._exec_n = itertools.count(1)

    @property
    def alive(self) -> bool:
        return getattr(self._worker, "alive", False)

    def execute_cells(
        self, cells: Sequence[Cell], per_action_timeout: float | None = None
    ) -> ExecResult:
        """Run code cells sequentially in shared state; stop at first error.

        Markdown cells are skipped.  A timeout synthesizes an error output
        named ``Timeout``; an interrupt synthesizes ``Interrupted``.
        """

        if not self.alive:
            raise KernelDead("session is not live")
        started = time.monotonic()
        deadline = started + per_action_timeout if per_action_timeout is not None else None
        per_cell: list[tuple[CellOutput, ...]] = []
        aborted_at: int | None = None
        for index, cell in enumerate(cells):
            if cell.kind is not CellKind.CODE:
                per_cell.append(())
                continue
            remaining = None if deadline is None else max(0.0, deadline - time.monotonic())
            exec_id = f"{cell.id}#{next(self._exec_n)}"
            outputs, status = self._worker.execute(exec_id, cell.source, remaining)
            outputs = list(outputs)
            if status == "timeout":
                outputs = [
                    o
                    for o in outputs
                    if not (
                        o.channel is OutputChannel.ERROR
                        and o.error_name == "KeyboardInterrupt"
                    )
                ]
                outputs.append(
                    CellOutput(
                        channel=OutputChannel.ERROR,
                        error_name="Timeout",
                        error_value=f"execution exceeded {per_action_timeout:.0f}s budget",
                    )
                )
            elif status == "interrupted":
                outputs = [
                    o
                    for o in outputs
                    if not (
                        o.channel is OutputChannel.ERROR
                        and o.error_name == "KeyboardInterrupt"
                    )
                ]
                outputs.append(
                    CellOutput(
                        channel=OutputChannel.ERROR,
                        error_name="Interrupted",
                        error_value="execution was interrupted",
                    )
                )
            per_cell.append(tuple(outputs))
            if any(o.channel is OutputChannel.ERROR for o in outputs):
                aborted_at = index
                per_cell.extend(() for _ in cells[index + 1 :])
                break
        elapsed = time.monotonic() - started
        self.accumulated_wall_time += elapsed
        feedback = classify_feedback(per_cell, [c.id for c in cells])
        return ExecResult(
            cell_outputs=tuple(per_cell),
            feedback=feedback,
            elapsed=elapsed,
            aborted_at_cell=aborted_at,
        )

    def interrupt(self) -> bool:
        """Abort the current execution; the handle stays usable."""

        if not self.alive:
            raise KernelDead("session is not live")
        self._worker.send_interrupt()
        return True

    def close(self) -> None:
        self._worker.close()


def start_session(backend: BackendConfig, workdir: str | Path) -> KernelHandle:
    """Open a live execution session with empty interpreter state."""

    wd = Path(workdir)
    wd.mkdir(parents=True, exist_ok=True)
    if isinstance(backend, GatewayConfig):
        return KernelHandle(GatewayWorker(backend, wd), "gateway", wd)
    return KernelHandle(LocalWorker(wd), "local", wd)


def execute_cells(
    handle: KernelHandle, cells: Sequence[Cell], per_action_timeout: float | None = None
) -> ExecResult:
    return handle.execute_cells(cells, per_action_timeout)


def interrupt(handle: KernelHandle) -> bool:
    return handle.interrupt()


def classify_feedback(
    cell_outputs: Sequence[Sequence[CellOutput]],
    cell_ids: Sequence[str] | None = None,
) -> Feedback:
    """Error iff some cell produced an error-channel output.

    Stderr text without an exception is routine (library warnings) and does
    not count as an error.
    """

    for index, outputs in enumerate(cell_outputs):
        for output in outputs:
            if output.channel is OutputChannel.ERROR:
                failing_id = cell_ids[index] if cell_ids and index < len(cell_ids) else None
                return Feedback.error(
                    output.error_name or "Error",
                    output.error_value or "",
                    failing_id,
                )
    return Feedback.ok()
