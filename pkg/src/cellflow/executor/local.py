"""Local execution backend: one interpreter child process per session.

The child (see :mod:`cellflow.executor.worker`) holds the persistent
namespace; this side speaks the framed pipe protocol, assembles cell
outputs, and enforces timeouts and interrupts (interrupt frame plus SIGINT,
escalating to SIGKILL if the worker stops responding).
"""

from __future__ import annotations

import logging
import queue
import signal
import subprocess
import sys
import threading
import time
from pathlib import Path

from ..cellmodel import CellOutput, OutputChannel, TruncationPolicy
from .frames import read_frame, write_frame

logger = logging.getLogger(__name__)

#: Capture-side cap per output stream; rendering applies its own policy.
CAPTURE_LIMIT = 200_000

_INTERRUPT_GRACE_S = 2.0


class BackendUnavailable(Exception):
    pass


class KernelDead(Exception):
    pass


class LocalWorker:
    """Framed-protocol client around one worker subprocess."""

    def __init__(self, workdir: Path) -> None:
        self.workdir = workdir
        try:
            self._proc = subprocess.Popen(
                [sys.executable, "-u", "-m", "cellflow.executor.worker", str(workdir)],
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
            )
        except OSError as exc:
            raise BackendUnavailable(f"cannot launch worker: {exc}") from exc
        self._stdin_lock = threading.Lock()
        self._frames: "queue.Queue[dict | Exception | None]" = queue.Queue()
        threading.Thread(target=self._pump, daemon=True).start()
        boot = self._next_frame(timeout=30.0)
        if not isinstance(boot, dict) or boot.get("id") != "__boot__":
            self.close()
            raise BackendUnavailable("worker failed to boot")

    def _pump(self) -> None:
        while True:
            try:
                frame = read_frame(self._proc.stdout)
            except Exception as exc:  # noqa: BLE001 - forwarded to the consumer
                self._frames.put(exc)
                return
            self._frames.put(frame)
            if frame is None:
                return

    @property
    def alive(self) -> bool:
        return self._proc.poll() is None

    def _next_frame(self, timeout: float | None) -> dict | None:
        """One frame from the worker; None on EOF; raises on deadline/breakage."""

        try:
            got = self._frames.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError from None
        if isinstance(got, Exception):
            raise KernelDead(f"worker pipe broke: {got}")
        return got

    def send_interrupt(self) -> None:
        if not self.alive:
            raise KernelDead("worker process has exited")
        # One interrupt only: SIGINT breaks both compute loops and blocking
        # sleeps.  The interrupt frame is the fallback when signal delivery
        # is unavailable (it cannot preempt blocking syscalls).
        try:
            self._proc.send_signal(signal.SIGINT)
            return
        except OSError:
            pass
        try:
            with self._stdin_lock:
                write_frame(self._proc.stdin, {"type": "interrupt"})
        except OSError:
            pass

    def execute(
        self, cell_id: str, code: str, timeout: float | None
    ) -> tuple[list[CellOutput], str]:
        """Run one cell; returns (outputs, status in {ok, error, interrupted, timeout})."""

        if not self.alive:
            raise KernelDead("worker process has exited")
        try:
            with self._stdin_lock:
                write_frame(self._proc.stdin, {"type": "exec", "id": cell_id, "code": code})
        except OSError as exc:
            raise KernelDead(f"worker stdin broke: {exc}") from exc

        deadline = time.monotonic() + timeout if timeout is not None else None
        chunks: dict[str, list[str]] = {"stdout": [], "stderr": []}
        outputs: list[CellOutput] = []
        status = "ok"
        timed_out = False
        interrupting = False
        while True:
            remaining = None if deadline is None else max(0.0, deadline - time.monotonic())
            try:
                frame = self._next_frame(remaining)
            except TimeoutError:
                if interrupting:
                    self._proc.kill()
                    raise KernelDead("worker unresponsive to interrupt; killed") from None
                timed_out = True
                interrupting = True
                self.send_interrupt()
                deadline = time.monotonic() + _INTERRUPT_GRACE_S
                continue
            if frame is None:
                raise KernelDead("worker exited mid-execution")
            ftype = frame["type"]
            if ftype in ("stdout", "stderr"):
                chunks[ftype].append(frame.get("text", ""))
            elif ftype == "rich":
                outputs.append(
                    CellOutput(
                        channel=OutputChannel.RICH,
                        text=frame.get("text") or "",
                        mime=frame.get("mime"),
                        payload_path=frame.get("path"),
                    )
                )
            elif ftype == "error":
                outputs.append(
                    CellOutput(
                        channel=OutputChannel.ERROR,
                        error_name=frame.get("ename", "Error"),
                        error_value=frame.get("evalue", ""),
                        traceback=tuple(frame.get("traceback", ())),
                    )
                )
            elif ftype == "done":
                status = frame.get("status", "ok")
                break

        stream_outputs: list[CellOutput] = []
        for channel in ("stdout", "stderr"):
            text = "".join(chunks[channel])
            if text:
                clipped, truncated = _clip(text)
                stream_outputs.append(
                    CellOutput(
                        channel=OutputChannel(channel), text=clipped, truncated=truncated
                    )
                )
        ordered = stream_outputs + outputs
        if timed_out:
            status = "timeout"
        return ordered, status

    def close(self) -> None:
        if self._proc.poll() is None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=2)
            except subprocess.TimeoutExpired:
                self._proc.kill()


def _clip(text: str) -> tuple[str, bool]:
    policy = TruncationPolicy(head_chars=CAPTURE_LIMIT // 2, tail_chars=CAPTURE_LIMIT // 2)
    return policy.apply(text)
