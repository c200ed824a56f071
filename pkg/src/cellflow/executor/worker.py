"""Interpreter child process for the local execution backend.

Runs one persistent namespace; reads exec frames from stdin, streams output
frames to stdout (the real stdout is reserved for frames; user prints are
captured).  A reader thread watches for interrupt frames and raises
KeyboardInterrupt in the executing thread; the parent may also send SIGINT.

Launched as ``python -m cellflow.executor.worker <workdir>``.
"""

from __future__ import annotations

import ast
import io
import os
import queue
import sys
import threading
import traceback as tb_module
import _thread

from .frames import read_frame, write_frame

MEDIA_EXTENSIONS = {".png", ".jpg", ".jpeg", ".svg", ".gif", ".pdf", ".webp"}
_MIME_FOR_EXT = {
    ".png": "image/png",
    ".jpg": "image/jpeg",
    ".jpeg": "image/jpeg",
    ".svg": "image/svg+xml",
    ".gif": "image/gif",
    ".pdf": "application/pdf",
    ".webp": "image/webp",
}


class _FrameWriter(io.TextIOBase):
    """File-like stdout/stderr replacement that emits output frames."""

    def __init__(self, out, lock: threading.Lock, channel: str) -> None:
        self._out = out
        self._lock = lock
        self._channel = channel
        self.cell_id = ""

    def writable(self) -> bool:  # pragma: no cover - io protocol
        return True

    def write(self, text: str) -> int:
        if text:
            with self._lock:
                write_frame(
                    self._out,
                    {"type": self._channel, "id": self.cell_id, "text": text},
                )
        return len(text)

    def flush(self) -> None:  # pragma: no cover - io protocol
        pass


def _snapshot_media(workdir: str) -> dict[str, float]:
    stamps: dict[str, float] = {}
    for root, _dirs, files in os.walk(workdir):
        for name in files:
            if os.path.splitext(name)[1].lower() in MEDIA_EXTENSIONS:
                path = os.path.join(root, name)
                try:
                    stamps[path] = os.stat(path).st_mtime
                except OSError:
                    pass
    return stamps


def _autosave_figures(workdir: str, counter: list[int]) -> list[str]:
    """Save any open matplotlib figures so plots surface as rich outputs."""

    if "matplotlib" not in sys.modules:
        return []
    saved: list[str] = []
    try:
        import matplotlib.pyplot as plt  # type: ignore

        for num in plt.get_fignums():
            counter[0] += 1
            rel = os.path.join("outputs", f"figure_{counter[0]}.png")
            path = os.path.join(workdir, rel)
            os.makedirs(os.path.dirname(path), exist_ok=True)
            plt.figure(num).savefig(path)
            saved.append(path)
        plt.close("all")
    except Exception:
        pass
    return saved


def _send_guarded(out, lock: threading.Lock, frame: dict) -> None:
    """Write a frame, retrying if a stray interrupt lands mid-send."""

    for _ in range(3):
        try:
            with lock:
                write_frame(out, frame)
            return
        except KeyboardInterrupt:
            continue


def _run_cell(code: str, namespace: dict) -> object | None:
    """Execute one cell; return the trailing expression's value, if any."""

    tree = ast.parse(code, mode="exec")
    trailing: ast.Expression | None = None
    if tree.body and isinstance(tree.body[-1], ast.Expr):
        trailing = ast.Expression(tree.body.pop(-1).value)
    if tree.body:
        exec(compile(tree, "<cell>", "exec"), namespace)
    if trailing is not None:
        return eval(compile(trailing, "<cell>", "eval"), namespace)
    return None


def main() -> int:
    workdir = sys.argv[1] if len(sys.argv) > 1 else os.getcwd()
    os.makedirs(workdir, exist_ok=True)
    os.chdir(workdir)

    raw_out = sys.stdout.buffer
    raw_in = sys.stdin.buffer
    out_lock = threading.Lock()
    stdout_writer = _FrameWriter(raw_out, out_lock, "stdout")
    stderr_writer = _FrameWriter(raw_out, out_lock, "stderr")
    sys.stdout = stdout_writer  # type: ignore[assignment]
    sys.stderr = stderr_writer  # type: ignore[assignment]

    requests: "queue.Queue[dict | None]" = queue.Queue()

    def reader() -> None:
        while True:
            try:
                frame = read_frame(raw_in)
            except Exception:
                frame = None
            if frame is None:
                requests.put(None)
                return
            if frame["type"] == "interrupt":
                _thread.interrupt_main()
                continue
            requests.put(frame)

    threading.Thread(target=reader, daemon=True).start()

    namespace: dict = {"__name__": "__main__", "__builtins__": __builtins__}
    figure_counter = [0]
    with out_lock:
        write_frame(raw_out, {"type": "done", "id": "__boot__", "status": "ok"})

    while True:
        try:
            frame = requests.get()
        except KeyboardInterrupt:
            continue  # interrupt while idle: acknowledged, nothing to abort
        if frame is None:
            return 0
        if frame["type"] != "exec":
            continue
        cell_id = frame.get("id", "")
        stdout_writer.cell_id = cell_id
        stderr_writer.cell_id = cell_id
        before = _snapshot_media(workdir)
        status = "ok"
        try:
            value = _run_cell(frame.get("code", ""), namespace)
            if value is not None:
                with out_lock:
                    write_frame(
                        raw_out,
                        {
                            "type": "rich",
                            "id": cell_id,
                            "mime": "text/plain",
                            "path": None,
                            "text": repr(value),
                        },
                    )
        except KeyboardInterrupt:
            status = "interrupted"
            _send_guarded(
                raw_out,
                out_lock,
                {
                    "type": "error",
                    "id": cell_id,
                    "ename": "KeyboardInterrupt",
                    "evalue": "",
                    "traceback": [],
                },
            )
        except BaseException as exc:  # noqa: BLE001 - report, never die
            status = "error"
            lines = tb_module.format_exception(type(exc), exc, exc.__traceback__)
            _send_guarded(
                raw_out,
                out_lock,
                {
                    "type": "error",
                    "id": cell_id,
                    "ename": type(exc).__name__,
                    "evalue": str(exc),
                    "traceback": [l.rstrip("\n") for l in lines],
                },
            )

        # A late duplicate interrupt must not kill the bookkeeping below.
        try:
            reported: set[str] = set()
            for path in _autosave_figures(workdir, figure_counter):
                reported.add(path)
                rel = os.path.relpath(path, workdir)
                _send_guarded(
                    raw_out,
                    out_lock,
                    {"type": "rich", "id": cell_id, "mime": "image/png", "path": rel, "text": ""},
                )
            after = _snapshot_media(workdir)
            fresh = {
                path
                for path, stamp in after.items()
                if path not in reported and stamp != before.get(path)
            }
            for path in sorted(fresh):
                rel = os.path.relpath(path, workdir)
                ext = os.path.splitext(path)[1].lower()
                _send_guarded(
                    raw_out,
                    out_lock,
                    {
                        "type": "rich",
                        "id": cell_id,
                        "mime": _MIME_FOR_EXT.get(ext, "application/octet-stream"),
                        "path": rel,
                        "text": "",
                    },
                )
        except KeyboardInterrupt:
            pass
        _send_guarded(raw_out, out_lock, {"type": "done", "id": cell_id, "status": status})


if __name__ == "__main__":
    sys.exit(main())
