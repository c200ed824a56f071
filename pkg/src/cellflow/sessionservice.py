"""Network API exposing live sessions to the steering UI.

HTTP JSON for commands, server-sent events (and a WebSocket twin) for the
event stream; stream frames are exactly the transcript's JSONL lines, so a
client can reconstruct the full view from any ``since`` sequence number
with no gaps or duplicates.  Sessions live in memory; a bearer token from
the environment guards every endpoint when set.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
import threading
import uuid
from dataclasses import dataclass, field

from fastapi import (
    Depends,
    FastAPI,
    HTTPException,
    Query,
    Request,
    WebSocket,
    WebSocketDisconnect,
)
from fastapi.responses import JSONResponse, StreamingResponse
from pydantic import BaseModel

from .cellmodel import SessionMeta, export_notebook
from .executor import BackendUnavailable
from .orchestrator import Outcome, Session, SessionConfig, SessionDeps
from .statemachine import AgentState
from .trajectory import trace_cells_from_events

logger = logging.getLogger(__name__)

TOKEN_ENV = "CELLFLOW_TOKEN"


class CreateSessionRequest(BaseModel):
    config: dict = {}
    provider: dict = {}
    tools: list[dict] = []
    workdir: str | None = None


class InstructionRequest(BaseModel):
    text: str


@dataclass
class ManagedSession:
    """One live session plus its service-side bookkeeping."""

    session: Session
    record_id: str
    lock: threading.Lock = field(default_factory=threading.Lock)
    thread: threading.Thread | None = None
    ran_once: bool = False
    error: str | None = None

    @property
    def running(self) -> bool:
        return self.thread is not None and self.thread.is_alive()

    def status(self) -> str:
        if self.session.closed:
            return "closed"
        if self.error or self.session._outcome is Outcome.ABORTED:
            return "aborted"
        if self.running:
            return "running"
        if self.session.state is AgentState.IDLE and self.ran_once:
            return "awaiting_user"
        return "idle"

    def record(self) -> dict:
        session = self.session
        return {
            "session_id": self.record_id,
            "status": self.status(),
            "config": {
                "model": session.config.model,
                "language_tag": session.config.language_tag,
                "budgets": session.config.budgets.to_json(),
                "ablations": session.config.ablations.to_json(),
            },
            "counters": session.counters.to_json(),
            "cost": str(session.ledger.total()),
            "events": len(session.transcript),
        }

    def submit(self, text: str) -> None:
        with self.lock:
            if self.running:
                raise Busy
            resume = self.ran_once

            def work() -> None:
                try:
                    if resume:
                        self.session.resume(text)
                    else:
                        self.session.run(text)
                except Exception as exc:  # noqa: BLE001 - surfaced via status
                    logger.exception("session %s failed", self.record_id)
                    self.error = str(exc)

            self.ran_once = True
            self.thread = threading.Thread(target=work, daemon=True)
            self.thread.start()


class Busy(Exception):
    pass


class SessionManager:
    def __init__(self, default_config: dict | None = None, work_root: str | None = None):
        self.sessions: dict[str, ManagedSession] = {}
        self.default_config = default_config or {}
        self.work_root = work_root
        self._lock = threading.Lock()

    def create(self, request: CreateSessionRequest) -> ManagedSession:
        from .cli import _provider, _tools  # shared config builders

        record = dict(self.default_config)
        record.update(request.config)
        if request.provider:
            record["provider"] = request.provider
        if request.tools:
            record["tools"] = request.tools
        workdir = request.workdir or tempfile.mkdtemp(
            prefix="cellflow-session-", dir=self.work_root
        )
        config_record = {k: v for k, v in record.items() if k not in ("provider", "tools", "tool_registry")}
        config_record["workdir"] = workdir
        config = SessionConfig.from_json({**SessionConfig().to_json(), **config_record})
        deps = SessionDeps(provider=_provider(record), tools=_tools(record))
        session = Session(config, deps)
        managed = ManagedSession(session=session, record_id=uuid.uuid4().hex[:12])
        with self._lock:
            self.sessions[managed.record_id] = managed
        return managed

    def get(self, session_id: str) -> ManagedSession:
        try:
            return self.sessions[session_id]
        except KeyError:
            raise HTTPException(status_code=404, detail="unknown session id") from None


def create_app(
    manager: SessionManager | None = None, default_config: dict | None = None
) -> FastAPI:
    app = FastAPI(title="cellflow session service")
    mgr = manager or SessionManager(default_config=default_config)
    app.state.manager = mgr

    def check_token(authorization: str | None) -> None:
        expected = os.environ.get(TOKEN_ENV, "")
        if not expected:
            return
        if authorization != f"Bearer {expected}":
            raise HTTPException(status_code=401, detail="invalid bearer token")

    async def auth_dep(request: Request) -> None:
        check_token(request.headers.get("authorization"))

    @app.post("/sessions")
    def create_session(body: CreateSessionRequest, _: None = Depends(auth_dep)):
        try:
            managed = mgr.create(body)
        except BackendUnavailable as exc:
            raise HTTPException(status_code=502, detail=str(exc)) from exc
        return managed.record()

    @app.get("/sessions")
    def list_sessions(_: None = Depends(auth_dep)):
        return [m.record() for m in mgr.sessions.values()]

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str, _: None = Depends(auth_dep)):
        return mgr.get(session_id).record()

    @app.post("/sessions/{session_id}/instruction")
    def post_instruction(
        session_id: str, body: InstructionRequest, _: None = Depends(auth_dep)
    ):
        managed = mgr.get(session_id)
        if not body.text or not body.text.strip():
            raise HTTPException(status_code=422, detail="instruction must be non-empty")
        if managed.status() not in ("idle", "awaiting_user"):
            raise HTTPException(status_code=409, detail="session is busy")
        try:
            managed.submit(body.text)
        except Busy:
            raise HTTPException(status_code=409, detail="session is busy") from None
        return JSONResponse({"accepted": True, "session_id": session_id}, status_code=202)

    @app.post("/sessions/{session_id}/interrupt")
    def interrupt_session(session_id: str, _: None = Depends(auth_dep)):
        managed = mgr.get(session_id)
        if managed.running and managed.session.handle.alive:
            managed.session.handle.interrupt()
            return {"acknowledged": True, "interrupted": True}
        return {"acknowledged": True, "interrupted": False}

    @app.get("/sessions/{session_id}/events")
    def stream_events(
        session_id: str,
        since: int = Query(default=0),
        follow: bool = Query(default=True),
        _: None = Depends(auth_dep),
    ):
        managed = mgr.get(session_id)
        transcript = managed.session.transcript

        def frames():
            cursor = since
            while True:
                for event in transcript.events(cursor):
                    cursor = event.seq
                    yield f"data: {json.dumps(event.to_json(), ensure_ascii=False)}\n\n"
                if not follow:
                    return
                if managed.session.closed:
                    return
                transcript.wait_beyond(cursor, timeout=0.5)

        return StreamingResponse(frames(), media_type="text/event-stream")

    @app.websocket("/sessions/{session_id}/events/ws")
    async def ws_events(websocket: WebSocket, session_id: str, since: int = Query(default=0)):
        check_token(websocket.headers.get("authorization"))
        try:
            managed = mgr.get(session_id)
        except HTTPException:
            await websocket.close(code=4404)
            return
        await websocket.accept()
        import anyio

        transcript = managed.session.transcript
        cursor = since
        try:
            while True:
                events = transcript.events(cursor)
                for event in events:
                    cursor = event.seq
                    await websocket.send_text(json.dumps(event.to_json(), ensure_ascii=False))
                if managed.session.closed:
                    await websocket.close()
                    return
                if not events:
                    await anyio.to_thread.run_sync(
                        lambda: transcript.wait_beyond(cursor, timeout=0.5)
                    )
        except WebSocketDisconnect:
            return

    @app.get("/sessions/{session_id}/notebook")
    def notebook(session_id: str, _: None = Depends(auth_dep)):
        managed = mgr.get(session_id)
        cells = trace_cells_from_events(managed.session.transcript.events())
        document = export_notebook(
            cells,
            SessionMeta(
                session_id=session_id, language_tag=managed.session.config.language_tag
            ),
            workdir=managed.session.config.workdir,
        )
        return JSONResponse(document)

    @app.get("/sessions/{session_id}/payload/{path:path}")
    def payload(session_id: str, path: str, _: None = Depends(auth_dep)):
        from fastapi.responses import FileResponse

        managed = mgr.get(session_id)
        base = os.path.realpath(managed.session.config.workdir)
        full = os.path.realpath(os.path.join(base, path))
        if not full.startswith(base + os.sep) or not os.path.isfile(full):
            raise HTTPException(status_code=404, detail="unknown payload")
        return FileResponse(full)

    return app
