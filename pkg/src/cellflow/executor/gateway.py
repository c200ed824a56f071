"""Remote execution backend speaking the kernel-gateway wire protocol.

Kernels are created over HTTP (``POST {base}/api/kernels``) and driven over
a WebSocket channel; execute requests and the resulting iopub messages map
onto cell outputs as follows:

    stream {name, text}            -> stdout / stderr output
    display_data / execute_result  -> rich output (image payloads decoded
                                      into the workdir and referenced by path)
    error {ename, evalue, traceback} -> error output

The protocol version is pinned in :class:`GatewayConfig` and sent in every
message header.
"""

from __future__ import annotations

import base64
import datetime
import json
import logging
import threading
import uuid
from dataclasses import dataclass
from pathlib import Path

import httpx

from ..cellmodel import CellOutput, OutputChannel
from .local import BackendUnavailable, KernelDead

logger = logging.getLogger(__name__)


@dataclass
class GatewayConfig:
    base_url: str
    auth_token: str | None = None
    kernel_name: str = "python3"
    protocol_version: str = "5.3"
    connect_timeout_s: float = 10.0

    def to_json(self) -> dict:
        return {
            "base_url": self.base_url,
            "kernel_name": self.kernel_name,
            "protocol_version": self.protocol_version,
            "connect_timeout_s": self.connect_timeout_s,
        }


def _ws_url(base_url: str, kernel_id: str) -> str:
    scheme = "wss" if base_url.startswith("https") else "ws"
    stripped = base_url.split("://", 1)[1].rstrip("/")
    return f"{scheme}://{stripped}/api/kernels/{kernel_id}/channels"


class GatewayWorker:
    """One remote kernel session driven over HTTP + WebSocket."""

    def __init__(self, config: GatewayConfig, workdir: Path) -> None:
        self.config = config
        self.workdir = workdir
        self._session = uuid.uuid4().hex
        self._lock = threading.Lock()
        headers = {}
        if config.auth_token:
            headers["Authorization"] = f"token {config.auth_token}"
        self._http = httpx.Client(
            base_url=config.base_url, timeout=config.connect_timeout_s, headers=headers
        )
        try:
            response = self._http.post("/api/kernels", json={"name": config.kernel_name})
            response.raise_for_status()
            self.kernel_id = response.json()["id"]
        except (httpx.HTTPError, KeyError, ValueError) as exc:
            raise BackendUnavailable(f"cannot create remote kernel: {exc}") from exc
        try:
            from websockets.sync.client import connect

            self._ws = connect(
                _ws_url(config.base_url, self.kernel_id),
                open_timeout=config.connect_timeout_s,
                additional_headers=headers or None,
            )
        except Exception as exc:  # noqa: BLE001 - any connect failure
            raise BackendUnavailable(f"cannot open kernel channel: {exc}") from exc
        self.alive = True
        self._media_n = 0

    def _message(self, msg_type: str, content: dict) -> dict:
        return {
            "header": {
                "msg_id": uuid.uuid4().hex,
                "msg_type": msg_type,
                "session": self._session,
                "username": "cellflow",
                "version": self.config.protocol_version,
                "date": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            },
            "parent_header": {},
            "metadata": {},
            "content": content,
            "channel": "shell",
        }

    def _save_media(self, mime: str, b64_payload: str) -> str:
        self._media_n += 1
        ext = {
            "image/png": ".png",
            "image/jpeg": ".jpg",
            "image/svg+xml": ".svg",
        }.get(mime, ".bin")
        rel = Path("outputs") / f"remote_{self._media_n}{ext}"
        path = self.workdir / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(base64.b64decode(b64_payload))
        return str(rel)

    def _rich_from_data(self, data: dict) -> CellOutput:
        for mime, payload in data.items():
            if mime.startswith("image/"):
                return CellOutput(
                    channel=OutputChannel.RICH,
                    mime=mime,
                    payload_path=self._save_media(mime, payload),
                    text=str(data.get("text/plain", "")),
                )
        return CellOutput(
            channel=OutputChannel.RICH,
            mime="text/plain",
            text=str(data.get("text/plain", "")),
        )

    def execute(
        self, cell_id: str, code: str, timeout: float | None
    ) -> tuple[list[CellOutput], str]:
        if not self.alive:
            raise KernelDead("remote kernel session closed")
        request = self._message("execute_request", {
            "code": code,
            "silent": False,
            "store_history": True,
            "allow_stdin": False,
            "stop_on_error": True,
        })
        msg_id = request["header"]["msg_id"]
        with self._lock:
            try:
                self._ws.send(json.dumps(request))
            except Exception as exc:  # noqa: BLE001
                self.alive = False
                raise KernelDead(f"kernel channel broke: {exc}") from exc
            chunks: dict[str, list[str]] = {"stdout": [], "stderr": []}
            outputs: list[CellOutput] = []
            status = "ok"
            reply_seen = False
            idle_seen = False
            while not (reply_seen and idle_seen):
                try:
                    raw = self._ws.recv(timeout=timeout)
                except TimeoutError:
                    self.interrupt()
                    status = "timeout"
                    break
                except Exception as exc:  # noqa: BLE001
                    self.alive = False
                    raise KernelDead(f"kernel channel broke: {exc}") from exc
                message = json.loads(raw)
                if message.get("parent_header", {}).get("msg_id") != msg_id:
                    continue
                mtype = message.get("header", {}).get("msg_type")
                content = message.get("content", {})
                if mtype == "stream":
                    chunks[content.get("name", "stdout")].append(content.get("text", ""))
                elif mtype in ("display_data", "execute_result"):
                    outputs.append(self._rich_from_data(content.get("data", {})))
                elif mtype == "error":
                    outputs.append(
                        CellOutput(
                            channel=OutputChannel.ERROR,
                            error_name=content.get("ename", "Error"),
                            error_value=content.get("evalue", ""),
                            traceback=tuple(content.get("traceback", ())),
                        )
                    )
                elif mtype == "execute_reply":
                    reply_seen = True
                    if content.get("status") == "error" and not any(
                        o.channel is OutputChannel.ERROR for o in outputs
                    ):
                        outputs.append(
                            CellOutput(
                                channel=OutputChannel.ERROR,
                                error_name=content.get("ename", "Error"),
                                error_value=content.get("evalue", ""),
                            )
                        )
                elif mtype == "status" and content.get("execution_state") == "idle":
                    idle_seen = True

        stream_outputs = []
        for channel in ("stdout", "stderr"):
            text = "".join(chunks[channel])
            if text:
                stream_outputs.append(
                    CellOutput(channel=OutputChannel(channel), text=text)
                )
        ordered = stream_outputs + outputs
        if status != "timeout" and any(o.channel is OutputChannel.ERROR for o in ordered):
            status = "error"
        return ordered, status

    def interrupt(self) -> None:
        if not self.alive:
            raise KernelDead("remote kernel session closed")
        try:
            self._http.post(f"/api/kernels/{self.kernel_id}/interrupt")
        except httpx.HTTPError as exc:
            logger.warning("kernel interrupt request failed: %s", exc)

    def send_interrupt(self) -> None:
        self.interrupt()

    def close(self) -> None:
        self.alive = False
        try:
            self._ws.close()
        except Exception:  # noqa: BLE001
            pass
        try:
            self._http.delete(f"/api/kernels/{self.kernel_id}")
        except httpx.HTTPError:
            pass
        self._http.close()
