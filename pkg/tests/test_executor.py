"""Execution backends: persistent state, error handling, interrupts, the
frame protocol, and the remote-gateway message mapping."""

import io
import json
import threading
import time

import pytest

from cellflow.cellmodel import Cell, CellKind, CellOutput, OutputChannel
from cellflow.executor import (
    BackendUnavailable,
    KernelDead,
    LocalBackendConfig,
    classify_feedback,
    execute_cells,
    interrupt,
    start_session,
)
from cellflow.executor.frames import (
    FrameProtocolError,
    encode_frame,
    read_frame,
    write_frame,
)
from cellflow.executor.gateway import GatewayConfig
from cellflow.statemachine import FeedbackKind


def code(source, cid="c1"):
    return Cell(cid, CellKind.CODE, source)


def md(source, cid="m1"):
    return Cell(cid, CellKind.MARKDOWN, source)


@pytest.fixture
def handle(tmp_path):
    h = start_session(LocalBackendConfig(), tmp_path / "wd")
    yield h
    h.close()


class TestLocalSession:
    def test_fresh_state(self, handle):
        result = handle.execute_cells([code("x")])
        assert result.feedback.kind is FeedbackKind.ERROR
        assert result.feedback.detail.name == "NameError"

    def test_state_persists_across_calls(self, handle):
        handle.execute_cells([code("x = 1", "a")])
        result = handle.execute_cells([code("print(x)", "b")])
        assert result.feedback.kind is FeedbackKind.NO_ERROR
        assert result.cell_outputs[0][0].text == "1\n"

    def test_split_equals_combined(self, tmp_path):
        h1 = start_session(LocalBackendConfig(), tmp_path / "one")
        h2 = start_session(LocalBackendConfig(), tmp_path / "two")
        try:
            h1.execute_cells([code("a = 2", "c1"), code("b = a * 3", "c2")])
            out1 = h1.execute_cells([code("print(a + b)", "c3")])
            h2.execute_cells([code("a = 2", "c1")])
            h2.execute_cells([code("b = a * 3", "c2")])
            out2 = h2.execute_cells([code("print(a + b)", "c3")])
            assert out1.cell_outputs[0][0].text == out2.cell_outputs[0][0].text == "8\n"
        finally:
            h1.close()
            h2.close()

    def test_sessions_are_isolated(self, tmp_path):
        h1 = start_session(LocalBackendConfig(), tmp_path / "one")
        h2 = start_session(LocalBackendConfig(), tmp_path / "two")
        try:
            h1.execute_cells([code("x = 1")])
            result = h2.execute_cells([code("x")])
            assert result.feedback.kind is FeedbackKind.ERROR
            assert result.feedback.detail.name == "NameError"
        finally:
            h1.close()
            h2.close()

    def test_workdir_isolation(self, tmp_path):
        h1 = start_session(LocalBackendConfig(), tmp_path / "one")
        h2 = start_session(LocalBackendConfig(), tmp_path / "two")
        try:
            h1.execute_cells([code("open('marker.txt', 'w').write('1')")])
            result = h2.execute_cells(
                [code("import os; print(os.path.exists('marker.txt'))")]
            )
            assert result.cell_outputs[0][0].text == "False\n"
            assert (tmp_path / "one" / "marker.txt").is_file()
        finally:
            h1.close()
            h2.close()

    def test_first_error_abort(self, handle):
        result = handle.execute_cells(
            [code("1/0", "bad"), code("print('never')", "after")]
        )
        assert result.feedback.kind is FeedbackKind.ERROR
        assert result.feedback.detail.name == "ZeroDivisionError"
        assert result.feedback.detail.failing_cell_id == "bad"
        assert result.aborted_at_cell == 0
        assert result.cell_outputs[1] == ()

    def test_markdown_cells_are_skipped(self, handle):
        result = handle.execute_cells([md("# notes"), code("print('ran')")])
        assert result.feedback.kind is FeedbackKind.NO_ERROR
        assert result.cell_outputs[0] == ()
        assert result.cell_outputs[1][0].text == "ran\n"

    def test_stderr_warning_is_not_error(self, handle):
        result = handle.execute_cells(
            [code("import warnings; warnings.warn('careful')")]
        )
        assert result.feedback.kind is FeedbackKind.NO_ERROR
        channels = {o.channel for outputs in result.cell_outputs for o in outputs}
        assert OutputChannel.STDERR in channels

    def test_timeout_synthesizes_error(self, handle):
        started = time.monotonic()
        result = handle.execute_cells(
            [code("import time\ntime.sleep(60)")], per_action_timeout=1.0
        )
        assert time.monotonic() - started < 10
        assert result.feedback.kind is FeedbackKind.ERROR
        assert result.feedback.detail.name == "Timeout"
        # handle survives
        after = handle.execute_cells([code("print('alive')")])
        assert after.cell_outputs[0][0].text == "alive\n"

    def test_interrupt_infinite_loop(self, handle):
        done = {}

        def run():
            done["result"] = handle.execute_cells([code("while True: pass")])

        thread = threading.Thread(target=run)
        thread.start()
        time.sleep(0.5)
        started = time.monotonic()
        assert interrupt(handle)
        thread.join(timeout=5)
        assert not thread.is_alive()
        assert time.monotonic() - started < 2.0
        result = done["result"]
        assert result.feedback.kind is FeedbackKind.ERROR
        assert result.feedback.detail.name == "Interrupted"

    def test_interrupt_when_idle_is_noop(self, handle):
        assert interrupt(handle)
        result = handle.execute_cells([code("print('still fine')")])
        assert result.feedback.kind is FeedbackKind.NO_ERROR

    def test_interrupt_dead_handle(self, handle):
        handle.close()
        time.sleep(0.2)
        with pytest.raises(KernelDead):
            interrupt(handle)

    def test_rich_output_from_saved_image(self, handle, tmp_path):
        result = handle.execute_cells(
            [
                code(
                    "with open('plot.png', 'wb') as fh:\n"
                    "    fh.write(b'\\x89PNG fake image')"
                )
            ]
        )
        rich = [
            o
            for outputs in result.cell_outputs
            for o in outputs
            if o.channel is OutputChannel.RICH
        ]
        assert rich and rich[0].payload_path == "plot.png"
        assert rich[0].mime == "image/png"
        assert (handle.workdir / "plot.png").is_file()

    def test_trailing_expression_value(self, handle):
        result = handle.execute_cells([code("y = 6\ny * 7")])
        rich = result.cell_outputs[0][-1]
        assert rich.channel is OutputChannel.RICH
        assert rich.text == "42"

    def test_accumulated_wall_time_grows(self, handle):
        before = handle.accumulated_wall_time
        handle.execute_cells([code("import time; time.sleep(0.05)")])
        assert handle.accumulated_wall_time > before

    def test_module_level_api(self, handle):
        result = execute_cells(handle, [code("print(3)")])
        assert result.cell_outputs[0][0].text == "3\n"


class TestClassifyFeedback:
    def test_stdout_only(self):
        feedback = classify_feedback([(CellOutput(OutputChannel.STDOUT, "x"),)], ["c1"])
        assert feedback.kind is FeedbackKind.NO_ERROR

    def test_stderr_only_is_no_error(self):
        feedback = classify_feedback([(CellOutput(OutputChannel.STDERR, "warn"),)], ["c1"])
        assert feedback.kind is FeedbackKind.NO_ERROR

    def test_error_captures_detail(self):
        outputs = [
            (),
            (
                CellOutput(
                    OutputChannel.ERROR, error_name="ValueError", error_value="bad"
                ),
            ),
        ]
        feedback = classify_feedback(outputs, ["a", "b"])
        assert feedback.kind is FeedbackKind.ERROR
        assert feedback.detail.name == "ValueError"
        assert feedback.detail.failing_cell_id == "b"


class TestFrameProtocol:
    def test_encode_decode_round_trip(self):
        frame = {"type": "exec", "id": "c1", "code": "print('héllo')"}
        stream = io.BytesIO(encode_frame(frame))
        assert read_frame(stream) == frame

    def test_length_prefix_is_big_endian_4_bytes(self):
        data = encode_frame({"type": "interrupt"})
        length = int.from_bytes(data[:4], "big")
        assert length == len(data) - 4

    def test_eof_returns_none(self):
        assert read_frame(io.BytesIO(b"")) is None

    def test_truncated_header(self):
        with pytest.raises(FrameProtocolError):
            read_frame(io.BytesIO(b"\x00\x00"))

    def test_truncated_body(self):
        data = encode_frame({"type": "done", "id": "x", "status": "ok"})
        with pytest.raises(FrameProtocolError):
            read_frame(io.BytesIO(data[:-3]))

    def test_unknown_type_rejected(self):
        with pytest.raises(FrameProtocolError):
            encode_frame({"type": "nonsense"})
        bad = json.dumps({"type": "nonsense"}).encode()
        stream = io.BytesIO(len(bad).to_bytes(4, "big") + bad)
        with pytest.raises(FrameProtocolError):
            read_frame(stream)

    def test_multiple_frames_stream(self):
        buffer = io.BytesIO()
        frames = [
            {"type": "stdout", "id": "c", "text": "a"},
            {"type": "done", "id": "c", "status": "ok"},
        ]
        for frame in frames:
            write_frame(buffer, frame)
        buffer.seek(0)
        assert [read_frame(buffer), read_frame(buffer)] == frames


class TestGatewayBackend:
    def test_unreachable_url(self, tmp_path):
        config = GatewayConfig(base_url="http://127.0.0.1:9", connect_timeout_s=0.5)
        with pytest.raises(BackendUnavailable):
            start_session(config, tmp_path / "wd")

    def test_fake_gateway_round_trip(self, tmp_path, fake_gateway):
        config = GatewayConfig(base_url=fake_gateway, connect_timeout_s=5.0)
        handle = start_session(config, tmp_path / "wd")
        try:
            result = handle.execute_cells([code("print('hi')")])
            assert result.feedback.kind is FeedbackKind.NO_ERROR
            assert result.cell_outputs[0][0].text == "hi\n"

            result = handle.execute_cells([code("raise ValueError('nope')")])
            assert result.feedback.kind is FeedbackKind.ERROR
            assert result.feedback.detail.name == "ValueError"

            result = handle.execute_cells([code("display_image()")])
            rich = result.cell_outputs[0][-1]
            assert rich.channel is OutputChannel.RICH
            assert rich.mime == "image/png"
            assert (handle.workdir / rich.payload_path).is_file()
        finally:
            handle.close()


@pytest.fixture(scope="module")
def fake_gateway():
    """Minimal kernel-gateway imitation: HTTP kernel CRUD + WS channel."""

    import base64

    import uvicorn
    from fastapi import FastAPI, WebSocket

    app = FastAPI()

    @app.post("/api/kernels")
    def create_kernel(body: dict):
        return {"id": "k-test", "name": body.get("name", "python3")}

    @app.delete("/api/kernels/{kernel_id}")
    def delete_kernel(kernel_id: str):
        return {"ok": True}

    @app.post("/api/kernels/{kernel_id}/interrupt")
    def interrupt_kernel(kernel_id: str):
        return {"ok": True}

    @app.websocket("/api/kernels/{kernel_id}/channels")
    async def channels(ws: WebSocket, kernel_id: str):
        await ws.accept()
        while True:
            raw = await ws.receive_text()
            request = json.loads(raw)
            if request["header"]["msg_type"] != "execute_request":
                continue
            parent = request["header"]
            code_text = request["content"]["code"]

            async def send(msg_type, content):
                await ws.send_text(
                    json.dumps(
                        {
                            "header": {"msg_type": msg_type, "msg_id": "r"},
                            "parent_header": parent,
                            "content": content,
                        }
                    )
                )

            status = "ok"
            if "raise" in code_text:
                status = "error"
                await send(
                    "error",
                    {"ename": "ValueError", "evalue": "nope", "traceback": ["tb"]},
                )
            elif "display_image" in code_text:
                payload = base64.b64encode(b"\x89PNG fake").decode()
                await send("display_data", {"data": {"image/png": payload}})
            elif "print" in code_text:
                await send("stream", {"name": "stdout", "text": "hi\n"})
            await send("execute_reply", {"status": status})
            await send("status", {"execution_state": "idle"})

    config = uvicorn.Config(app, host="127.0.0.1", port=0, log_level="error")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    for _ in range(100):
        if server.started:
            break
        time.sleep(0.05)
    port = server.servers[0].sockets[0].getsockname()[1]
    yield f"http://127.0.0.1:{port}"
    server.should_exit = True
    thread.join(timeout=5)
