"""Web gateway: static frontend hosting plus a websocket protocol bridge.

Each websocket connection runs its own protocol session; text frames carry
exactly the newline-delimited JSON messages of the byte-channel transport.
A small REST surface exposes one-shot batch checking for tooling.
"""

from __future__ import annotations

import asyncio
import queue as queue_mod
import threading
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from . import kernel
from .protocol import ProtocolServer
from .stm import Session

FRONTEND_DIST = Path(__file__).resolve().parent.parent.parent / "frontend" / "dist"


class CheckRequest(BaseModel):
    text: str


class SpanReport(BaseModel):
    span_id: int
    offset: int
    length: int
    status: str
    message: Optional[str] = None


class CheckResponse(BaseModel):
    ok: bool
    spans: list[SpanReport]
    entries: list[str]


def run_batch_check(text: str) -> CheckResponse:
    """Synchronous whole-document check (statements and proofs)."""
    statuses: dict[int, tuple[str, Optional[str]]] = {}

    def feedback(span_id: int, revision: int, kind: str, payload: dict) -> None:
        if kind != "status":
            return
        status = payload.get("status")
        if status in ("processed", "failed"):
            statuses[span_id] = (status, payload.get("message"))

    session = Session(feedback=feedback)
    session.load(text)
    session.observe(set())
    failures = kernel.check_swf(session.final_environment()) \
        if not session.document_errors() else []
    entries = [e.name for e in session.final_environment().entries] \
        if not session.document_errors() else []
    spans = []
    ok = not session.document_errors() and not failures
    for item in session.parsed:
        status, message = statuses.get(item.span.id, ("processed", None))
        spans.append(SpanReport(span_id=item.span.id, offset=item.span.offset,
                                length=len(item.span.text), status=status,
                                message=message))
        if status == "failed":
            ok = False
    return CheckResponse(ok=ok, spans=spans, entries=entries)


def create_app(workers: Optional[int] = None,
               include: tuple[str, ...] = ()) -> FastAPI:
    app = FastAPI(title="sprover", version="0.1.0")

    @app.get("/health")
    def health() -> dict:
        return {"ok": True}

    @app.post("/check", response_model=CheckResponse)
    def check(request: CheckRequest) -> CheckResponse:
        return run_batch_check(request.text)

    @app.websocket("/ws")
    async def ws_bridge(ws: WebSocket) -> None:
        await ws.accept()
        loop = asyncio.get_running_loop()
        inbox: queue_mod.Queue = queue_mod.Queue()
        outbox: queue_mod.Queue = queue_mod.Queue()
        server = ProtocolServer(workers=workers, include=include)

        def run_server() -> None:
            try:
                server.serve_lines(iter(inbox.get, None),
                                   lambda line: outbox.put(line))
            finally:
                outbox.put(None)

        thread = threading.Thread(target=run_server, daemon=True)
        thread.start()

        async def pump_out() -> None:
            while True:
                line = await loop.run_in_executor(None, outbox.get)
                if line is None:
                    return
                await ws.send_text(line)

        sender = asyncio.create_task(pump_out())
        try:
            while True:
                text = await ws.receive_text()
                for line in text.splitlines():
                    inbox.put(line)
        except WebSocketDisconnect:
            pass
        finally:
            inbox.put(None)
            await sender

    if FRONTEND_DIST.is_dir():
        app.mount("/", StaticFiles(directory=FRONTEND_DIST, html=True),
                  name="frontend")
    else:
        @app.get("/")
        def index() -> dict:
            return {"service": "sprover",
                    "note": "frontend bundle not built; see frontend/README"}

    return app


def serve_web(host: str, port: int, workers: Optional[int] = None,
              include: tuple[str, ...] = ()) -> None:
    import uvicorn
    uvicorn.run(create_app(workers=workers, include=include),
                host=host, port=port, log_level="warning")
