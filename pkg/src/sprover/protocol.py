"""Asynchronous editing protocol: newline-delimited JSON over a byte channel.

The client mirrors a single document as a flat span list and stays dumb: it
sends edits and its viewport, and renders whatever feedback arrives.  Every
feedback message carries the span id and revision it applies to, so reports
arriving out of order (or late, from an abandoned revision) are attributed
or dropped correctly.  An update arriving mid-check preempts the walk
between transactions and cancels whatever it invalidated.
"""

from __future__ import annotations

import queue as queue_mod
import socket
import threading
from typing import Annotated, Callable, Iterable, Literal, Optional, Union

from pydantic import BaseModel, Field, TypeAdapter, ValidationError

from . import compile as compile_mod
from . import stm, vernac
from .stm import Session
from .taskqueue import TaskQueue, default_worker_count

PROTOCOL_VERSION = 1


# ---------------------------------------------------------------------------
# Message schemas (client -> server)

class RetainOp(BaseModel):
    op: Literal["retain"]
    count: int


class InsertOp(BaseModel):
    op: Literal["insert"]
    text: str


class DeleteOp(BaseModel):
    op: Literal["delete"]
    count: int


EditOp = Annotated[Union[RetainOp, InsertOp, DeleteOp],
                   Field(discriminator="op")]


class UpdateMsg(BaseModel):
    type: Literal["update"]
    document_id: str
    edits: list[EditOp]


class PerspectiveMsg(BaseModel):
    type: Literal["perspective"]
    document_id: str
    span_ids: list[int]


class QueryMsg(BaseModel):
    type: Literal["query"]
    span_id: int
    text: str


class ShutdownMsg(BaseModel):
    type: Literal["shutdown"]


ClientMessage = Annotated[Union[UpdateMsg, PerspectiveMsg, QueryMsg,
                                ShutdownMsg],
                          Field(discriminator="type")]
_CLIENT_MESSAGE = TypeAdapter(ClientMessage)


# ---------------------------------------------------------------------------
# Message schemas (server -> client)

class HelloMsg(BaseModel):
    type: Literal["hello"] = "hello"
    version: int = PROTOCOL_VERSION


class AckMsg(BaseModel):
    type: Literal["ack"] = "ack"
    document_id: str
    revision: int


class SpanInfo(BaseModel):
    id: int
    offset: int
    length: int


class SpansMsg(BaseModel):
    type: Literal["spans"] = "spans"
    document_id: str
    revision: int
    spans: list[SpanInfo]


class FeedbackMsg(BaseModel):
    type: Literal["feedback"] = "feedback"
    span_id: int
    revision: int
    kind: Literal["status", "goals", "markup", "query_result"]
    status: Optional[Literal["processing", "processed", "failed"]] = None
    message: Optional[str] = None
    char_range: Optional[tuple[int, int]] = None
    text: Optional[str] = None
    hyperlinks: Optional[list[dict]] = None


ServerMessage = Union[HelloMsg, AckMsg, SpansMsg, FeedbackMsg]


def apply_edits(text: str, edits: list) -> str:
    """Apply a retain/insert/delete sequence to the current revision."""
    out = []
    cursor = 0
    for op in edits:
        if isinstance(op, RetainOp):
            if op.count < 0 or cursor + op.count > len(text):
                raise ValueError("retain past end of document")
            out.append(text[cursor:cursor + op.count])
            cursor += op.count
        elif isinstance(op, InsertOp):
            out.append(op.text)
        else:
            if op.count < 0 or cursor + op.count > len(text):
                raise ValueError("delete past end of document")
            cursor += op.count
    out.append(text[cursor:])
    return "".join(out)


# ---------------------------------------------------------------------------
# The service

class ProtocolServer:
    """One document, one session, one client channel.

    A reader thread feeds client messages into an inbox; the session thread
    owns the DAG and interleaves message handling with the document walk; a
    writer thread drains the outbox so feedback from worker-manager threads
    never blocks checking.
    """

    def __init__(self, workers: Optional[int] = None,
                 include: tuple[str, ...] = ()):
        if workers is None:
            workers = default_worker_count()
        self.queue = TaskQueue(workers) if workers > 0 else None
        self.session = Session(queue=self.queue,
                               loader=compile_mod.make_loader(include),
                               feedback=self._on_feedback)
        self.document_id = ""
        self.perspective: set[int] = set()
        self._inbox: queue_mod.Queue = queue_mod.Queue()
        self._outbox: queue_mod.Queue = queue_mod.Queue()
        self._stopped = threading.Event()
        self._walk_done = True

    # -- feedback path (any thread) -------------------------------------------

    def _on_feedback(self, span_id: int, revision: int, kind: str,
                     payload: dict) -> None:
        if revision != self.session.revision:
            return  # stale: the document moved on
        msg = FeedbackMsg(span_id=span_id, revision=revision, kind=kind,
                          **payload)
        if kind == "status" and payload.get("status") == "failed" \
                and msg.char_range is None:
            msg.char_range = self._span_range(span_id)
        self._send(msg)

    def _span_range(self, span_id: int) -> Optional[tuple[int, int]]:
        for item in self.session.parsed:
            if item.span.id == span_id:
                return (item.span.offset, item.span.end)
        return None

    def _send(self, msg: ServerMessage) -> None:
        self._outbox.put(msg.model_dump_json(exclude_none=True))

    # -- channel plumbing ------------------------------------------------------

    def serve_lines(self, lines: Iterable[str],
                    write_line: Callable[[str], None]) -> None:
        """Run the full service over a line-oriented channel (blocking)."""
        reader = threading.Thread(target=self._read_loop, args=(lines,),
                                  daemon=True)
        writer = threading.Thread(target=self._write_loop, args=(write_line,),
                                  daemon=True)
        reader.start()
        writer.start()
        try:
            self._main_loop()
        finally:
            self._stopped.set()
            self._outbox.put(None)
            writer.join(timeout=5.0)
            if self.queue is not None:
                self.queue.stop()

    def _read_loop(self, lines: Iterable[str]) -> None:
        try:
            for line in lines:
                if line is None:
                    break
                self._inbox.put(line)
        finally:
            self._inbox.put(None)

    def _write_loop(self, write_line: Callable[[str], None]) -> None:
        while True:
            item = self._outbox.get()
            if item is None:
                return
            try:
                write_line(item)
            except OSError:
                return

    # -- session thread ---------------------------------------------------------

    def _main_loop(self) -> None:
        self.session._owner = threading.current_thread()
        self._send(HelloMsg())
        while not self._stopped.is_set():
            timeout = 0.02 if not self._walk_done else 0.5
            try:
                line = self._inbox.get(timeout=timeout)
            except queue_mod.Empty:
                line = ...
            if line is None:
                return
            if line is not ...:
                if not self._handle_line(line):
                    return
                continue
            if not self._walk_done:
                self._walk_done = self.session.observe(
                    self.perspective,
                    should_yield=lambda: not self._inbox.empty())

    def _handle_line(self, line: str) -> bool:
        line = line.strip()
        if not line:
            return True
        try:
            msg = _CLIENT_MESSAGE.validate_json(line)
        except ValidationError as exc:
            self._send(FeedbackMsg(span_id=-1, revision=self.session.revision,
                                   kind="status", status="failed",
                                   message=f"malformed message: {exc.errors()[0]['msg']}"))
            return True
        if isinstance(msg, ShutdownMsg):
            return False
        if isinstance(msg, UpdateMsg):
            self._handle_update(msg)
        elif isinstance(msg, PerspectiveMsg):
            if msg.document_id == self.document_id:
                self.perspective = set(msg.span_ids)
                self._walk_done = False
        elif isinstance(msg, QueryMsg):
            self._handle_query(msg)
        return True

    def _handle_update(self, msg: UpdateMsg) -> None:
        if msg.document_id != self.document_id:
            # fresh document: full resync, perspective reset
            self.document_id = msg.document_id
            base = ""
            self.perspective = set()
        else:
            base = self.session.text
        try:
            new_text = apply_edits(base, msg.edits)
        except ValueError as exc:
            self._send(FeedbackMsg(span_id=-1, revision=self.session.revision,
                                   kind="status", status="failed",
                                   message=str(exc)))
            return
        self.session.update(new_text)
        self._send(AckMsg(document_id=self.document_id,
                          revision=self.session.revision))
        self._send(SpansMsg(
            document_id=self.document_id, revision=self.session.revision,
            spans=[SpanInfo(id=p.span.id, offset=p.span.offset,
                            length=len(p.span.text))
                   for p in self.session.parsed]))
        self._walk_done = False

    def _handle_query(self, msg: QueryMsg) -> None:
        session = self.session
        revision = session.revision
        try:
            spans = vernac.chop(msg.text)
            if len(spans) != 1:
                raise vernac.ParseError("expected exactly one query command", 0)
            ast = vernac.parse(spans[0])
            if vernac.classify(ast) != vernac.QUERY:
                raise vernac.ParseError("not a query command", 0)
            node = self._master_node_at(msg.span_id)
            state = session.compute_state(node)
            text = stm.run_query(state, ast)
        except (vernac.ParseError, stm.StateFailure, stm.DocumentError) as exc:
            message = exc.report.message if isinstance(exc, stm.StateFailure) \
                else str(exc)
            self._send(FeedbackMsg(span_id=msg.span_id, revision=revision,
                                   kind="status", status="failed",
                                   message=message))
            return
        self._send(FeedbackMsg(span_id=msg.span_id, revision=revision,
                               kind="query_result", text=text))

    def _master_node_at(self, span_id: int) -> int:
        """The nearest master state at or before the given span."""
        session = self.session
        index = session.dag.span_index.get(span_id)
        if index is None:
            return session.dag.master_tip
        best = 0
        for item in session.parsed[:index + 1]:
            node = session.dag.node_of_span.get(item.span.id)
            if node is None:
                continue
            edge = session.dag.in_edge.get(node)
            if edge is not None and not edge.transaction.in_branch:
                best = node
        return best


# ---------------------------------------------------------------------------
# Transports

def serve_stdio(workers: Optional[int] = None,
                include: tuple[str, ...] = ()) -> None:
    import sys
    server = ProtocolServer(workers=workers, include=include)

    def write_line(line: str) -> None:
        sys.stdout.write(line + "\n")
        sys.stdout.flush()

    server.serve_lines(iter(sys.stdin.readline, ""), write_line)


def serve_tcp(host: str, port: int, workers: Optional[int] = None,
              include: tuple[str, ...] = (),
              ready: Optional[threading.Event] = None,
              once: bool = False) -> None:
    """Accept clients on a TCP socket; one document per connection."""
    listener = socket.create_server((host, port))
    if ready is not None:
        ready.port = listener.getsockname()[1]  # type: ignore[attr-defined]
        ready.set()
    while True:
        conn, _ = listener.accept()
        rfile = conn.makefile("r", encoding="utf-8", newline="\n")
        wfile = conn.makefile("w", encoding="utf-8", newline="\n")

        def write_line(line: str) -> None:
            wfile.write(line + "\n")
            wfile.flush()

        server = ProtocolServer(workers=workers, include=include)
        try:
            server.serve_lines(rfile, write_line)
        finally:
            conn.close()
        if once:
            listener.close()
            return
