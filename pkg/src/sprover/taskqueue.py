"""Priority queue of delegable work over a pool of isolated worker processes.

Three task kinds share one queue type: whole proof branches, queries, and
per-goal tactic subtasks.  A worker manager (one cooperative thread per
worker slot) turns tasks into marshalable requests and ships them over a
framed byte channel to its worker process; nothing else is shared with a
worker.  A warm worker keeps a small cache of base states keyed by digest,
so follow-up requests against the same state can be sent as lightweight
deltas.  With ``max_workers=0`` nothing is ever dispatched: the queued work
can be dumped as a list of requests and replayed later, elsewhere.
"""

from __future__ import annotations

import heapq
import os
import select
import socket
import subprocess
import sys
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Union

from . import engine, kernel, stm, wire
from .kernel import ErrorReport
from .stm import CancelSwitch, PureComputation, SystemState

SCHEMA_VERSION = wire.SCHEMA_VERSION
WORKER_CACHE_SIZE = 4
MAX_ATTEMPTS = 2

OnDone = Callable[[str, object, Optional[ErrorReport]], None]


def default_worker_count() -> int:
    env = os.environ.get("WORKER_COUNT")
    if env:
        return max(0, int(env))
    return max(1, (os.cpu_count() or 2) - 1)


# ---------------------------------------------------------------------------
# Task kinds (session side: may hold live state and callbacks)

def _noop(outcome: str, payload, error) -> None:
    pass


@dataclass
class ProofTask:
    computation: PureComputation
    entry_name: str
    base_state: SystemState
    base_digest: str
    priority: int = 0
    cancel: CancelSwitch = field(default_factory=CancelSwitch)
    on_done: OnDone = _noop
    attempts: int = 0


@dataclass
class QueryTask:
    span_id: int
    ast: object
    state: SystemState
    base_digest: str
    priority: int = 0
    cancel: CancelSwitch = field(default_factory=CancelSwitch)
    on_done: OnDone = _noop
    attempts: int = 0


@dataclass
class ParTask:
    goal: engine.Goal
    tactic: engine.TacticAst
    state: SystemState
    base_digest: str
    priority: int = 0
    cancel: CancelSwitch = field(default_factory=CancelSwitch)
    on_done: OnDone = _noop
    attempts: int = 0


@dataclass
class ReplayTask:
    """A previously dumped request, resumed as-is (the quick-chain second leg)."""
    request: "Request"
    priority: int = 0
    cancel: CancelSwitch = field(default_factory=CancelSwitch)
    on_done: OnDone = _noop
    attempts: int = 0


Task = Union[ProofTask, QueryTask, ParTask, ReplayTask]


# ---------------------------------------------------------------------------
# Wire forms

@dataclass(frozen=True)
class Request:
    task_id: int
    schema_version: int
    kind: str                       # "proof" | "query" | "par"
    base_digest: str
    state: Optional[SystemState]    # None = delta against a cached base state
    program: tuple = ()
    produces: Optional[kernel.Formula] = None
    name: str = ""
    goal: Optional[engine.Goal] = None
    tactic: Optional[engine.TacticAst] = None
    ast: Optional[object] = None


@dataclass(frozen=True)
class Response:
    task_id: int
    outcome: str                    # "finished" | "failed" | "cancelled"
    payload: Optional[object] = None
    error: Optional[ErrorReport] = None
    wall_ms: float = 0.0


wire.register("q.Request", Request)
wire.register("q.Response", Response)


def request_of_task(freshness: str, task: Task, task_id: int,
                    cached_digests=()) -> Optional[Request]:
    """Translate a task for a worker; None when the task is already obsolete.

    An old (warm) worker holding the task's base state receives a delta
    request without the state snapshot.
    """
    if task.cancel.is_set():
        return None
    if isinstance(task, ReplayTask):
        return replace(task.request, task_id=task_id,
                       schema_version=SCHEMA_VERSION)
    send_delta = freshness == "old" and task.base_digest in cached_digests
    if isinstance(task, ProofTask):
        return Request(task_id, SCHEMA_VERSION, "proof", task.base_digest,
                       None if send_delta else task.base_state,
                       program=tuple(task.computation.program),
                       produces=task.computation.produces,
                       name=task.entry_name)
    if isinstance(task, QueryTask):
        return Request(task_id, SCHEMA_VERSION, "query", task.base_digest,
                       None if send_delta else task.state, ast=task.ast)
    if isinstance(task, ParTask):
        return Request(task_id, SCHEMA_VERSION, "par", task.base_digest,
                       None if send_delta else task.state,
                       goal=task.goal, tactic=task.tactic)
    raise TypeError(f"not a task: {task!r}")


def perform(request: Request) -> Response:
    """Execute a fully resolved request; the worker-side entry point.

    Pure with respect to the caller: the request carries (or the cache
    supplies) every input, and only the response leaves.
    """
    started = time.monotonic()

    def done(outcome, payload=None, error=None) -> Response:
        return Response(request.task_id, outcome, payload, error,
                        (time.monotonic() - started) * 1000.0)

    if request.schema_version != SCHEMA_VERSION:
        return done("failed", error=ErrorReport(
            f"unsupported schema version {request.schema_version}",
            kind="infrastructure"))
    if request.state is None:
        return done("failed", error=ErrorReport(
            "delta request without a cached base state", kind="infrastructure"))
    try:
        if request.kind == "proof":
            term = stm.run_program(request.state, request.program,
                                   request.produces, request.name)
            return done("finished", term)
        if request.kind == "query":
            return done("finished", stm.run_query(request.state, request.ast))
        if request.kind == "par":
            term = engine.solve_goal(request.state.environment,
                                     request.state.hints, request.goal,
                                     request.tactic)
            return done("finished", term)
    except kernel.PromiseError as exc:
        outcome = "cancelled" if exc.report.kind == "cancelled" else "failed"
        return done(outcome, error=exc.report)
    except stm.StateFailure as exc:
        return done("failed", error=exc.report)
    except (kernel.KernelError, engine.TacticError) as exc:
        return done("failed", error=ErrorReport(str(exc)))
    return done("failed", error=ErrorReport(
        f"unknown request kind {request.kind!r}", kind="infrastructure"))


def use_response(task: Task, response: Response) -> str:
    """Decide the worker's fate after a response: keep it warm or reset it.

    Logic failures keep the worker (its state is intact); infrastructure
    failures and cancellations reset it.
    """
    if response.outcome == "cancelled":
        return "reset"
    if response.outcome == "failed" and response.error is not None \
            and response.error.kind == "infrastructure":
        return "reset"
    return "stay"


# ---------------------------------------------------------------------------
# Worker process main loop

class _StateCache:
    def __init__(self, capacity: int = WORKER_CACHE_SIZE):
        self.capacity = capacity
        self._items: OrderedDict[str, SystemState] = OrderedDict()

    def get(self, digest: str) -> Optional[SystemState]:
        state = self._items.get(digest)
        if state is not None:
            self._items.move_to_end(digest)
        return state

    def put(self, digest: str, state: SystemState) -> None:
        self._items[digest] = state
        self._items.move_to_end(digest)
        while len(self._items) > self.capacity:
            self._items.popitem(last=False)

    def digests(self):
        return set(self._items)


def worker_main(endpoint: str) -> None:
    """Connect to the manager and serve requests until the channel closes."""
    host, _, port = endpoint.rpartition(":")
    sock = socket.create_connection((host, int(port)))
    cache = _StateCache()
    while True:
        try:
            raw = wire.read_frame(sock)
        except EOFError:
            return
        try:
            request = wire.from_bytes(raw)
            if not isinstance(request, Request):
                raise wire.WireError(f"expected a request, got "
                                     f"{type(request).__name__}")
        except Exception as exc:  # malformed input must not kill the worker
            wire.write_frame(sock, wire.canon_bytes(Response(
                -1, "failed", error=ErrorReport(
                    f"malformed request: {exc}", kind="infrastructure"))))
            continue
        if request.state is None:
            cached = cache.get(request.base_digest)
            request = replace(request, state=cached)
        elif request.base_digest:
            cache.put(request.base_digest, request.state)
        response = perform(request)
        wire.write_frame(sock, wire.canon_bytes(response))


# ---------------------------------------------------------------------------
# Worker handles and managers

IDLE = "idle"
BUSY = "busy"
DEAD = "dead"


class WorkerHandle:
    def __init__(self, worker_id: int):
        self.id = worker_id
        self.state = DEAD
        self.proc: Optional[subprocess.Popen] = None
        self.sock: Optional[socket.socket] = None
        self.cache_digests: set[str] = set()
        self.cache_order: list[str] = []
        self.fresh = True

    def note_cached(self, digest: str) -> None:
        if digest in self.cache_digests:
            self.cache_order.remove(digest)
        self.cache_order.append(digest)
        self.cache_digests.add(digest)
        while len(self.cache_order) > WORKER_CACHE_SIZE:
            dropped = self.cache_order.pop(0)
            self.cache_digests.discard(dropped)


def _spawn_worker(handle: WorkerHandle) -> None:
    listener = socket.create_server(("127.0.0.1", 0))
    listener.settimeout(30.0)
    port = listener.getsockname()[1]
    env = dict(os.environ)
    src_root = str(Path(__file__).resolve().parent.parent)
    env["PYTHONPATH"] = os.pathsep.join(
        p for p in [src_root, env.get("PYTHONPATH")] if p)
    handle.proc = subprocess.Popen(
        [sys.executable, "-m", "sprover.worker", f"127.0.0.1:{port}"],
        env=env, stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
    conn, _ = listener.accept()
    listener.close()
    conn.setblocking(True)
    handle.sock = conn
    handle.state = IDLE
    handle.fresh = True
    handle.cache_digests = set()
    handle.cache_order = []


def _kill_worker(handle: WorkerHandle) -> None:
    if handle.sock is not None:
        try:
            handle.sock.close()
        except OSError:
            pass
    if handle.proc is not None and handle.proc.poll() is None:
        handle.proc.kill()
        handle.proc.wait()
    handle.sock = None
    handle.proc = None
    handle.state = DEAD
    handle.cache_digests = set()
    handle.cache_order = []


class TaskQueue:
    """The queue plus its worker managers.

    Tests can drive it deterministically with ``dispatch_step``; production
    callers use ``start``/``drain``/``stop`` for threaded dispatch.
    """

    def __init__(self, max_workers: int, auto_start: bool = True):
        if max_workers < 0:
            raise ValueError("max_workers must be >= 0")
        self.max_workers = max_workers
        self.auto_start = auto_start
        self._heap: list[tuple[int, int, Task]] = []
        self._seq = 0
        self._task_ids = iter(range(1, 1 << 62))
        self._lock = threading.Condition()
        self._in_flight = 0
        self._dispatched_any = False
        self._stopping = False
        self._threads: list[threading.Thread] = []
        self.workers = [WorkerHandle(i) for i in range(max_workers)]
        self.events: list[dict] = []

    # -- bookkeeping ---------------------------------------------------------

    @property
    def worker_count(self) -> int:
        return self.max_workers

    def log(self, event: str, **detail) -> None:
        with self._lock:
            self.events.append({"event": event, **detail})

    def pending_count(self) -> int:
        with self._lock:
            return len(self._heap)

    # -- queue operations ------------------------------------------------------

    def enqueue(self, task: Task, cancel: Optional[CancelSwitch] = None) -> None:
        cancel = cancel or task.cancel
        task.cancel = cancel
        if cancel.is_set():
            self.log("dropped_cancelled")
            task.on_done("cancelled", None,
                         ErrorReport("cancelled before dispatch", kind="cancelled"))
            return
        with self._lock:
            self._seq += 1
            heapq.heappush(self._heap, (-task.priority, self._seq, task))
            self._lock.notify_all()
        if self.auto_start and self.max_workers and not self._threads:
            self.start()

    def _pop(self, timeout: Optional[float]) -> Optional[Task]:
        with self._lock:
            if not self._heap:
                self._lock.wait(timeout)
            if not self._heap or self._stopping:
                return None
            _, _, task = heapq.heappop(self._heap)
            self._in_flight += 1
            return task

    def _task_finished(self) -> None:
        with self._lock:
            self._in_flight -= 1
            self._lock.notify_all()

    def dump(self) -> list[Request]:
        """Render all pending tasks as full requests and empty the queue.

        Only legal before any dispatch or once in-flight work has drained;
        already cancelled tasks are silently dropped as obsolete.
        """
        with self._lock:
            if self._in_flight:
                raise RuntimeError("cannot dump while work is in flight")
            items = [heapq.heappop(self._heap) for _ in range(len(self._heap))]
        requests = []
        for _, _, task in items:
            request = request_of_task("fresh", task, next(self._task_ids))
            if request is not None:
                requests.append(request)
        return requests

    # -- synchronous dispatch (deterministic, test-friendly) --------------------

    def dispatch_step(self) -> bool:
        """Dispatch one pending task to one worker and wait for its response.

        Returns False when nothing was pending.
        """
        if not self.max_workers:
            raise RuntimeError("no workers configured")
        task = self._pop(timeout=0)
        if task is None:
            return False
        try:
            self._run_task(self.workers[0], task)
        finally:
            self._task_finished()
        return True

    # -- threaded dispatch -------------------------------------------------------

    def start(self) -> None:
        if self._threads or not self.max_workers:
            return
        self._stopping = False
        for handle in self.workers:
            thread = threading.Thread(target=self._manager_loop, args=(handle,),
                                      name=f"worker-manager-{handle.id}",
                                      daemon=True)
            self._threads.append(thread)
            thread.start()

    def _manager_loop(self, handle: WorkerHandle) -> None:
        while not self._stopping:
            task = self._pop(timeout=0.1)
            if task is None:
                continue
            try:
                self._run_task(handle, task)
            except Exception as exc:  # manager threads must not die silently
                self.log("manager_error", error=str(exc))
                task.on_done("failed", None,
                             ErrorReport(str(exc), kind="infrastructure"))
            finally:
                self._task_finished()

    def drain(self, timeout: float = 300.0) -> None:
        """Block until every enqueued task has completed."""
        deadline = time.monotonic() + timeout
        with self._lock:
            while self._heap or self._in_flight:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise TimeoutError("task queue did not drain in time")
                self._lock.wait(min(remaining, 0.2))

    def stop(self) -> None:
        self._stopping = True
        with self._lock:
            self._lock.notify_all()
        for thread in self._threads:
            thread.join(timeout=5.0)
        self._threads = []
        for handle in self.workers:
            _kill_worker(handle)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()

    # -- the dispatch protocol ----------------------------------------------------

    def _run_task(self, handle: WorkerHandle, task: Task) -> None:
        self._dispatched_any = True
        if task.cancel.is_set():
            self.log("dropped_cancelled")
            task.on_done("cancelled", None,
                         ErrorReport("cancelled before dispatch", kind="cancelled"))
            return
        if handle.state == DEAD:
            _spawn_worker(handle)
            self.log("spawn", worker=handle.id)
        freshness = "fresh" if handle.fresh else "old"
        request = request_of_task(freshness, task, next(self._task_ids),
                                  handle.cache_digests)
        if request is None:
            self.log("dropped_obsolete")
            task.on_done("cancelled", None,
                         ErrorReport("obsolete task", kind="cancelled"))
            return
        if request.state is not None and request.base_digest:
            handle.note_cached(request.base_digest)
        self.log("dispatch", worker=handle.id, kind=request.kind,
                 delta=request.state is None, task_id=request.task_id)
        handle.state = BUSY
        handle.fresh = False
        try:
            wire.write_frame(handle.sock, wire.canon_bytes(request))
            response = self._await_response(handle, task, request.task_id)
        except (OSError, EOFError):
            response = None
        if response is None:  # worker died or was killed on cancellation
            _kill_worker(handle)
            if task.cancel.is_set():
                self.log("cancelled_mid_run", worker=handle.id)
                task.on_done("cancelled", None,
                             ErrorReport("cancelled while running",
                                         kind="cancelled"))
                return
            self.log("worker_death", worker=handle.id)
            task.attempts += 1
            if task.attempts < MAX_ATTEMPTS:
                self.log("requeue", task_id=request.task_id)
                with self._lock:
                    self._seq += 1
                    heapq.heappush(self._heap, (-task.priority, self._seq, task))
                    self._lock.notify_all()
            else:
                task.on_done("failed", None, ErrorReport(
                    "worker died repeatedly", kind="infrastructure"))
            return
        handle.state = IDLE
        if task.cancel.is_set():
            self.log("response_discarded", task_id=response.task_id)
            _kill_worker(handle)
            task.on_done("cancelled", None,
                         ErrorReport("cancelled", kind="cancelled"))
            return
        verdict = use_response(task, response)
        retriable = (response.outcome == "failed" and response.error is not None
                     and response.error.kind == "infrastructure")
        self.log("response", worker=handle.id, outcome=response.outcome,
                 verdict=verdict, wall_ms=response.wall_ms)
        if verdict == "reset":
            _kill_worker(handle)
            self.log("reset", worker=handle.id)
        if retriable:
            task.attempts += 1
            if task.attempts < MAX_ATTEMPTS:
                self.log("retry_fresh", task_id=response.task_id)
                self._run_task(handle, task)
                return
        task.on_done(response.outcome, response.payload, response.error)

    def _await_response(self, handle: WorkerHandle, task: Task,
                        task_id: int) -> Optional[Response]:
        """Poll for the response, watching the cancel switch; None = no response."""
        while True:
            if task.cancel.is_set():
                return None
            ready, _, _ = select.select([handle.sock], [], [], 0.05)
            if not ready:
                continue
            raw = wire.read_frame(handle.sock)
            response = wire.from_bytes(raw)
            if not isinstance(response, Response):
                raise EOFError("worker sent garbage")
            return response

    # -- goal-parallel batches ------------------------------------------------------

    def run_par_batch(self, state: SystemState, subtasks) -> list[kernel.Term]:
        """Dispatch one subtask per goal and wait; all must close their goal."""
        digest = stm.state_digest(state)
        results: list[Optional[kernel.Term]] = [None] * len(subtasks)
        errors: list[Optional[ErrorReport]] = [None] * len(subtasks)
        done = threading.Event()
        remaining = [len(subtasks)]
        lock = threading.Lock()
        if not subtasks:
            return []

        def make_done(i: int) -> OnDone:
            def on_done(outcome, payload, error) -> None:
                if outcome == "finished":
                    results[i] = payload
                else:
                    errors[i] = error or ErrorReport("par subtask failed")
                with lock:
                    remaining[0] -= 1
                    if remaining[0] == 0:
                        done.set()
            return on_done

        for i, (goal, tactic) in enumerate(subtasks):
            self.enqueue(ParTask(goal=goal, tactic=tactic, state=state,
                                 base_digest=digest, priority=0,
                                 on_done=make_done(i)))
        if not done.wait(timeout=300.0):
            raise engine.TacticError("par: subtasks timed out")
        failures = [e for e in errors if e is not None]
        if failures:
            raise engine.TacticError(f"par: {failures[0].message}")
        return [t for t in results if t is not None]
