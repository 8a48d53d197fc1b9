"""Batch compiler: the full chain, the quick chain, and its completion.

The full chain checks everything and writes a complete object file.  The
quick chain initializes the task pool with zero workers, so proof work is
never dispatched: the accumulated requests are dumped into the incomplete
file instead, statements only.  An incomplete file is immediately usable as
a dependency; completing it later replays the stored requests and writes the
same complete file the full chain would have produced.
"""

from __future__ import annotations

import gzip
import os
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

from . import kernel, taskqueue, wire
from .kernel import Environment, ErrorReport, PromiseCell, ProofPromise
from .stm import Session
from .taskqueue import Request, TaskQueue, perform
from .vernac import Span

VIO_MAGIC = b"SVIO\x01"
VO_MAGIC = b"SVO\x01"

EXIT_OK = 0
EXIT_DOCUMENT = 1
EXIT_PROOF = 2
EXIT_IO = 3


class CompileError(Exception):
    def __init__(self, message: str, exit_code: int):
        super().__init__(message)
        self.exit_code = exit_code


class RequireError(kernel.KernelError):
    """Module loading failure, attributed to the requiring span."""


@dataclass(frozen=True)
class VioFile:
    environment: Environment          # statements only, promise slots empty
    span_table: tuple[Span, ...]
    pending: tuple[Request, ...]
    source_digest: str


@dataclass(frozen=True)
class VoFile:
    environment: Environment          # with opaque proof terms
    swf_ok: bool
    source_digest: str


wire.register("o.VioFile", VioFile)
wire.register("o.VoFile", VoFile)


def _write_object(path: Path, magic: bytes, payload) -> None:
    body = gzip.compress(wire.canon_bytes(payload), mtime=0)
    path.write_bytes(magic + body)


def _read_object(path: Path, magic: bytes):
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CompileError(f"cannot read {path}: {exc}", EXIT_IO)
    if not raw.startswith(magic):
        raise CompileError(f"{path}: bad magic (expected {magic!r})", EXIT_IO)
    return wire.from_bytes(gzip.decompress(raw[len(magic):]))


def object_bytes(payload) -> bytes:
    """Canonical bytes of an object file payload (for structural comparison)."""
    return wire.canon_bytes(payload)


def archive_environment(env: Environment, with_proofs: bool) -> Environment:
    """Rebuild an environment for storage.

    Session-local details (state keys, promise runners) are dropped; with
    ``with_proofs`` false the opaque slots are left empty, statements only.
    """
    entries = []
    for entry in env.entries:
        if not isinstance(entry, kernel.Opaque):
            entries.append(entry)
            continue
        if not with_proofs:
            promise = ProofPromise(entry.statement)
        else:
            current = entry.cell.current
            if current.status == kernel.FINISHED:
                promise = ProofPromise.finished(entry.statement, current.term)
            elif current.status == kernel.FAILED:
                promise = ProofPromise.failed(
                    entry.statement,
                    replace(current.error, kind="error"))
            else:
                promise = ProofPromise(entry.statement)
        entries.append(kernel.Opaque(entry.name, entry.statement,
                                     PromiseCell(promise)))
    return Environment(tuple(entries))


# ---------------------------------------------------------------------------
# Module loading (Require)

def search_path(include: Sequence[str] = ()) -> list[Path]:
    dirs = [Path(d) for d in include]
    env_path = os.environ.get("SPROVER_PATH", "")
    dirs.extend(Path(d) for d in env_path.split(os.pathsep) if d)
    return dirs or [Path(".")]


def _locate_module(module: str, dirs: Sequence[Path]) -> tuple[Path, bytes]:
    vio_found: Optional[Path] = None
    for d in dirs:
        vo = d / f"{module}.vo"
        if vo.exists():
            return vo, VO_MAGIC
        vio = d / f"{module}.vio"
        if vio_found is None and vio.exists():
            vio_found = vio
    if vio_found is not None:
        return vio_found, VIO_MAGIC
    raise RequireError(f"module {module} not found on the search path")


def require_load(env: Environment, module: str,
                 include: Sequence[str] = ()) -> Environment:
    """Append a compiled module's entries; a complete file is preferred.

    Entries from an incomplete file keep pending proofs backed by the stored
    requests, so the theorems are usable immediately and checkable later.
    """
    path, magic = _locate_module(module, search_path(include))
    payload = _read_object(path, magic)
    if isinstance(payload, VoFile):
        entries = payload.environment.entries
        by_name = {}
    else:
        assert isinstance(payload, VioFile)
        entries = payload.environment.entries
        by_name = {r.name: r for r in payload.pending}
    for entry in entries:
        if isinstance(entry, kernel.Definition):
            env = kernel.env_add_definition(env, entry.name, entry.params,
                                            entry.body)
        elif isinstance(entry, kernel.Axiom):
            env = kernel.env_add_axiom(env, entry.name, entry.statement)
        else:
            assert isinstance(entry, kernel.Opaque)
            promise = entry.cell.current
            request = by_name.get(entry.name)
            if promise.status == kernel.DELEGATED and request is not None:
                promise._run = _replayer(request)
            env = kernel.env_add_opaque(env, entry.name, entry.statement,
                                        entry.cell)
    return env


def _replayer(request: Request):
    def run():
        response = perform(request)
        if response.outcome == "finished":
            return response.payload
        raise kernel.PromiseError(response.error or ErrorReport("proof failed"))
    return run


def make_loader(include: Sequence[str] = ()):
    def loader(env: Environment, module: str) -> Environment:
        return require_load(env, module, include)
    return loader


# ---------------------------------------------------------------------------
# Compilation drivers

@dataclass
class CompileResult:
    path: Path
    exit_code: int
    wall_s: float
    proof_failures: list[tuple[str, ErrorReport]]
    document_errors: list[ErrorReport]


def _read_source(path: Path) -> str:
    try:
        return path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CompileError(f"cannot read {path}: {exc}", EXIT_IO)


def _checked_session(text: str, queue, include) -> Session:
    session = Session(queue=queue, loader=make_loader(include))
    session.load(text)
    session.observe(set())
    return session


def compile_full(path: str | os.PathLike, workers: int = 0,
                 include: Sequence[str] = ()) -> CompileResult:
    """Check the whole document, proofs included, and write the .vo file."""
    source = Path(path)
    text = _read_source(source)
    started = time.monotonic()
    queue = TaskQueue(workers) if workers > 0 else None
    try:
        session = _checked_session(text, queue, include)
        errors = session.document_errors()
        if errors:
            return CompileResult(source, EXIT_DOCUMENT,
                                 time.monotonic() - started, [], errors)
        if queue is not None:
            queue.drain()
        failures = kernel.check_swf(session.final_environment())
    finally:
        if queue is not None:
            queue.stop()
    vo = VoFile(archive_environment(session.final_environment(), True),
                swf_ok=not failures,
                source_digest=wire.digest_bytes(text.encode("utf-8")))
    out = source.with_suffix(".vo")
    _write_object(out, VO_MAGIC, vo)
    code = EXIT_OK if not failures else EXIT_PROOF
    return CompileResult(out, code, time.monotonic() - started, failures, [])


def compile_quick(path: str | os.PathLike,
                  include: Sequence[str] = ()) -> CompileResult:
    """Check everything but the proofs; stock their requests in the .vio."""
    source = Path(path)
    text = _read_source(source)
    started = time.monotonic()
    queue = TaskQueue(0)
    session = _checked_session(text, queue, include)
    errors = session.document_errors()
    if errors:
        return CompileResult(source, EXIT_DOCUMENT,
                             time.monotonic() - started, [], errors)
    requests = queue.dump()
    vio = VioFile(archive_environment(session.final_environment(), False),
                  span_table=tuple(p.span for p in session.parsed),
                  pending=tuple(requests),
                  source_digest=wire.digest_bytes(text.encode("utf-8")))
    out = source.with_suffix(".vio")
    _write_object(out, VIO_MAGIC, vio)
    return CompileResult(out, EXIT_OK, time.monotonic() - started, [], [])


def vio2vo(path: str | os.PathLike, workers: int = 0) -> CompileResult:
    """Complete an incomplete file by resuming its stored requests."""
    vio_path = Path(path)
    started = time.monotonic()
    vio = _read_object(vio_path, VIO_MAGIC)
    if not isinstance(vio, VioFile):
        raise CompileError(f"{vio_path} is not an incomplete object file",
                           EXIT_IO)
    source = vio_path.with_suffix(".v")
    if source.exists():
        digest = wire.digest_bytes(source.read_bytes())
        if digest != vio.source_digest:
            return CompileResult(vio_path, EXIT_DOCUMENT,
                                 time.monotonic() - started, [],
                                 [ErrorReport("stale object file: source changed "
                                              "since quick compilation")])
    cells = {entry.name: entry.cell for entry in vio.environment.entries
             if isinstance(entry, kernel.Opaque)}

    def settle(name: str, response: taskqueue.Response) -> None:
        cell = cells.get(name)
        if cell is None:
            return
        if response.outcome == "finished":
            cell.current.fulfill(response.payload)
        else:
            cell.current.reject(response.error or ErrorReport("proof failed"))

    if workers > 0 and vio.pending:
        with TaskQueue(workers) as queue:
            import threading
            done = threading.Event()
            remaining = [len(vio.pending)]
            lock = threading.Lock()
            for request in vio.pending:
                def on_done(outcome, payload, error, name=request.name):
                    settle(name, taskqueue.Response(0, outcome, payload, error))
                    with lock:
                        remaining[0] -= 1
                        if remaining[0] == 0:
                            done.set()
                queue.enqueue(taskqueue.ReplayTask(request=request,
                                                   on_done=on_done))
            if not done.wait(timeout=600.0):
                raise CompileError("completion did not finish in time", EXIT_IO)
    else:
        for request in vio.pending:
            settle(request.name, perform(request))
    failures = kernel.check_swf(vio.environment)
    vo = VoFile(archive_environment(vio.environment, True),
                swf_ok=not failures, source_digest=vio.source_digest)
    out = vio_path.with_suffix(".vo")
    _write_object(out, VO_MAGIC, vo)
    code = EXIT_OK if not failures else EXIT_PROOF
    return CompileResult(out, code, time.monotonic() - started, failures, [])


def load_vo(path: str | os.PathLike) -> VoFile:
    vo = _read_object(Path(path), VO_MAGIC)
    if not isinstance(vo, VoFile):
        raise CompileError(f"{path} is not a complete object file", EXIT_IO)
    return vo


def load_vio(path: str | os.PathLike) -> VioFile:
    vio = _read_object(Path(path), VIO_MAGIC)
    if not isinstance(vio, VioFile):
        raise CompileError(f"{path} is not an incomplete object file", EXIT_IO)
    return vio


# ---------------------------------------------------------------------------
# Synthetic benchmark corpus

# Cost model for the work-fraction knob, measured once on the reference
# machine: one bounded-search node (~17us) against one filler query span
# (~70us of parse/check work on the master line), discounted for the fixed
# per-theorem master overhead.
_FILLER_PER_SEARCH_NODE = 0.19


def bench_generate(n_theorems: int, proof_cost_depth: int,
                   proof_work_fraction: float) -> str:
    """Deterministic corpus of independent, search-closable theorems.

    Each proof is a bounded search whose left disjunct explodes into a
    circular chain of resolve hints (cost ~2^depth) before the right
    disjunct closes cheaply, so per-proof cost is calibrated by the depth.
    The work fraction controls how many cheap query spans pad the
    non-proof part of the document.
    """
    if n_theorems < 0 or proof_cost_depth < 1:
        raise ValueError("corpus parameters must be positive")
    if not 0 < proof_work_fraction <= 1:
        raise ValueError("proof work fraction must be in (0, 1]")
    # Two implications into each of three unprovable atoms: searching any of
    # them branches twice per depth level, so a failing search costs ~2^depth.
    lines = [
        "(* synthetic benchmark corpus *)",
        "Axiom grow1 : U -> W.",
        "Axiom grow2 : V -> W.",
        "Axiom grow3 : W -> U.",
        "Axiom grow4 : V -> U.",
        "Axiom grow5 : W -> V.",
        "Axiom grow6 : U -> V.",
        "Hint Resolve grow1 grow2 grow3 grow4 grow5 grow6.",
    ]
    search_nodes = 2 ** (proof_cost_depth - 1)
    filler = round(search_nodes * _FILLER_PER_SEARCH_NODE
                   * (1 - proof_work_fraction) / proof_work_fraction)
    for i in range(n_theorems):
        for j in range(filler):
            lines.append(f"Check (W \\/ U) -> V /\\ (U -> W).  (* pad {i}.{j} *)")
        lines.append(f"Theorem bench{i} : W \\/ (A -> A).")
        lines.append("Proof.")
        lines.append(f"auto {proof_cost_depth}.")
        lines.append("Qed.")
    return "\n".join(lines) + "\n"


def bench_run(n_theorems: int = 16, proof_cost_depth: int = 12,
              proof_work_fraction: float = 0.9, workers: int = 4,
              directory: Optional[Path] = None) -> dict:
    """Time the quick chain against the full chain on a generated corpus."""
    import tempfile
    own = directory is None
    tmp = Path(tempfile.mkdtemp(prefix="sprover-bench-")) if own else directory
    source = tmp / "bench.v"
    source.write_text(bench_generate(n_theorems, proof_cost_depth,
                                     proof_work_fraction), encoding="utf-8")
    full = compile_full(source, workers=1)
    quick = compile_quick(source)
    completion = vio2vo(tmp / "bench.vio", workers=workers)
    return {
        "theorems": n_theorems,
        "depth": proof_cost_depth,
        "full_1worker_s": full.wall_s,
        "quick_s": quick.wall_s,
        "latency_ratio": quick.wall_s / full.wall_s if full.wall_s else 0.0,
        f"vio2vo_{workers}workers_s": completion.wall_s,
    }
