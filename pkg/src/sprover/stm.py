"""State Transaction Machine: the DAG of system states and its scheduler.

The document is compiled into a DAG whose nodes are system states and whose
labeled edges are atomically executed commands (transactions).  Proof scripts
live on side branches that fork from the main line and merge back at their
closing command; the merge admits the theorem immediately and packages the
branch as a pure computation to be run elsewhere, later, or never.

States are immutable values; computing one never mutates another.  A session
owns the DAG, a memo table of computed states, and a side table of
session-local data (pending proof computations) reached from states through
opaque keys.  Keys lose validity when a state crosses a process boundary or
when their owning node is pruned, so a marshaled state can never reach
another session's internals.
"""

from __future__ import annotations

import itertools
import json
import os
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

from . import engine, kernel, vernac, wire
from .engine import HintDb, ProofState, TacticAst
from .kernel import Environment, ErrorReport, Formula, PromiseCell, ProofPromise, Term
from .vernac import (BRANCH, GLOBAL, MERGE, QUERY, TACTIC, Classification,
                     CommandAst, ParseError, Span)


class DocumentError(Exception):
    """A structural defect that prevents building or loading a document."""


class StateFailure(Exception):
    """Computing a state hit a failing transaction (or one upstream)."""

    def __init__(self, report: ErrorReport):
        super().__init__(report.message)
        self.report = report


class CancelSwitch:
    """Set-once flag with atomic visibility across threads."""

    __slots__ = ("_event",)

    def __init__(self):
        self._event = threading.Event()

    def set(self) -> None:
        self._event.set()

    def is_set(self) -> bool:
        return self._event.is_set()

    def __repr__(self):
        return f"CancelSwitch(set={self.is_set()})"


# ---------------------------------------------------------------------------
# Parsed spans (the unit handed over by the language layer)

@dataclass(frozen=True)
class ParsedSpan:
    span: Span
    ast: Optional[CommandAst]
    classification: Optional[Classification]
    error: Optional[ErrorReport]


def analyze(text: str) -> list[ParsedSpan]:
    """Chop and parse a whole document, keeping per-span errors local."""
    out: list[ParsedSpan] = []
    for span in vernac.chop(text):
        try:
            ast = vernac.parse(span)
        except ParseError as exc:
            pos = span.offset + min(exc.pos, len(span.text))
            out.append(ParsedSpan(span, None, None,
                                  ErrorReport(exc.message, span.id, (pos, pos + 1))))
        else:
            out.append(ParsedSpan(span, ast, vernac.classify(ast), None))
    return out


# ---------------------------------------------------------------------------
# DAG structure

@dataclass(frozen=True)
class Transaction:
    label: Optional[CommandAst]
    span_id: Optional[int]
    text: str = ""
    twin_of: Optional[int] = None  # span id of the in-proof original
    in_branch: bool = False


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    transaction: Transaction


@dataclass
class ProofBranch:
    name: str
    statement: Formula
    statement_text: str
    root: int                 # master node the branch forks from
    tip: int
    span_ids: list[int]       # theorem span, proof spans, then qed span
    program: list[Transaction]
    proof_text: str = ""
    qed_node: Optional[int] = None
    qed_span: Optional[int] = None
    cancel: CancelSwitch = field(default_factory=CancelSwitch)

    @property
    def closed(self) -> bool:
        return self.qed_node is not None


@dataclass
class QueryAttachment:
    span_id: int
    ast: CommandAst
    at_node: int              # nearest preceding master state
    index: int                # position in the span list


@dataclass
class Dag:
    nodes: set[int] = field(default_factory=lambda: {0})
    in_edge: dict[int, Edge] = field(default_factory=dict)
    unlabeled: list[tuple[int, int]] = field(default_factory=list)
    master_tip: int = 0
    master_nodes: list[int] = field(default_factory=lambda: [0])
    branches: dict[str, int] = field(default_factory=dict)
    proof_branches: list[ProofBranch] = field(default_factory=list)
    open_branch: Optional[ProofBranch] = None
    queries: list[QueryAttachment] = field(default_factory=list)
    span_errors: dict[int, ErrorReport] = field(default_factory=dict)
    node_of_span: dict[int, int] = field(default_factory=dict)
    span_index: dict[int, int] = field(default_factory=dict)

    @property
    def labeled_edges(self) -> list[Edge]:
        return list(self.in_edge.values())

    def path_to(self, target: int) -> list[Edge]:
        path = []
        node = target
        while node != 0:
            edge = self.in_edge.get(node)
            if edge is None:
                raise DocumentError(f"node {node} unreachable through labeled edges")
            path.append(edge)
            node = edge.src
        path.reverse()
        return path

    def branch_of_span(self, span_id: int) -> Optional[ProofBranch]:
        for branch in self.proof_branches:
            if span_id in branch.span_ids:
                return branch
        if self.open_branch and span_id in self.open_branch.span_ids:
            return self.open_branch
        return None

    def branch_by_qed_node(self, node: int) -> Optional[ProofBranch]:
        for branch in self.proof_branches:
            if branch.qed_node == node:
                return branch
        return None


def build_dag(parsed: Sequence[ParsedSpan],
              next_id: Optional[Callable[[], int]] = None) -> Dag:
    """Commit spans onto the DAG, version-control style.

    Globals commit on master; a theorem forks a proof branch; tactics commit
    on the open branch; the closing command commits on master and ties an
    unlabeled edge to the branch tip.  A global command met inside a proof is
    committed twice: on the branch at its position and as a twin on master,
    so that its effect survives outside the (purely local) proof computation.
    Malformed or misplaced spans are recorded as failures without stopping
    construction.
    """
    counter = itertools.count(1)
    fresh = next_id or (lambda: next(counter))
    dag = Dag()

    def fail(span: Span, message: str) -> None:
        dag.span_errors[span.id] = ErrorReport(
            message, span.id, (span.offset, span.end))

    def commit(src: int, tr: Transaction) -> int:
        node = fresh()
        dag.nodes.add(node)
        dag.in_edge[node] = Edge(src, node, tr)
        if tr.span_id is not None and not tr.in_branch and tr.twin_of is None:
            dag.node_of_span[tr.span_id] = node
        if tr.in_branch and tr.span_id is not None:
            dag.node_of_span[tr.span_id] = node
        return node

    for index, item in enumerate(parsed):
        span = item.span
        dag.span_index[span.id] = index
        if item.error is not None:
            dag.span_errors[span.id] = item.error
            continue
        ast, cls = item.ast, item.classification
        open_branch = dag.open_branch
        if cls == GLOBAL:
            if open_branch is not None:
                branch_tr = Transaction(ast, span.id, span.text, in_branch=True)
                open_branch.tip = commit(open_branch.tip, branch_tr)
                open_branch.span_ids.append(span.id)
                open_branch.program.append(branch_tr)
                twin = Transaction(ast, span.id, span.text, twin_of=span.id)
                dag.master_tip = commit(dag.master_tip, twin)
                dag.master_nodes.append(dag.master_tip)
            else:
                dag.master_tip = commit(
                    dag.master_tip, Transaction(ast, span.id, span.text))
                dag.master_nodes.append(dag.master_tip)
        elif cls == BRANCH:
            if open_branch is not None:
                fail(span, "a proof is already open")
                continue
            assert isinstance(ast, vernac.TheoremCmd)
            dag.master_tip = commit(
                dag.master_tip, Transaction(ast, span.id, span.text))
            dag.master_nodes.append(dag.master_tip)
            dag.open_branch = ProofBranch(
                name=ast.name, statement=ast.statement,
                statement_text=span.text, root=dag.master_tip,
                tip=dag.master_tip, span_ids=[span.id], program=[])
            dag.branches[ast.name] = dag.master_tip
        elif cls == TACTIC:
            if open_branch is None:
                fail(span, "tactic used outside a proof")
                continue
            tr = Transaction(ast, span.id, span.text, in_branch=True)
            open_branch.tip = commit(open_branch.tip, tr)
            open_branch.span_ids.append(span.id)
            open_branch.program.append(tr)
            dag.branches[open_branch.name] = open_branch.tip
        elif cls == MERGE:
            if open_branch is None:
                fail(span, "nothing to close: no proof is open")
                continue
            qed_node = commit(dag.master_tip,
                              Transaction(ast, span.id, span.text))
            dag.master_tip = qed_node
            dag.master_nodes.append(qed_node)
            dag.unlabeled.append((qed_node, open_branch.tip))
            open_branch.qed_node = qed_node
            open_branch.qed_span = span.id
            open_branch.span_ids.append(span.id)
            open_branch.proof_text = "".join(t.text for t in open_branch.program)
            dag.proof_branches.append(open_branch)
            dag.open_branch = None
        elif cls == QUERY:
            dag.queries.append(QueryAttachment(span.id, ast, dag.master_tip, index))
        else:
            fail(span, f"unclassifiable command ({cls})")
    return dag


# ---------------------------------------------------------------------------
# System states

class SideTable:
    """Session-owned key table for data extruded out of system states."""

    def __init__(self):
        self._next = itertools.count(1)
        self._entries: dict[int, tuple[int, object]] = {}  # key -> (owner, value)

    def put(self, owner: int, value: object) -> int:
        key = next(self._next)
        self._entries[key] = (owner, value)
        return key

    def get(self, key: int):
        entry = self._entries.get(key)
        return None if entry is None else entry[1]

    def drop_owner(self, owner: int) -> None:
        stale = [k for k, (o, _) in self._entries.items() if o == owner]
        for k in stale:
            del self._entries[k]

    def __len__(self):
        return len(self._entries)


class ExtrudedView:
    """What a state exposes of the side table: lookups, valid only in-session.

    A view that crossed a process boundary has no table; every lookup misses.
    """

    __slots__ = ("_table",)

    def __init__(self, table: Optional[SideTable]):
        self._table = table

    def get(self, key: int):
        if self._table is None:
            return None
        return self._table.get(key)


DEAD_VIEW = ExtrudedView(None)

wire.register("s.ExtrudedView", ExtrudedView,
              lambda v: {}, lambda d: DEAD_VIEW)


@dataclass(frozen=True)
class SystemState:
    environment: Environment
    hints: HintDb
    open_proof: Optional[ProofState]
    extruded: ExtrudedView = DEAD_VIEW


wire.register("s.SystemState", SystemState)
wire.register("s.Transaction", Transaction)


def initial_state(table: Optional[SideTable] = None) -> SystemState:
    return SystemState(kernel.EMPTY_ENV, engine.EMPTY_HINTS, None,
                       ExtrudedView(table))


def state_shape(state: SystemState):
    """Encoding of a state that masks opaque proof payloads.

    Two states with equal shapes admit exactly the same continuations: the
    checker never looks inside opaque proofs, so pending/finished payloads
    must not distinguish them.
    """
    entries = []
    for entry in state.environment.entries:
        if isinstance(entry, kernel.Opaque):
            entries.append({"%t": "opaque-shape", "name": entry.name,
                            "statement": wire.encode(entry.statement)})
        else:
            entries.append(wire.encode(entry))
    return {
        "entries": entries,
        "hints": wire.encode(state.hints),
        "open_proof": wire.encode(state.open_proof),
    }


def state_digest(state: SystemState) -> str:
    raw = json.dumps(state_shape(state), sort_keys=True,
                     separators=(",", ":")).encode()
    return wire.digest_bytes(raw)


@dataclass(frozen=True)
class PureComputation:
    """A proof branch paired with the state it must run in.

    Running it has no effect on any other state; the result depends only on
    the base state and the program.
    """
    base: int
    program: tuple[Transaction, ...]
    produces: Formula
    name: str
    cancel: CancelSwitch


wire.register("s.PureComputation", PureComputation,
              lambda c: {"base": c.base, "program": wire.encode(list(c.program)),
                         "produces": wire.encode(c.produces), "name": c.name},
              lambda d: PureComputation(d["base"], wire.decode(d["program"]),
                                        wire.decode(d["produces"]), d["name"],
                                        CancelSwitch()))


def _proof_delay() -> None:
    ms = os.environ.get("SPROVER_PROOF_DELAY_MS")
    if ms:
        time.sleep(int(ms) / 1000.0)


class _Cancelled(Exception):
    pass


def run_program(base: SystemState, program: Sequence[Transaction],
                produces: Formula, name: str,
                cancel: Optional[CancelSwitch] = None,
                par_runner: Optional[Callable] = None,
                counter: Optional[Callable[[Transaction], None]] = None) -> Term:
    """Run a proof branch to completion and check the result.

    Pure: takes the base state as a value, returns the proof term; the final
    intermediate state is discarded.  This is the single executor shared by
    in-session forcing and worker processes, which is what makes delegation
    location-transparent.
    """
    _proof_delay()
    state = base
    for tr in program:
        if cancel is not None and cancel.is_set():
            raise kernel.PromiseError(ErrorReport(
                "proof computation cancelled", kind="cancelled"))
        try:
            state = execute_transaction(state, tr, par_runner=par_runner)
        except StateFailure as exc:
            raise kernel.PromiseError(exc.report) from exc
        if counter is not None:
            counter(tr)
    ps = state.open_proof
    if ps is None:
        raise kernel.PromiseError(ErrorReport(f"no proof open for {name}"))
    try:
        term = engine.finish_proof(ps)
    except engine.TacticError as exc:
        raise kernel.PromiseError(ErrorReport(str(exc)))
    try:
        kernel.typecheck(base.environment, [], term, produces)
    except kernel.KernelError as exc:
        raise kernel.PromiseError(ErrorReport(f"proof term rejected: {exc}"))
    return term


def execute_transaction(state: SystemState, tr: Transaction,
                        loader: Optional[Callable] = None,
                        par_runner: Optional[Callable] = None) -> SystemState:
    """Apply one labeled transaction to a state, returning the next state.

    Raises StateFailure with the originating span attached.  Merge edges are
    not handled here: admitting a theorem needs the session's promise
    bookkeeping (see Session._execute_qed).
    """
    ast = tr.label

    def failure(message: str) -> StateFailure:
        return StateFailure(ErrorReport(message, tr.span_id))

    try:
        if isinstance(ast, vernac.DefinitionCmd):
            env = kernel.env_add_definition(state.environment, ast.name,
                                            ast.params, ast.body)
            return replace(state, environment=env)
        if isinstance(ast, vernac.AxiomCmd):
            env = kernel.env_add_axiom(state.environment, ast.name, ast.statement)
            return replace(state, environment=env)
        if isinstance(ast, vernac.RequireCmd):
            if loader is None:
                raise failure(f"Require {ast.module}: no module loader available")
            env = loader(state.environment, ast.module)
            return replace(state, environment=env)
        if isinstance(ast, vernac.HintCmd):
            _check_hint_names(state.environment, ast)
            if tr.in_branch:
                if state.open_proof is None:
                    raise failure("hint inside a proof, but no proof is open")
                db = state.open_proof.hint_db
                db = (db.with_resolve(ast.names) if ast.kind == "resolve"
                      else db.with_unfold(ast.names))
                return replace(state,
                               open_proof=replace(state.open_proof, hint_db=db))
            db = (state.hints.with_resolve(ast.names) if ast.kind == "resolve"
                  else state.hints.with_unfold(ast.names))
            return replace(state, hints=db)
        if isinstance(ast, vernac.TheoremCmd):
            if state.open_proof is not None:
                raise failure("a proof is already open")
            ps = engine.start_proof(state.environment, ast.statement, state.hints)
            return replace(state, open_proof=ps)
        if isinstance(ast, vernac.TacticCmd):
            if state.open_proof is None:
                raise failure("tactic used outside a proof")
            tactic = ast.tactic
            if isinstance(tactic, engine.Par) and par_runner is not None:
                ps = par_runner(state, tactic.inner)
            else:
                ps = engine.apply_tactic(state.environment, state.open_proof, tactic)
            return replace(state, open_proof=ps)
    except StateFailure:
        raise
    except (kernel.KernelError, engine.TacticError) as exc:
        raise StateFailure(ErrorReport(str(exc), tr.span_id)) from exc
    raise failure(f"cannot execute {type(ast).__name__ if ast else 'unlabeled edge'}")


def _check_hint_names(env: Environment, ast: vernac.HintCmd) -> None:
    for name in ast.names:
        entry = env.lookup(name)
        if ast.kind == "resolve":
            if not isinstance(entry, (kernel.Axiom, kernel.Opaque)) and name != "tt":
                raise StateFailure(ErrorReport(
                    f"Hint Resolve {name}: not a proof name", None))
        else:
            if not isinstance(entry, kernel.Definition) and name != "not":
                raise StateFailure(ErrorReport(
                    f"Hint Unfold {name}: not a definition", None))


# ---------------------------------------------------------------------------
# The session: one logical owner of the DAG at a time

@dataclass
class _RegisteredProof:
    cell: PromiseCell
    computation: PureComputation
    statement_text: str
    proof_text: str
    base_digest: str
    branch: Optional[ProofBranch] = None  # current-revision branch, for feedback
    enqueued: bool = False


@dataclass
class UpdateResult:
    invalidated: set[int]         # new span ids needing (re)processing
    reusable: set[str]            # names of branches whose promise was kept


class Session:
    """Owns the document, DAG, memo table and proof bookkeeping.

    ``feedback(span_id, revision, kind, payload)`` is called as processing
    progresses; it must be cheap and thread-safe (worker-manager threads
    report through it too).
    """

    def __init__(self, queue=None,
                 loader: Optional[Callable[[Environment, str], Environment]] = None,
                 feedback: Optional[Callable[[int, int, str, dict], None]] = None):
        self.queue = queue
        self.loader = loader
        self._feedback = feedback
        self.revision = 0
        self.text = ""
        self.parsed: list[ParsedSpan] = []
        self.dag = Dag()
        self.side = SideTable()
        self.memo: dict[int, SystemState] = {}
        self.digests: dict[int, str] = {}
        self.failed: dict[int, ErrorReport] = {}
        self.executed_transactions = 0
        self.execution_log: list[Optional[int]] = []  # span ids, in order
        self._node_ids = itertools.count(1)
        self._adoption: dict[tuple, tuple[SystemState, str]] = {}
        self._registry: dict[tuple[str, str, str], _RegisteredProof] = {}
        self._by_statement: dict[tuple[str, str], tuple[str, str, str]] = {}
        self._status_sent: dict[int, str] = {}
        self._queries_inflight: set[int] = set()
        self._owner = threading.current_thread()
        self._reset_states()

    # -- plumbing -----------------------------------------------------------

    def _reset_states(self) -> None:
        init = initial_state(self.side)
        self.memo = {0: init}
        self.digests = {0: state_digest(init)}
        self.failed = {}

    def emit(self, span_id: int, kind: str, payload: dict) -> None:
        if self._feedback is not None:
            self._feedback(span_id, self.revision, kind, payload)

    def _status(self, span_id: int, status: str, **extra) -> None:
        prev = self._status_sent.get(span_id)
        if prev in ("processed", "failed"):
            return
        if prev == status:
            return
        self._status_sent[span_id] = status
        self.emit(span_id, "status", {"status": status, **extra})

    def _count(self, tr: Transaction) -> None:
        self.executed_transactions += 1
        self.execution_log.append(tr.span_id)

    # -- document lifecycle ---------------------------------------------------

    def load(self, text: str) -> None:
        """Install a document from scratch (first revision)."""
        self.update(text)

    def update(self, text: str) -> UpdateResult:
        """Install a new revision, keeping whatever survives the edit.

        States are reused through shape digests: a rebuilt node whose parent
        state and command text match a previously computed node adopts its
        state without re-execution.  Proof computations are reused when the
        statement, the proof text, and the base state all match; a changed
        proof under an unchanged statement swaps a fresh pending proof into
        the existing promise cell, which every environment that admitted the
        theorem observes at once.
        """
        old_parsed = self.parsed
        parsed = analyze(text)
        self.revision += 1
        self.text = text
        self.parsed = parsed
        self._status_sent = {}
        self._queries_inflight = set()

        # Harvest adoption table from the old dag before discarding it.
        self._harvest_adoption()

        first_change = _first_text_difference(old_parsed, parsed)
        self.dag = build_dag(parsed, next_id=lambda: next(self._node_ids))
        self._reset_states()

        invalidated = {p.span.id for p in parsed[first_change:]}
        reusable, cancelled = self._reconcile_proofs()
        for reg in cancelled:
            reg.computation.cancel.set()
        return UpdateResult(invalidated=invalidated, reusable=reusable)

    def _harvest_adoption(self) -> None:
        for node, state in self.memo.items():
            if node == 0 or node in self.failed:
                continue
            edge = self.dag.in_edge.get(node)
            if edge is None:
                continue
            parent_digest = self.digests.get(edge.src)
            own_digest = self.digests.get(node)
            if parent_digest is None or own_digest is None:
                continue
            key = self._adoption_key(edge.transaction, parent_digest,
                                     self.dag.branch_by_qed_node(node))
            self._adoption[key] = (state, own_digest)

    @staticmethod
    def _adoption_key(tr: Transaction, parent_digest: str,
                      branch: Optional[ProofBranch]) -> tuple:
        extra = ("", "")
        if branch is not None:
            extra = (branch.statement_text, branch.proof_text)
        return (parent_digest, tr.text, tr.in_branch, tr.twin_of is not None, *extra)

    def _reconcile_proofs(self) -> tuple[set[str], list[_RegisteredProof]]:
        """Cancel registered computations made obsolete by the new revision.

        A registration whose statement and proof both still appear verbatim
        stays live.  One whose statement survives with a different proof is
        cancelled but kept: its promise cell is what the rebuilt merge will
        swap the new pending proof into.  One whose statement vanished is
        cancelled and dropped.
        """
        exact_keys = {(b.statement_text, b.proof_text)
                      for b in self.dag.proof_branches}
        statements = {b.statement_text for b in self.dag.proof_branches}
        reusable: set[str] = set()
        cancelled: list[_RegisteredProof] = []
        for key, reg in list(self._registry.items()):
            if (reg.statement_text, reg.proof_text) in exact_keys:
                reusable.add(reg.computation.name)
                continue
            cancelled.append(reg)
            if reg.statement_text not in statements:
                del self._registry[key]
                stmt_key = (reg.statement_text, reg.base_digest)
                if self._by_statement.get(stmt_key) == key:
                    del self._by_statement[stmt_key]
                self.side.drop_owner(reg.computation.base)
        return reusable, cancelled

    # -- state computation ----------------------------------------------------

    def compute_state(self, target: int) -> SystemState:
        """Memoized execution of the labeled path from the initial state."""
        if target in self.memo:
            return self.memo[target]
        if target in self.failed:
            raise StateFailure(self.failed[target])
        state = None
        for edge in self.dag.path_to(target):
            state = self._step(edge)
        assert state is not None or target == 0
        return self.memo[target]

    def _step(self, edge: Edge) -> SystemState:
        """Compute the state at ``edge.dst`` given a computed parent."""
        node = edge.dst
        if node in self.memo:
            return self.memo[node]
        if node in self.failed:
            raise StateFailure(self.failed[node])
        if edge.src in self.failed:
            report = self.failed[edge.src]
            blocked = ErrorReport("blocked by an earlier error",
                                  edge.transaction.span_id)
            self.failed[node] = blocked if report.span_id != edge.transaction.span_id else report
            raise StateFailure(self.failed[node])
        parent = self.memo[edge.src]
        parent_digest = self.digests[edge.src]
        tr = edge.transaction
        branch = self.dag.branch_by_qed_node(node)
        key = self._adoption_key(tr, parent_digest, branch)
        adopted = self._adoption.get(key)
        span_id = tr.span_id
        if span_id is not None:
            self._status(span_id, "processing")
        try:
            if adopted is not None:
                state, digest = adopted
                if branch is not None:
                    self._register_branch(branch, parent, reuse_state=state)
            else:
                self._emit_markup(tr, parent)
                if branch is not None:
                    state = self._execute_qed(branch, parent, tr)
                else:
                    state = execute_transaction(parent, tr, loader=self.loader,
                                                par_runner=self._session_par)
                    self._count(tr)
                digest = state_digest(state)
        except StateFailure as exc:
            self.failed[node] = exc.report
            if span_id is not None:
                self._status(span_id, "failed", message=exc.report.message)
            raise
        self.memo[node] = state
        self.digests[node] = digest
        if span_id is not None:
            if tr.in_branch or isinstance(tr.label, vernac.TheoremCmd):
                if state.open_proof is not None:
                    self.emit(span_id, "goals",
                              {"text": _render_goals(state.open_proof)})
            if branch is not None and not branch.program:
                pass  # a bodyless proof: the merge span carries the proof's fate
            else:
                self._status(span_id, "processed")
        return state

    def _execute_qed(self, branch: ProofBranch, parent: SystemState,
                     tr: Transaction) -> SystemState:
        """Admit the theorem now; package the branch as a pure computation."""
        if parent.open_proof is None:
            raise StateFailure(ErrorReport("nothing to close: no proof is open",
                                           tr.span_id))
        base_state = self.compute_state(branch.root)
        base_digest = self.digests[branch.root]
        self._count(tr)
        reg = self._register_branch_impl(branch, base_digest)
        try:
            env = kernel.env_add_opaque(parent.environment, branch.name,
                                        branch.statement, reg.cell)
        except kernel.KernelError as exc:
            raise StateFailure(ErrorReport(str(exc), tr.span_id))
        return replace(parent, environment=env, open_proof=None)

    def _register_branch(self, branch: ProofBranch, parent: SystemState,
                         reuse_state: SystemState) -> None:
        """Adopted merge node: reconnect its promise cell to this session."""
        base_digest = self.digests[branch.root]
        self._register_branch_impl(branch, base_digest,
                                   cell_hint=_find_cell(reuse_state, branch.name))

    def _register_branch_impl(self, branch: ProofBranch, base_digest: str,
                              cell_hint: Optional[PromiseCell] = None) -> _RegisteredProof:
        exact = (branch.statement_text, branch.proof_text, base_digest)
        reg = self._registry.get(exact)
        computation = PureComputation(
            base=branch.root, program=tuple(branch.program),
            produces=branch.statement, name=branch.name, cancel=branch.cancel)
        if reg is not None:
            # Same statement, proof and base: keep the promise (maybe already
            # finished); rebind a still-pending one to the rebuilt branch.
            promise = reg.cell.current
            if promise.status == kernel.DELEGATED \
                    and reg.computation.cancel.is_set():
                # The earlier computation was cancelled before producing a
                # result; start over under a fresh switch.
                fresh = ProofPromise(branch.statement, base_key=branch.root)
                reg.cell.swap(fresh)
                reg.computation = computation
                fresh.handle = self.side.put(branch.root, computation)
            else:
                branch.cancel = reg.computation.cancel
                reg.computation = replace(computation,
                                          cancel=reg.computation.cancel)
            reg.branch = branch
            self._wire_promise(reg)
            return reg
        stmt_key = (branch.statement_text, base_digest)
        prev_exact = self._by_statement.get(stmt_key)
        cell: Optional[PromiseCell] = None
        if prev_exact is not None and prev_exact in self._registry:
            # Same statement over the same base but a different proof script:
            # replace the pending proof in place and stop the old computation.
            old = self._registry.pop(prev_exact)
            old.computation.cancel.set()
            cell = old.cell
        promise = ProofPromise(branch.statement, base_key=branch.root)
        if cell is None:
            cell = cell_hint or PromiseCell(promise)
        if cell.current is not promise:
            cell.swap(promise)
        reg = _RegisteredProof(cell=cell, computation=computation,
                               statement_text=branch.statement_text,
                               proof_text=branch.proof_text,
                               base_digest=base_digest, branch=branch)
        self._registry[exact] = reg
        self._by_statement[stmt_key] = exact
        self._wire_promise(reg)
        promise.handle = self.side.put(branch.root, reg.computation)
        return reg

    def _wire_promise(self, reg: _RegisteredProof) -> None:
        promise = reg.cell.current
        if promise.status != kernel.DELEGATED:
            return

        def run_and_report() -> Term:
            try:
                term = self.run_computation(reg.computation)
            except kernel.PromiseError as exc:
                if reg.branch is not None and exc.report.kind != "cancelled":
                    self._branch_failed(reg.branch, exc.report)
                raise
            if reg.branch is not None:
                self._branch_processed(reg.branch)
            return term

        promise._run = run_and_report

    # -- forcing ---------------------------------------------------------------

    def run_computation(self, comp: PureComputation) -> Term:
        """Force a proof branch locally (the state-backup discipline).

        The base state is installed as a value, the program runs to
        completion, the produced term is checked, and the intermediate final
        state is discarded; the caller's states are untouched throughout.
        """
        if comp.cancel.is_set():
            raise kernel.PromiseError(ErrorReport(
                "proof computation cancelled", kind="cancelled"))
        base = self.compute_state(comp.base)
        return run_program(base, comp.program, comp.produces, comp.name,
                           cancel=comp.cancel, counter=self._count)

    def future_force(self, comp: PureComputation) -> Term:
        return self.run_computation(comp)

    def _session_par(self, state: SystemState, inner: TacticAst) -> ProofState:
        """Goal-parallel tactic: delegate per-goal subtasks when workers exist."""
        ps = state.open_proof
        queue = self.queue
        if (queue is None or not queue.worker_count
                or threading.current_thread() is not self._owner):
            witnesses = [engine.solve_goal(state.environment, ps.hint_db, g, t)
                         for g, t in engine.par_split(state.environment, ps, inner)]
            return engine.join_par(ps, witnesses)
        from . import taskqueue
        subtasks = engine.par_split(state.environment, ps, inner)
        results = queue.run_par_batch(state, subtasks)
        return engine.join_par(ps, results)

    # -- scheduling -------------------------------------------------------------

    def observe(self, perspective: set[int],
                should_yield: Optional[Callable[[], bool]] = None) -> bool:
        """Compute the master line, prioritizing proofs near the perspective.

        Returns True when the walk covered the whole document, False if it
        yielded early (``should_yield`` went true between transactions).
        Merge transactions delegate their proof to the task queue with
        priority decreasing in span distance from the perspective; the
        observed path never waits on any of them.
        """
        self._sync_branch_prefixes(perspective)
        for node in self.dag.master_nodes:
            if node == 0:
                continue
            if should_yield is not None and should_yield():
                return False
            edge = self.dag.in_edge[node]
            try:
                self._step(edge)
            except StateFailure:
                self._mark_downstream_blocked(node)
                break
            branch = self.dag.branch_by_qed_node(node)
            if branch is not None:
                self._schedule_proof(branch, perspective)
        self._run_queries(perspective)
        self._report_build_errors()
        return True

    def _report_build_errors(self) -> None:
        for span_id, report in self.dag.span_errors.items():
            self._status(span_id, "failed", message=report.message)

    def _mark_downstream_blocked(self, failed_node: int) -> None:
        seen = False
        for node in self.dag.master_nodes:
            if node == failed_node:
                seen = True
                continue
            if not seen:
                continue
            span_id = self.dag.in_edge[node].transaction.span_id
            if span_id is not None:
                self._status(span_id, "failed",
                             message="blocked by an earlier error")

    def _distance(self, span_id: int, perspective: set[int]) -> int:
        if not perspective:
            return 0
        index = self.dag.span_index.get(span_id, 0)
        return min(abs(index - self.dag.span_index.get(p, 0))
                   for p in perspective)

    def _schedule_proof(self, branch: ProofBranch, perspective: set[int]) -> None:
        base_digest = self.digests[branch.root]
        exact = (branch.statement_text, branch.proof_text, base_digest)
        reg = self._registry.get(exact)
        if reg is None:
            return
        promise = reg.cell.current
        if promise.status != kernel.DELEGATED:
            self._finish_branch_feedback(branch, promise)
            return
        queue = self.queue
        if queue is None or reg.enqueued:
            return
        reg.enqueued = True
        from . import taskqueue
        priority = -self._distance(branch.qed_span or 0, perspective)
        base_state = self.memo[branch.root]
        task = taskqueue.ProofTask(
            computation=reg.computation, entry_name=branch.name,
            base_state=base_state, base_digest=base_digest,
            priority=priority, cancel=reg.computation.cancel,
            on_done=self._proof_done_callback(reg))
        queue.enqueue(task, reg.computation.cancel)

    def _proof_done_callback(self, reg: _RegisteredProof):
        def on_done(outcome: str, payload, error: Optional[ErrorReport]) -> None:
            promise = reg.cell.current
            if outcome == "finished":
                promise.fulfill(payload)
            elif outcome == "cancelled":
                promise.reject(error or ErrorReport("cancelled", kind="cancelled"))
                return  # a cancelled branch is obsolete; no feedback
            else:
                promise.reject(error or ErrorReport("proof failed"))
            if reg.branch is not None:
                self._finish_branch_feedback(reg.branch, reg.cell.current)
        return on_done

    def _finish_branch_feedback(self, branch: ProofBranch,
                                promise: ProofPromise) -> None:
        if promise.status == kernel.FINISHED:
            self._branch_processed(branch)
        else:
            self._branch_failed(branch, promise.error or ErrorReport("proof failed"))

    def _branch_processed(self, branch: ProofBranch) -> None:
        for span_id in branch.span_ids[1:]:  # statement span stays as-is
            self._status(span_id, "processed")

    def _branch_failed(self, branch: ProofBranch, report: ErrorReport) -> None:
        """Red goes on the offending span only; what ran before it is fine.

        Failures without an offending transaction (open goals at the merge)
        land on the last proof step, or on the merge span of a bodyless
        proof.  Spans past the failure never ran and stay non-terminal.
        """
        program_spans = [t.span_id for t in branch.program
                         if t.span_id is not None]
        target = report.span_id
        if target is None or target not in program_spans:
            target = program_spans[-1] if program_spans else branch.qed_span
        for span_id in program_spans:
            if span_id == target:
                break
            self._status(span_id, "processed")
        if target is not None:
            self._status(target, "failed", message=report.message)

    def _sync_branch_prefixes(self, perspective: set[int]) -> None:
        """Goal display: compute branch states the user is looking at."""
        for span_id in perspective:
            branch = self.dag.branch_of_span(span_id)
            if branch is None or span_id == branch.qed_span:
                continue
            node = self.dag.node_of_span.get(span_id)
            if node is None:
                continue
            try:
                self.compute_state(node)
            except StateFailure:
                pass

    def _run_queries(self, perspective: set[int]) -> None:
        ordered = sorted(self.dag.queries,
                         key=lambda q: (self._distance(q.span_id, perspective),
                                        q.index))
        for query in ordered:
            if self._status_sent.get(query.span_id) in ("processed", "failed") \
                    or query.span_id in self._queries_inflight:
                continue
            try:
                state = self.compute_state(query.at_node)
            except StateFailure:
                self._status(query.span_id, "failed",
                             message="blocked by an earlier error")
                continue
            queue = self.queue
            if queue is not None and queue.worker_count:
                from . import taskqueue
                self._queries_inflight.add(query.span_id)
                self._status(query.span_id, "processing")
                task = taskqueue.QueryTask(
                    span_id=query.span_id, ast=query.ast, state=state,
                    base_digest=self.digests[query.at_node],
                    priority=-self._distance(query.span_id, perspective),
                    cancel=CancelSwitch(),
                    on_done=self._query_done_callback(query.span_id))
                queue.enqueue(task, task.cancel)
            else:
                try:
                    text = run_query(state, query.ast)
                except StateFailure as exc:
                    self._status(query.span_id, "failed", message=exc.report.message)
                else:
                    self.emit(query.span_id, "query_result", {"text": text})
                    self._status(query.span_id, "processed")

    def _query_done_callback(self, span_id: int):
        def on_done(outcome: str, payload, error: Optional[ErrorReport]) -> None:
            if outcome == "finished":
                self.emit(span_id, "query_result", {"text": payload})
                self._status(span_id, "processed")
            elif outcome == "failed":
                self._status(span_id, "failed",
                             message=error.message if error else "query failed")
        return on_done

    def _emit_markup(self, tr: Transaction, state: SystemState) -> None:
        """Volatile reports: name resolution is only known while executing."""
        if tr.label is None or tr.span_id is None or self._feedback is None:
            return
        index = self.dag.span_index.get(tr.span_id)
        offset = self.parsed[index].span.offset if index is not None else 0
        links = resolve_hyperlinks(tr, state, self._defining_span, offset)
        if links:
            self.emit(tr.span_id, "markup", {"hyperlinks": links})

    def _defining_span(self, name: str) -> Optional[int]:
        for item in self.parsed:
            ast = item.ast
            if isinstance(ast, (vernac.DefinitionCmd, vernac.AxiomCmd,
                                vernac.TheoremCmd)) and ast.name == name:
                return item.span.id
        return None

    # -- whole-document checking -------------------------------------------------

    def pending_promises(self) -> list[tuple[str, PromiseCell]]:
        tip = self.dag.master_tip
        if tip not in self.memo:
            return []
        env = self.memo[tip].environment
        return [(e.name, e.cell) for e in env.entries
                if isinstance(e, kernel.Opaque)
                and e.cell.current.status == kernel.DELEGATED]

    def final_environment(self) -> Environment:
        return self.compute_state(self.dag.master_tip).environment

    def document_errors(self) -> list[ErrorReport]:
        """Structural and master-line errors (proof failures not included)."""
        errors = list(self.dag.span_errors.values())
        errors.extend(self.failed.values())
        if self.dag.open_branch is not None:
            errors.append(ErrorReport(
                f"proof of {self.dag.open_branch.name} is never closed",
                self.dag.open_branch.span_ids[0]))
        return errors


def _find_cell(state: SystemState, name: str) -> Optional[PromiseCell]:
    entry = state.environment.lookup(name)
    return entry.cell if isinstance(entry, kernel.Opaque) else None


def _first_text_difference(old: Sequence[ParsedSpan],
                           new: Sequence[ParsedSpan]) -> int:
    i = 0
    while i < len(old) and i < len(new) and old[i].span.text == new[i].span.text:
        i += 1
    return i


def _render_goals(ps: ProofState) -> str:
    if not ps.goals:
        return "no goals left"
    head = vernac.format_goal(ps.goals[0])
    if len(ps.goals) == 1:
        return f"1 goal\n{head}"
    return f"{len(ps.goals)} goals (showing first)\n{head}"


# ---------------------------------------------------------------------------
# Queries (no effect beyond their printout)

def run_query(state: SystemState, ast: CommandAst) -> str:
    if isinstance(ast, vernac.CheckCmd):
        try:
            kernel.wf_formula(state.environment, ast.formula)
        except kernel.FormulaError as exc:
            raise StateFailure(ErrorReport(str(exc)))
        return f"{vernac.format_formula(ast.formula)} : Prop"
    if isinstance(ast, vernac.PrintCmd):
        entry = state.environment.lookup(ast.name)
        if entry is None:
            raise StateFailure(ErrorReport(f"unknown name {ast.name}"))
        if isinstance(entry, kernel.Definition):
            params = "".join(f" ({p} : Prop)" for p in entry.params)
            return (f"Definition {entry.name}{params} := "
                    f"{vernac.format_formula(entry.body)}")
        if isinstance(entry, kernel.Axiom):
            return f"Axiom {entry.name} : {vernac.format_formula(entry.statement)}"
        assert isinstance(entry, kernel.Opaque)
        status = entry.cell.current.status
        return (f"Theorem {entry.name} : "
                f"{vernac.format_formula(entry.statement)} ({status})")
    raise StateFailure(ErrorReport(f"not a query: {type(ast).__name__}"))


def resolve_hyperlinks(tr: Transaction, state: SystemState,
                       defining_span: Callable[[str], Optional[int]],
                       offset: int = 0) -> list[dict]:
    """Hyperlink every name the executing command mentions to its definition."""
    if tr.label is None:
        return []
    links: list[dict] = []
    searched = 0
    for name in vernac.command_names(tr.label):
        at = _find_word(tr.text, name, searched)
        if at is None:
            continue
        searched = at + len(name)
        target = defining_span(name)
        if target is None:
            continue
        links.append({"char_range": [offset + at, offset + at + len(name)],
                      "target": target, "name": name})
    return links


def _find_word(text: str, word: str, start: int) -> Optional[int]:
    i = start
    while True:
        at = text.find(word, i)
        if at < 0:
            return None
        before = text[at - 1] if at > 0 else " "
        after_idx = at + len(word)
        after = text[after_idx] if after_idx < len(text) else " "
        if not (before.isalnum() or before in "_'") and not (after.isalnum() or after in "_'"):
            return at
        i = at + 1
