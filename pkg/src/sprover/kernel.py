"""Trusted checking core: formulas, proof terms, environments, admission rules.

Everything in this module is value-in/value-out and safe to call from any
thread or process.  The only mutable objects are proof promises, whose status
moves from pending to a terminal state exactly once, and the promise cells
that let a document edit swap a theorem's pending proof without rebuilding
every environment that mentions it.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence, Union


class KernelError(Exception):
    """Base class for admission and checking failures."""


class FormulaError(KernelError):
    """Ill-formed formula: unknown definition, arity mismatch, misused name."""


class TypeCheckError(KernelError):
    """Term is not a witness of the expected formula."""


class EnvironmentError_(KernelError):
    """Environment extension rejected (duplicate name, ill-formed entry)."""


# ---------------------------------------------------------------------------
# Formulas

@dataclass(frozen=True)
class Atom:
    name: str


@dataclass(frozen=True)
class Truth:
    pass


@dataclass(frozen=True)
class Falsity:
    pass


@dataclass(frozen=True)
class Impl:
    lhs: "Formula"
    rhs: "Formula"


@dataclass(frozen=True)
class Conj:
    lhs: "Formula"
    rhs: "Formula"


@dataclass(frozen=True)
class Disj:
    lhs: "Formula"
    rhs: "Formula"


@dataclass(frozen=True)
class DefApp:
    name: str
    args: tuple["Formula", ...]


Formula = Union[Atom, Truth, Falsity, Impl, Conj, Disj, DefApp]

TRUTH = Truth()
FALSITY = Falsity()


# ---------------------------------------------------------------------------
# Proof terms.  Inl/Inr/Exfalso carry the formula annotation that keeps
# checking syntax-directed.

@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Lam:
    name: str
    ty: Formula
    body: "Term"


@dataclass(frozen=True)
class App:
    fn: "Term"
    arg: "Term"


@dataclass(frozen=True)
class Pair:
    fst: "Term"
    snd: "Term"


@dataclass(frozen=True)
class Fst:
    of: "Term"


@dataclass(frozen=True)
class Snd:
    of: "Term"


@dataclass(frozen=True)
class Inl:
    of: "Term"
    right: Formula  # the disjunct NOT witnessed


@dataclass(frozen=True)
class Inr:
    of: "Term"
    left: Formula  # the disjunct NOT witnessed


@dataclass(frozen=True)
class Case:
    scrut: "Term"
    lname: str
    lbody: "Term"
    rname: str
    rbody: "Term"


@dataclass(frozen=True)
class TT:
    pass


@dataclass(frozen=True)
class Exfalso:
    of: "Term"
    goal: Formula


Term = Union[Var, Lam, App, Pair, Fst, Snd, Inl, Inr, Case, TT, Exfalso]

TT_TERM = TT()


# ---------------------------------------------------------------------------
# Error reports and proof promises

@dataclass(frozen=True)
class ErrorReport:
    """A failure message with optional attribution to a document span."""

    message: str
    span_id: Optional[int] = None
    char_range: Optional[tuple[int, int]] = None
    kind: str = "error"  # "error" | "cancelled" | "infrastructure"


class PromiseError(KernelError):
    """Raised when forcing a promise that failed or cannot run here."""

    def __init__(self, report: ErrorReport):
        super().__init__(report.message)
        self.report = report


DELEGATED = "delegated"
FINISHED = "finished"
FAILED = "failed"


class ProofPromise:
    """Placeholder for a proof term that may still be produced elsewhere.

    Status moves from delegated to finished or failed exactly once; terminal
    states are idempotent under forcing.  ``run`` is a session-local thunk
    producing the term; it is never serialized, so a promise that crossed a
    process boundary can only be forced if it already carries its result.
    """

    def __init__(
        self,
        statement: Formula,
        base_key: int = 0,
        run: Optional[Callable[[], Term]] = None,
        handle: Optional[object] = None,
    ):
        self.statement = statement
        self.base_key = base_key
        self.handle = handle
        self._run = run
        self._lock = threading.Lock()
        self._status = DELEGATED
        self._term: Optional[Term] = None
        self._error: Optional[ErrorReport] = None

    @property
    def status(self) -> str:
        return self._status

    @property
    def term(self) -> Optional[Term]:
        return self._term

    @property
    def error(self) -> Optional[ErrorReport]:
        return self._error

    def fulfill(self, term: Term) -> bool:
        """Record the produced term; no-op (returns False) once terminal."""
        with self._lock:
            if self._status != DELEGATED:
                return False
            self._term = term
            self._status = FINISHED
            return True

    def reject(self, error: ErrorReport) -> bool:
        with self._lock:
            if self._status != DELEGATED:
                return False
            self._error = error
            self._status = FAILED
            return True

    def force(self) -> Term:
        """Return the proof term, running the delegated computation if needed."""
        if self._status == DELEGATED:
            run = self._run
            if run is None:
                self.reject(ErrorReport("proof computation is not available here",
                                        kind="infrastructure"))
            else:
                try:
                    term = run()
                except PromiseError as exc:
                    self.reject(exc.report)
                except KernelError as exc:
                    self.reject(ErrorReport(str(exc)))
                else:
                    self.fulfill(term)
        if self._status == FINISHED:
            assert self._term is not None
            return self._term
        assert self._error is not None
        raise PromiseError(self._error)

    @classmethod
    def finished(cls, statement: Formula, term: Term, base_key: int = 0) -> "ProofPromise":
        p = cls(statement, base_key)
        p.fulfill(term)
        return p

    @classmethod
    def failed(cls, statement: Formula, error: ErrorReport, base_key: int = 0) -> "ProofPromise":
        p = cls(statement, base_key)
        p.reject(error)
        return p


class PromiseCell:
    """Mutable slot holding the current promise of one opaque entry.

    Editing a proof script without touching the statement swaps the cell
    content; environments sharing the entry keep observing a single, current
    promise.  The checker never reads through the cell except when forcing.
    """

    __slots__ = ("current",)

    def __init__(self, promise: ProofPromise):
        self.current = promise

    def swap(self, promise: ProofPromise) -> ProofPromise:
        old = self.current
        self.current = promise
        return old


# ---------------------------------------------------------------------------
# Environments

@dataclass(frozen=True)
class Definition:
    name: str
    params: tuple[str, ...]
    body: Formula


@dataclass(frozen=True)
class Axiom:
    name: str
    statement: Formula


@dataclass(frozen=True)
class Opaque:
    name: str
    statement: Formula
    cell: PromiseCell

    @property
    def promise(self) -> ProofPromise:
        return self.cell.current


EnvEntry = Union[Definition, Axiom, Opaque]


@dataclass(frozen=True)
class Environment:
    entries: tuple[EnvEntry, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "_index", {e.name: e for e in self.entries})

    def lookup(self, name: str) -> Optional[EnvEntry]:
        return self._index.get(name)  # type: ignore[attr-defined]

    def __contains__(self, name: str) -> bool:
        return name in self._index  # type: ignore[attr-defined]

    def extended(self, entry: EnvEntry) -> "Environment":
        return Environment(self.entries + (entry,))

    def prefix(self, count: int) -> "Environment":
        return Environment(self.entries[:count])


EMPTY_ENV = Environment()


def wf_formula(env: Environment, formula: Formula) -> None:
    """Reject formulas whose definition references do not resolve.

    Bare atoms are free propositional constants unless they collide with an
    environment name: a zero-parameter definition is fine (it unfolds), any
    other entry kind is a misuse.
    """
    if isinstance(formula, (Truth, Falsity)):
        return
    if isinstance(formula, Atom):
        entry = env.lookup(formula.name)
        if entry is None:
            return
        if isinstance(entry, Definition):
            if entry.params:
                raise FormulaError(
                    f"{formula.name} expects {len(entry.params)} argument(s), got 0")
            return
        raise FormulaError(f"{formula.name} is a proof name, not a proposition")
    if isinstance(formula, (Impl, Conj, Disj)):
        wf_formula(env, formula.lhs)
        wf_formula(env, formula.rhs)
        return
    if isinstance(formula, DefApp):
        entry = env.lookup(formula.name)
        if entry is None:
            raise FormulaError(f"unknown definition {formula.name}")
        if not isinstance(entry, Definition):
            raise FormulaError(f"{formula.name} is not a definition")
        if len(entry.params) != len(formula.args):
            raise FormulaError(
                f"{formula.name} expects {len(entry.params)} argument(s), "
                f"got {len(formula.args)}")
        for arg in formula.args:
            wf_formula(env, arg)
        return
    raise FormulaError(f"not a formula: {formula!r}")


def subst_atoms(formula: Formula, mapping: dict) -> Formula:
    if isinstance(formula, Atom):
        return mapping.get(formula.name, formula)
    if isinstance(formula, (Truth, Falsity)):
        return formula
    if isinstance(formula, Impl):
        return Impl(subst_atoms(formula.lhs, mapping), subst_atoms(formula.rhs, mapping))
    if isinstance(formula, Conj):
        return Conj(subst_atoms(formula.lhs, mapping), subst_atoms(formula.rhs, mapping))
    if isinstance(formula, Disj):
        return Disj(subst_atoms(formula.lhs, mapping), subst_atoms(formula.rhs, mapping))
    if isinstance(formula, DefApp):
        return DefApp(formula.name, tuple(subst_atoms(a, mapping) for a in formula.args))
    raise FormulaError(f"not a formula: {formula!r}")


def whnf(env: Environment, formula: Formula) -> Formula:
    """Expand definitions at the head until a connective or free atom shows."""
    while True:
        if isinstance(formula, DefApp):
            entry = env.lookup(formula.name)
            if not isinstance(entry, Definition):
                raise FormulaError(f"unknown definition {formula.name}")
            formula = subst_atoms(entry.body, dict(zip(entry.params, formula.args)))
            continue
        if isinstance(formula, Atom):
            entry = env.lookup(formula.name)
            if isinstance(entry, Definition) and not entry.params:
                formula = entry.body
                continue
        return formula


def delta_eq(env: Environment, left: Formula, right: Formula) -> bool:
    """Equality modulo complete definition unfolding.

    Unfolds lazily head-first, which decides the same relation as comparing
    fully expanded normal forms but short-circuits on the first mismatch.
    """
    if left == right:
        return True
    left = whnf(env, left)
    right = whnf(env, right)
    if type(left) is not type(right):
        return False
    if isinstance(left, Atom):
        return left == right
    if isinstance(left, (Truth, Falsity)):
        return True
    assert isinstance(left, (Impl, Conj, Disj)) and isinstance(right, (Impl, Conj, Disj))
    return delta_eq(env, left.lhs, right.lhs) and delta_eq(env, left.rhs, right.rhs)


def normalize(env: Environment, formula: Formula) -> Formula:
    """Fully expand every definition occurrence."""
    formula = whnf(env, formula)
    if isinstance(formula, Impl):
        return Impl(normalize(env, formula.lhs), normalize(env, formula.rhs))
    if isinstance(formula, Conj):
        return Conj(normalize(env, formula.lhs), normalize(env, formula.rhs))
    if isinstance(formula, Disj):
        return Disj(normalize(env, formula.lhs), normalize(env, formula.rhs))
    return formula


# ---------------------------------------------------------------------------
# Typing judgment

def _proof_name_formula(env: Environment, ctx: Sequence[tuple[str, Formula]],
                        name: str) -> Formula:
    for hyp_name, hyp_formula in reversed(ctx):
        if hyp_name == name:
            return hyp_formula
    entry = env.lookup(name)
    if isinstance(entry, (Axiom, Opaque)):
        return entry.statement
    if isinstance(entry, Definition):
        raise TypeCheckError(f"{name} is a definition, not a proof")
    raise TypeCheckError(f"unbound variable {name}")


def infer(env: Environment, ctx: Sequence[tuple[str, Formula]], term: Term) -> Formula:
    """Compute the unique formula a term witnesses, or fail."""
    if isinstance(term, Var):
        return _proof_name_formula(env, ctx, term.name)
    if isinstance(term, TT):
        return TRUTH
    if isinstance(term, Lam):
        wf_formula(env, term.ty)
        body = infer(env, list(ctx) + [(term.name, term.ty)], term.body)
        return Impl(term.ty, body)
    if isinstance(term, App):
        fn_ty = whnf(env, infer(env, ctx, term.fn))
        if not isinstance(fn_ty, Impl):
            raise TypeCheckError("application head is not an implication")
        check(env, ctx, term.arg, fn_ty.lhs)
        return fn_ty.rhs
    if isinstance(term, Pair):
        return Conj(infer(env, ctx, term.fst), infer(env, ctx, term.snd))
    if isinstance(term, Fst):
        ty = whnf(env, infer(env, ctx, term.of))
        if not isinstance(ty, Conj):
            raise TypeCheckError("first projection of a non-conjunction")
        return ty.lhs
    if isinstance(term, Snd):
        ty = whnf(env, infer(env, ctx, term.of))
        if not isinstance(ty, Conj):
            raise TypeCheckError("second projection of a non-conjunction")
        return ty.rhs
    if isinstance(term, Inl):
        wf_formula(env, term.right)
        return Disj(infer(env, ctx, term.of), term.right)
    if isinstance(term, Inr):
        wf_formula(env, term.left)
        return Disj(term.left, infer(env, ctx, term.of))
    if isinstance(term, Case):
        scrut_ty = whnf(env, infer(env, ctx, term.scrut))
        if not isinstance(scrut_ty, Disj):
            raise TypeCheckError("case analysis on a non-disjunction")
        left_ty = infer(env, list(ctx) + [(term.lname, scrut_ty.lhs)], term.lbody)
        right_ty = infer(env, list(ctx) + [(term.rname, scrut_ty.rhs)], term.rbody)
        if not delta_eq(env, left_ty, right_ty):
            raise TypeCheckError("case branches prove different formulas")
        return left_ty
    if isinstance(term, Exfalso):
        wf_formula(env, term.goal)
        check(env, ctx, term.of, FALSITY)
        return term.goal
    raise TypeCheckError(f"not a proof term: {term!r}")


def check(env: Environment, ctx: Sequence[tuple[str, Formula]],
          term: Term, expected: Formula) -> None:
    found = infer(env, ctx, term)
    if not delta_eq(env, found, expected):
        raise TypeCheckError(
            f"formula mismatch: expected {expected!r}, found {found!r}")


def typecheck(env: Environment, ctx: Sequence[tuple[str, Formula]],
              term: Term, expected: Formula) -> None:
    """Check that ``term`` witnesses ``expected`` under ``ctx``.

    Definitions unfold transparently during comparison; opaque entries
    contribute their statements only and their proofs are never inspected.
    Raises TypeCheckError / FormulaError on failure.
    """
    seen = set()
    for name, formula in ctx:
        if name in seen:
            raise TypeCheckError(f"duplicate hypothesis name {name}")
        seen.add(name)
        wf_formula(env, formula)
    wf_formula(env, expected)
    check(env, ctx, term, expected)


# ---------------------------------------------------------------------------
# Environment extension (the asynchronous admission discipline): statements
# are checked on entry, opaque proof evidence is not.

def _require_fresh(env: Environment, name: str) -> None:
    if name in env:
        raise EnvironmentError_(f"duplicate name {name}")


def env_add_definition(env: Environment, name: str, params: Iterable[str],
                       body: Formula) -> Environment:
    _require_fresh(env, name)
    params = tuple(params)
    if len(set(params)) != len(params):
        raise EnvironmentError_(f"duplicate parameter in definition {name}")
    # Parameters are opaque while checking the body: hide any same-named
    # outer definitions by checking the body with parameters as free atoms.
    shadow = Environment(tuple(e for e in env.entries if e.name not in params))
    try:
        wf_formula(shadow, body)
    except FormulaError as exc:
        raise EnvironmentError_(f"ill-formed body for {name}: {exc}") from exc
    return env.extended(Definition(name, params, body))


def env_add_axiom(env: Environment, name: str, statement: Formula) -> Environment:
    _require_fresh(env, name)
    try:
        wf_formula(env, statement)
    except FormulaError as exc:
        raise EnvironmentError_(f"ill-formed statement for {name}: {exc}") from exc
    return env.extended(Axiom(name, statement))


def env_add_opaque(env: Environment, name: str, statement: Formula,
                   promise: Union[ProofPromise, PromiseCell]) -> Environment:
    """Admit a theorem whose proof may still be pending; never inspects it."""
    _require_fresh(env, name)
    try:
        wf_formula(env, statement)
    except FormulaError as exc:
        raise EnvironmentError_(f"ill-formed statement for {name}: {exc}") from exc
    cell = promise if isinstance(promise, PromiseCell) else PromiseCell(promise)
    if cell.current.statement != statement:
        raise EnvironmentError_(
            f"promise for {name} proves a different statement")
    return env.extended(Opaque(name, statement, cell))


def check_awf(env: Environment) -> None:
    """Re-derive admissibility of a whole environment from scratch."""
    rebuilt = EMPTY_ENV
    for entry in env.entries:
        if isinstance(entry, Definition):
            rebuilt = env_add_definition(rebuilt, entry.name, entry.params, entry.body)
        elif isinstance(entry, Axiom):
            rebuilt = env_add_axiom(rebuilt, entry.name, entry.statement)
        elif isinstance(entry, Opaque):
            rebuilt = env_add_opaque(rebuilt, entry.name, entry.statement, entry.cell)
        else:
            raise EnvironmentError_(f"unknown entry: {entry!r}")


def check_swf(env: Environment) -> list[tuple[str, ErrorReport]]:
    """Force every pending proof and check each term in its prefix environment.

    Failures are collected per entry, never short-circuited.  An empty list
    means the environment is fully checked.
    """
    failures: list[tuple[str, ErrorReport]] = []
    for i, entry in enumerate(env.entries):
        if not isinstance(entry, Opaque):
            continue
        prefix = env.prefix(i)
        try:
            term = entry.cell.current.force()
        except PromiseError as exc:
            failures.append((entry.name, exc.report))
            continue
        try:
            typecheck(prefix, [], term, entry.statement)
        except KernelError as exc:
            failures.append((entry.name, ErrorReport(str(exc))))
    return failures
