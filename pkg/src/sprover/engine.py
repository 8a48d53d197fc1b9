"""Untrusted tactic interpreter: goals, proof states, bounded search.

The interpreter builds candidate proof terms; it is never trusted.  Whatever
it produces is re-checked by the kernel when the proof is closed.  All
operations are pure: a tactic application returns a fresh proof state and
identical inputs give identical outputs on any host.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Union

from . import kernel
from .kernel import (
    Atom, Conj, Disj, Formula, Impl, DefApp,
    Term, Var, Lam, App, Pair, Inl, Inr, TT_TERM,
    Environment, Definition, Axiom, Opaque, delta_eq, whnf,
)


class TacticError(Exception):
    """Tactic not applicable to the current goal."""


# ---------------------------------------------------------------------------
# Tactic language

@dataclass(frozen=True)
class Intro:
    name: Optional[str] = None


@dataclass(frozen=True)
class Intros:
    pass


@dataclass(frozen=True)
class Apply:
    name: str


@dataclass(frozen=True)
class Exact:
    name: str


@dataclass(frozen=True)
class Split:
    pass


@dataclass(frozen=True)
class Left:
    pass


@dataclass(frozen=True)
class Right:
    pass


@dataclass(frozen=True)
class Assumption:
    pass


@dataclass(frozen=True)
class Unfold:
    names: tuple[str, ...]


@dataclass(frozen=True)
class Auto:
    depth: Optional[int] = None


@dataclass(frozen=True)
class Idtac:
    pass


@dataclass(frozen=True)
class Fail:
    pass


@dataclass(frozen=True)
class ProofMarker:
    pass


@dataclass(frozen=True)
class Par:
    inner: "TacticAst"


TacticAst = Union[Intro, Intros, Apply, Exact, Split, Left, Right, Assumption,
                  Unfold, Auto, Idtac, Fail, ProofMarker, Par]

AUTO_DEFAULT_DEPTH = 5


# ---------------------------------------------------------------------------
# Goals and proof states

@dataclass(frozen=True)
class Goal:
    hypotheses: tuple[tuple[str, Formula], ...]
    conclusion: Formula


@dataclass(frozen=True)
class HintDb:
    resolve: tuple[str, ...] = ()
    unfold: tuple[str, ...] = ()

    def with_resolve(self, names) -> "HintDb":
        return HintDb(self.resolve + tuple(names), self.unfold)

    def with_unfold(self, names) -> "HintDb":
        return HintDb(self.resolve, self.unfold + tuple(names))


EMPTY_HINTS = HintDb()


@dataclass(frozen=True)
class Hole:
    """Placeholder inside a partial proof term, one per open goal."""
    id: int


@dataclass(frozen=True)
class ProofState:
    statement: Formula
    goals: tuple[Goal, ...]
    holes: tuple[int, ...]  # hole ids, parallel to goals
    partial: Term
    next_hole: int
    hint_db: HintDb

    @property
    def open_goal_count(self) -> int:
        return len(self.goals)


def fill_hole(term, hole_id: int, replacement) -> Term:
    if isinstance(term, Hole):
        return replacement if term.id == hole_id else term
    if isinstance(term, Lam):
        return Lam(term.name, term.ty, fill_hole(term.body, hole_id, replacement))
    if isinstance(term, App):
        return App(fill_hole(term.fn, hole_id, replacement),
                   fill_hole(term.arg, hole_id, replacement))
    if isinstance(term, Pair):
        return Pair(fill_hole(term.fst, hole_id, replacement),
                    fill_hole(term.snd, hole_id, replacement))
    if isinstance(term, kernel.Fst):
        return kernel.Fst(fill_hole(term.of, hole_id, replacement))
    if isinstance(term, kernel.Snd):
        return kernel.Snd(fill_hole(term.of, hole_id, replacement))
    if isinstance(term, Inl):
        return Inl(fill_hole(term.of, hole_id, replacement), term.right)
    if isinstance(term, Inr):
        return Inr(fill_hole(term.of, hole_id, replacement), term.left)
    if isinstance(term, kernel.Case):
        return kernel.Case(fill_hole(term.scrut, hole_id, replacement),
                           term.lname, fill_hole(term.lbody, hole_id, replacement),
                           term.rname, fill_hole(term.rbody, hole_id, replacement))
    if isinstance(term, kernel.Exfalso):
        return kernel.Exfalso(fill_hole(term.of, hole_id, replacement), term.goal)
    return term


def start_proof(env: Environment, statement: Formula,
                hints: HintDb = EMPTY_HINTS) -> ProofState:
    """Open a proof: one goal with no hypotheses, one hole."""
    kernel.wf_formula(env, statement)
    return ProofState(statement=statement,
                      goals=(Goal((), statement),),
                      holes=(0,),
                      partial=Hole(0),
                      next_hole=1,
                      hint_db=hints)


def _fresh_name(taken, requested: Optional[str]) -> str:
    if requested is not None:
        if requested in taken:
            raise TacticError(f"hypothesis name {requested} already used")
        return requested
    i = 0
    while f"h{i}" in taken:
        i += 1
    return f"h{i}"


def _resolve_proof_name(env: Environment, goal: Goal, name: str):
    """Name -> (term, formula) amongst hypotheses, then axioms/theorems.

    ``tt`` is the built-in witness of True.
    """
    for hyp_name, hyp_formula in goal.hypotheses:
        if hyp_name == name:
            return Var(name), hyp_formula
    entry = env.lookup(name)
    if isinstance(entry, (Axiom, Opaque)):
        return Var(name), entry.statement
    if name == "tt":
        return TT_TERM, kernel.TRUTH
    if isinstance(entry, Definition):
        raise TacticError(f"{name} is a definition, not a proof")
    raise TacticError(f"unknown name {name}")


def _unfold_named(env: Environment, formula: Formula, names) -> Formula:
    """Expand occurrences of the named definitions, recursively.

    Names that do not resolve to a definition are skipped: negation sugar is
    already eliminated by the parser, so scripts saying ``unfold not`` must
    stay valid even though no such definition exists.
    """
    names = set(names)

    def go(f: Formula) -> Formula:
        if isinstance(f, DefApp) and f.name in names:
            entry = env.lookup(f.name)
            if isinstance(entry, Definition):
                return go(kernel.subst_atoms(entry.body,
                                             dict(zip(entry.params, f.args))))
        if isinstance(f, Atom) and f.name in names:
            entry = env.lookup(f.name)
            if isinstance(entry, Definition) and not entry.params:
                return go(entry.body)
        if isinstance(f, Impl):
            return Impl(go(f.lhs), go(f.rhs))
        if isinstance(f, Conj):
            return Conj(go(f.lhs), go(f.rhs))
        if isinstance(f, Disj):
            return Disj(go(f.lhs), go(f.rhs))
        if isinstance(f, DefApp):
            return DefApp(f.name, tuple(go(a) for a in f.args))
        return f

    return go(formula)


def _peel_apply(env: Environment, formula: Formula, conclusion: Formula):
    """Backward-chain: premises to prove so that ``formula`` yields the goal.

    Returns the list of premises, or None when the head never matches.
    """
    premises: list[Formula] = []
    current = formula
    while True:
        if delta_eq(env, current, conclusion):
            return premises
        current = whnf(env, current)
        if isinstance(current, Impl):
            premises.append(current.lhs)
            current = current.rhs
            continue
        return None


def _replace_first_goal(ps: ProofState, new_goals, hole_terms) -> ProofState:
    """Substitute the first goal by ``new_goals``; ``hole_terms`` builds the
    filling for the first hole given the freshly allocated hole ids."""
    first_hole = ps.holes[0]
    fresh = tuple(range(ps.next_hole, ps.next_hole + len(new_goals)))
    replacement = hole_terms([Hole(h) for h in fresh])
    return replace(
        ps,
        goals=tuple(new_goals) + ps.goals[1:],
        holes=fresh + ps.holes[1:],
        partial=fill_hole(ps.partial, first_hole, replacement),
        next_hole=ps.next_hole + len(new_goals),
    )


def _close_first_goal(ps: ProofState, witness: Term) -> ProofState:
    return _replace_first_goal(ps, (), lambda _: witness)


def apply_tactic(env: Environment, ps: ProofState, tactic: TacticAst) -> ProofState:
    """Run one tactic on the first goal (Par acts on all goals)."""
    if isinstance(tactic, (Idtac, ProofMarker)):
        return ps
    if isinstance(tactic, Fail):
        raise TacticError("fail")
    if isinstance(tactic, Par):
        return _apply_par(env, ps, tactic.inner)
    if isinstance(tactic, Intros):
        while ps.goals and isinstance(ps.goals[0].conclusion, Impl):
            ps = apply_tactic(env, ps, Intro())
        return ps
    if not ps.goals:
        raise TacticError("no goals left")
    goal = ps.goals[0]

    if isinstance(tactic, Intro):
        conclusion = goal.conclusion
        if not isinstance(conclusion, Impl):
            raise TacticError("intro: goal is not an implication")
        taken = {n for n, _ in goal.hypotheses}
        name = _fresh_name(taken, tactic.name)
        sub = Goal(goal.hypotheses + ((name, conclusion.lhs),), conclusion.rhs)
        return _replace_first_goal(
            ps, (sub,), lambda hs: Lam(name, conclusion.lhs, hs[0]))
    if isinstance(tactic, Split):
        if not isinstance(goal.conclusion, Conj):
            raise TacticError("split: goal is not a conjunction")
        lhs, rhs = goal.conclusion.lhs, goal.conclusion.rhs
        subs = (Goal(goal.hypotheses, lhs), Goal(goal.hypotheses, rhs))
        return _replace_first_goal(ps, subs, lambda hs: Pair(hs[0], hs[1]))
    if isinstance(tactic, Left):
        if not isinstance(goal.conclusion, Disj):
            raise TacticError("left: goal is not a disjunction")
        sub = Goal(goal.hypotheses, goal.conclusion.lhs)
        other = goal.conclusion.rhs
        return _replace_first_goal(ps, (sub,), lambda hs: Inl(hs[0], other))
    if isinstance(tactic, Right):
        if not isinstance(goal.conclusion, Disj):
            raise TacticError("right: goal is not a disjunction")
        sub = Goal(goal.hypotheses, goal.conclusion.rhs)
        other = goal.conclusion.lhs
        return _replace_first_goal(ps, (sub,), lambda hs: Inr(hs[0], other))
    if isinstance(tactic, Assumption):
        for name, formula in goal.hypotheses:
            if delta_eq(env, formula, goal.conclusion):
                return _close_first_goal(ps, Var(name))
        raise TacticError("assumption: no matching hypothesis")
    if isinstance(tactic, Exact):
        term, formula = _resolve_proof_name(env, goal, tactic.name)
        if not delta_eq(env, formula, goal.conclusion):
            raise TacticError(f"exact {tactic.name}: statement does not match goal")
        return _close_first_goal(ps, term)
    if isinstance(tactic, Apply):
        term, formula = _resolve_proof_name(env, goal, tactic.name)
        premises = _peel_apply(env, formula, goal.conclusion)
        if premises is None:
            raise TacticError(f"apply {tactic.name}: conclusion does not match goal")
        subs = tuple(Goal(goal.hypotheses, p) for p in premises)

        def build(hs, head=term):
            for h in hs:
                head = App(head, h)
            return head

        return _replace_first_goal(ps, subs, build)
    if isinstance(tactic, Unfold):
        new_conclusion = _unfold_named(env, goal.conclusion, tactic.names)
        sub = Goal(goal.hypotheses, new_conclusion)
        return _replace_first_goal(ps, (sub,), lambda hs: hs[0])
    if isinstance(tactic, Auto):
        depth = AUTO_DEFAULT_DEPTH if tactic.depth is None else tactic.depth
        witness = auto_search(env, ps.hint_db, goal, depth)
        if witness is None:
            raise TacticError("auto: no proof found")
        return _close_first_goal(ps, witness)
    raise TacticError(f"unknown tactic {tactic!r}")


# ---------------------------------------------------------------------------
# Bounded backward search

def auto_search(env: Environment, hintdb: HintDb, goal: Goal,
                depth: int) -> Optional[Term]:
    """Depth-bounded backward search for a witness of ``goal``.

    Rule order at each node: assumption, intro, split, left, right, apply
    (hypotheses first, then resolve hints, in declaration order).  The goal
    conclusion is unfolded through the unfold hints at each node.  Returns
    None when the budget is exhausted; the caller decides how to report it.
    """
    if depth < 0:
        raise ValueError("auto depth must be >= 0")

    def search(hyps: tuple[tuple[str, Formula], ...], conclusion: Formula,
               budget: int) -> Optional[Term]:
        conclusion = _unfold_named(env, conclusion, hintdb.unfold)
        for name, formula in hyps:
            if delta_eq(env, formula, conclusion):
                return Var(name)
        if budget <= 0:
            return None
        if isinstance(conclusion, Impl):
            name = _fresh_name({n for n, _ in hyps}, None)
            body = search(hyps + ((name, conclusion.lhs),), conclusion.rhs,
                          budget - 1)
            if body is not None:
                return Lam(name, conclusion.lhs, body)
        if isinstance(conclusion, Conj):
            lhs = search(hyps, conclusion.lhs, budget - 1)
            if lhs is not None:
                rhs = search(hyps, conclusion.rhs, budget - 1)
                if rhs is not None:
                    return Pair(lhs, rhs)
        if isinstance(conclusion, Disj):
            lhs = search(hyps, conclusion.lhs, budget - 1)
            if lhs is not None:
                return Inl(lhs, conclusion.rhs)
            rhs = search(hyps, conclusion.rhs, budget - 1)
            if rhs is not None:
                return Inr(rhs, conclusion.lhs)
        candidates: list[tuple[Term, Formula]] = [
            (Var(name), formula) for name, formula in hyps]
        for hint in hintdb.resolve:
            entry = env.lookup(hint)
            if isinstance(entry, (Axiom, Opaque)):
                candidates.append((Var(hint), entry.statement))
            elif hint == "tt":
                candidates.append((TT_TERM, kernel.TRUTH))
        for head, formula in candidates:
            premises = _peel_apply(env, formula, conclusion)
            if premises is None:
                continue
            args = []
            for premise in premises:
                arg = search(hyps, premise, budget - 1)
                if arg is None:
                    break
                args.append(arg)
            else:
                term = head
                for arg in args:
                    term = App(term, arg)
                return term
        return None

    return search(goal.hypotheses, goal.conclusion, depth)


# ---------------------------------------------------------------------------
# Goal-parallel application

def par_split(env: Environment, ps: ProofState,
              tactic: TacticAst) -> list[tuple[Goal, TacticAst]]:
    """One independent closing subtask per open goal."""
    if isinstance(tactic, Par):
        raise TacticError("par: may not be nested")
    return [(goal, tactic) for goal in ps.goals]


def solve_goal(env: Environment, hints: HintDb, goal: Goal,
               tactic: TacticAst) -> Term:
    """Run ``tactic`` on a single goal; it must close it entirely."""
    sub = ProofState(statement=goal.conclusion, goals=(goal,), holes=(0,),
                     partial=Hole(0), next_hole=1, hint_db=hints)
    result = apply_tactic(env, sub, tactic)
    if result.goals:
        raise TacticError(
            f"goal not closed ({len(result.goals)} remaining)")
    return result.partial


def join_par(ps: ProofState, witnesses) -> ProofState:
    """Fill every hole with its subtask witness; closes the whole state."""
    witnesses = list(witnesses)
    if len(witnesses) != len(ps.goals):
        raise TacticError("par: wrong number of subtask results")
    partial = ps.partial
    for hole_id, witness in zip(ps.holes, witnesses):
        partial = fill_hole(partial, hole_id, witness)
    return replace(ps, goals=(), holes=(), partial=partial)


def _apply_par(env: Environment, ps: ProofState, inner: TacticAst) -> ProofState:
    witnesses = [solve_goal(env, ps.hint_db, goal, sub_tactic)
                 for goal, sub_tactic in par_split(env, ps, inner)]
    return join_par(ps, witnesses)


def finish_proof(ps: ProofState) -> Term:
    """Assemble the closed proof term; the caller must kernel-check it."""
    if ps.goals:
        raise TacticError(f"{len(ps.goals)} open goal(s)")
    return ps.partial
