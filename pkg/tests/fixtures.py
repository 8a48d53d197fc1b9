"""Shared documents and kernel values used across the test suite."""

from __future__ import annotations

from sprover.kernel import (Atom, Disj, FALSITY, Impl, DefApp,
                            Lam, Var, Inr)

# The running example: a decidability definition, then a theorem whose proof
# unfolds it and closes with bounded search.
BASIC_DOC = """\
(* global *)    Definition decidable (P : Prop) := P \\/ ~ P.

(* branch *)    Theorem dec_False : decidable False.
(* tactic *)    Proof.
(* tactic *)     unfold decidable, not.
(* tactic *)     auto.
(* merge *)    Qed.
"""

# Same document, except the unfolding happens through a hint declared inside
# the proof; the hint is a global command and must keep its effect after Qed.
HINTED_DOC = """\
(* global *)    Definition decidable (P : Prop) := P \\/ ~ P.

(* branch *)    Theorem dec_False : decidable False.
(* tactic *)    Proof.
(* global *)     Hint Unfold decidable.
(* tactic *)     auto.
(* merge *)    Qed.
"""

# HINTED_DOC extended with a second, identical goal proved by bare auto: it only
# closes because the in-proof hint also landed on the master line.
HINTED_DOC_FOLLOWUP = HINTED_DOC + """\

Theorem dec_False_again : decidable False.
Proof.
auto.
Qed.
"""

DECIDABLE_BODY = Disj(Atom("P"), Impl(Atom("P"), FALSITY))
DEC_FALSE = DefApp("decidable", (FALSITY,))
DEC_FALSE_UNFOLDED = Disj(FALSITY, Impl(FALSITY, FALSITY))

# The witness the BASIC_DOC script constructs (intro names are h0, h1, ...).
DEC_FALSE_WITNESS = Inr(Lam("h0", FALSITY, Var("h0")), FALSITY)
