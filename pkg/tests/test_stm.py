"""Transaction machine tests: DAG construction, lazy state computation,
promise lifecycle, incremental edits, perspective scheduling."""

from __future__ import annotations

import dataclasses

import pytest

from fixtures import (DEC_FALSE, DEC_FALSE_WITNESS, BASIC_DOC, HINTED_DOC, HINTED_DOC_FOLLOWUP)
from oracles import env_fingerprint, sequential_eval
from sprover import engine, kernel, stm, vernac, wire
from sprover.stm import (CancelSwitch, PureComputation, Session,
                         StateFailure, analyze, build_dag)


class FeedbackLog:
    """Thread-safe capture of session feedback for assertions."""

    def __init__(self):
        self.events: list[tuple[int, int, str, dict]] = []

    def __call__(self, span_id, revision, kind, payload):
        self.events.append((span_id, revision, kind, payload))

    def statuses(self, span_id):
        return [p["status"] for s, _, k, p in self.events
                if s == span_id and k == "status"]

    def terminal(self, span_id):
        for status in reversed(self.statuses(span_id)):
            if status in ("processed", "failed"):
                return status
        return None


class FakeQueue:
    """Records enqueues without dispatching (scheduling assertions)."""

    worker_count = 1

    def __init__(self):
        self.tasks = []

    def enqueue(self, task, cancel=None):
        self.tasks.append(task)

    def run_par_batch(self, state, subtasks):
        raise AssertionError("not used in these tests")


def session_for(text, queue=None, feedback=None):
    session = Session(queue=queue, feedback=feedback)
    session.load(text)
    return session


def force_everything(session):
    """Compute the whole master line, then force every promise inline."""
    session.observe(set())
    env = session.final_environment()
    return env, kernel.check_swf(env)


class TestBuildDag:
    def test_running_example_golden_structure(self):
        dag = build_dag(analyze(BASIC_DOC))
        assert len(dag.nodes) == 7
        assert sorted(dag.nodes) == list(range(7))
        labeled = dag.labeled_edges
        assert len(labeled) == 6
        assert dag.unlabeled == [(6, 5)]
        # master path: Definition, Theorem, Qed over nodes 0-1-2-6
        assert dag.master_nodes == [0, 1, 2, 6]
        master_cmds = [type(dag.in_edge[n].transaction.label).__name__
                       for n in dag.master_nodes[1:]]
        assert master_cmds == ["DefinitionCmd", "TheoremCmd", "QedCmd"]
        # proof branch: 2 -> 3 -> 4 -> 5
        branch = dag.proof_branches[0]
        assert branch.root == 2 and branch.tip == 5 and branch.qed_node == 6
        assert [t.src for t in (dag.in_edge[3], dag.in_edge[4], dag.in_edge[5])] \
            == [2, 3, 4]

    def test_empty_document(self):
        dag = build_dag([])
        assert dag.nodes == {0}
        assert dag.master_tip == 0
        assert dag.labeled_edges == []

    def test_twin_duplication(self):
        dag = build_dag(analyze(HINTED_DOC))
        hint_edges = [e for e in dag.labeled_edges
                      if isinstance(e.transaction.label, vernac.HintCmd)]
        assert len(hint_edges) == 2
        twins = [e for e in hint_edges if e.transaction.twin_of is not None]
        originals = [e for e in hint_edges if e.transaction.twin_of is None]
        assert len(twins) == 1 and len(originals) == 1
        assert originals[0].transaction.in_branch
        # the merge edge leaves the twin's node
        twin_node = twins[0].dst
        qed = dag.proof_branches[0].qed_node
        assert dag.in_edge[qed].src == twin_node

    def test_merge_without_open_branch(self):
        dag = build_dag(analyze("Check True. Qed. Check False."))
        qed_span = analyze("Check True. Qed. Check False.")[1].span
        assert qed_span.id in dag.span_errors
        assert dag.master_tip == 0  # master untouched by the bad merge
        assert len(dag.queries) == 2  # later spans still processed

    def test_nested_theorem_fails_without_aborting(self):
        text = ("Theorem a : True. Theorem b : True. exact tt. Qed. "
                "Check True.")
        parsed = analyze(text)
        dag = build_dag(parsed)
        assert parsed[1].span.id in dag.span_errors
        assert dag.proof_branches and dag.proof_branches[0].name == "a"
        assert len(dag.queries) == 1

    def test_tactic_outside_proof_fails(self):
        parsed = analyze("auto. Check True.")
        dag = build_dag(parsed)
        assert parsed[0].span.id in dag.span_errors
        assert dag.queries

    def test_queries_never_create_nodes(self):
        dag = build_dag(analyze("Check True. Print x. Check False."))
        assert dag.nodes == {0}
        assert [q.at_node for q in dag.queries] == [0, 0, 0]

    def test_acyclic_single_labeled_path(self):
        dag = build_dag(analyze(HINTED_DOC_FOLLOWUP))
        for node in dag.nodes:
            if node:
                dag.path_to(node)  # raises if disconnected; unique by in_edge


class TestComputeState:
    def test_exactly_three_transactions_for_final_state(self):
        session = session_for(BASIC_DOC)
        target = session.dag.master_tip
        session.compute_state(target)
        assert session.executed_transactions == 3

    def test_initial_state_costs_nothing(self):
        session = session_for(BASIC_DOC)
        session.compute_state(0)
        assert session.executed_transactions == 0

    def test_memoization(self):
        session = session_for(BASIC_DOC)
        session.compute_state(session.dag.master_tip)
        session.compute_state(session.dag.master_tip)
        session.compute_state(2)
        assert session.executed_transactions == 3

    def test_qed_installs_pending_entry_without_running_proof(self):
        session = session_for(BASIC_DOC)
        state = session.compute_state(session.dag.master_tip)
        entry = state.environment.lookup("dec_False")
        assert isinstance(entry, kernel.Opaque)
        assert entry.cell.current.status == kernel.DELEGATED
        # only the master transactions ran
        assert session.executed_transactions == 3

    def test_branch_states_on_demand(self):
        session = session_for(BASIC_DOC)
        branch = session.dag.proof_branches[0]
        node_after_unfold = branch.span_ids[2]  # the unfold span
        node = session.dag.node_of_span[node_after_unfold]
        state = session.compute_state(node)
        assert state.open_proof is not None
        assert state.open_proof.goals[0].conclusion == \
            kernel.Disj(kernel.FALSITY, kernel.Impl(kernel.FALSITY,
                                                    kernel.FALSITY))

    def test_master_hint_twin_applies_globally(self):
        session = session_for(HINTED_DOC)
        state = session.compute_state(session.dag.master_tip)
        assert "decidable" in state.hints.unfold
        assert state.open_proof is None

    def test_failing_master_transaction_marks_descendants(self):
        text = "Definition d := True. Definition d := False. Axiom a : True."
        session = session_for(text)
        parsed = session.parsed
        ok = session.observe(set())
        assert ok
        assert any(parsed[1].span.id == r.span_id
                   for r in session.failed.values())
        with pytest.raises(StateFailure):
            session.compute_state(session.dag.master_tip)


class TestForcing:
    def test_running_example_promise(self):
        session = session_for(BASIC_DOC)
        env, failures = force_everything(session)
        assert failures == []
        entry = env.lookup("dec_False")
        assert entry.cell.current.status == kernel.FINISHED
        assert entry.cell.current.term == DEC_FALSE_WITNESS

    def test_failing_branch_is_compartmentalized(self):
        text = BASIC_DOC.replace("auto.", "fail.")
        session = session_for(text)
        session.observe(set())
        # master fully computed despite the broken proof
        assert session.final_environment().lookup("dec_False") is not None
        failures = kernel.check_swf(session.final_environment())
        assert [n for n, _ in failures] == ["dec_False"]
        fail_span = next(p.span for p in session.parsed if "fail." in p.span.text)
        assert failures[0][1].span_id == fail_span.id

    def test_cancel_before_run(self):
        session = session_for(BASIC_DOC)
        session.observe(set())
        branch = session.dag.proof_branches[0]
        branch.cancel.set()
        env = session.final_environment()
        failures = kernel.check_swf(env)
        assert failures and failures[0][1].kind == "cancelled"
        assert session.executed_transactions == 3  # nothing ran

    def test_open_goals_at_merge(self):
        text = "Theorem t : True -> True. Proof. intro h. Qed."
        session = session_for(text)
        env, failures = force_everything(session)
        assert [n for n, _ in failures] == ["t"]
        assert "open goal" in failures[0][1].message

    def test_future_force_direct(self):
        session = session_for(BASIC_DOC)
        session.observe(set())
        branch = session.dag.proof_branches[0]
        comp = PureComputation(base=branch.root, program=tuple(branch.program),
                               produces=branch.statement, name=branch.name,
                               cancel=CancelSwitch())
        term = session.future_force(comp)
        assert term == DEC_FALSE_WITNESS


class TestDuplicationSemantics:
    def test_twin_carries_effect_to_later_proofs(self):
        session = session_for(HINTED_DOC_FOLLOWUP)
        env, failures = force_everything(session)
        assert failures == []
        assert env.lookup("dec_False_again").cell.current.term is not None

    def test_without_twin_later_proof_fails(self):
        session = session_for(HINTED_DOC_FOLLOWUP)
        dag = session.dag
        twin_edge = next(e for e in dag.labeled_edges
                         if e.transaction.twin_of is not None)
        successor = next(e for e in dag.labeled_edges
                         if e.src == twin_edge.dst)
        # splice the twin out of the master line
        dag.in_edge[successor.dst] = dataclasses.replace(
            successor, src=twin_edge.src)
        dag.nodes.discard(twin_edge.dst)
        del dag.in_edge[twin_edge.dst]
        dag.master_nodes.remove(twin_edge.dst)
        session._registry.clear()
        session._by_statement.clear()
        session._adoption.clear()
        session._reset_states()
        env, failures = force_everything(session)
        assert [n for n, _ in failures] == ["dec_False_again"]

    def test_branch_side_hint_stays_local_to_branch(self):
        # Drop the twin but keep the branch copy: the first proof still
        # closes (local effect), while the follow-up fails.
        self.test_without_twin_later_proof_fails()


class TestAsyncSyncEquivalence:
    def test_running_examples(self):
        for text in (BASIC_DOC, HINTED_DOC, HINTED_DOC_FOLLOWUP):
            session = session_for(text)
            env, failures = force_everything(session)
            assert failures == []
            seq = sequential_eval(text)
            assert seq.errors == []
            assert env_fingerprint(env) == seq.entries

    def test_memoization_soundness(self):
        session = session_for(HINTED_DOC_FOLLOWUP)
        env1, _ = force_everything(session)
        fresh = session_for(HINTED_DOC_FOLLOWUP)
        env2, _ = force_everything(fresh)
        assert env_fingerprint(env1) == env_fingerprint(env2)


class TestUpdateDocument:
    def test_identical_text_invalidates_nothing(self):
        session = session_for(BASIC_DOC)
        force_everything(session)
        result = session.update(BASIC_DOC)
        assert result.invalidated == set()
        session.observe(set())
        assert kernel.check_swf(session.final_environment()) == []

    def test_edit_inside_proof_recomputes_only_that_branch(self):
        session = session_for(BASIC_DOC)
        env, failures = force_everything(session)
        assert failures == []
        before = session.executed_transactions
        edited = BASIC_DOC.replace("auto.", "auto 6.")
        result = session.update(edited)
        branch = session.dag.proof_branches[0]
        session.observe(set())
        env, failures = force_everything(session)
        assert failures == []
        delta = session.executed_transactions - before
        # one merge re-execution plus the branch program (Proof, unfold, auto)
        assert delta == 1 + len(branch.program)
        assert env.lookup("dec_False").cell.current.term == DEC_FALSE_WITNESS

    def test_statement_edit_invalidates_downstream(self):
        text = (BASIC_DOC + "\nAxiom later : True.\n"
                "Theorem t2 : True. Proof. exact tt. Qed.\n")
        session = session_for(text)
        _, failures = force_everything(session)
        assert failures == []
        before = session.executed_transactions
        edited = text.replace("Theorem dec_False : decidable False.",
                              "Theorem dec_False : False -> decidable False.")
        session.update(edited)
        _, failures = force_everything(session)
        assert failures == []
        delta = session.executed_transactions - before
        # re-executed masters: theorem, its qed, the axiom, theorem t2, qed t2;
        # re-forced branches: the edited one (3 transactions) and t2's (2),
        # whose base state changed upstream
        assert delta == 5 + 3 + 2

    def test_unchanged_promises_survive_a_move(self):
        text = BASIC_DOC + "\nCheck True.\n"
        session = session_for(BASIC_DOC)
        env1, _ = force_everything(session)
        promise_before = env1.lookup("dec_False").cell.current
        result = session.update("Check False.\n\n" + BASIC_DOC)
        session.observe(set())
        env2 = session.final_environment()
        assert env2.lookup("dec_False").cell.current is promise_before
        assert promise_before.status == kernel.FINISHED

    def test_proof_edit_swaps_promise_in_place(self):
        session = session_for(BASIC_DOC)
        env1, _ = force_everything(session)
        cell_before = env1.lookup("dec_False").cell
        old_promise = cell_before.current
        session.update(BASIC_DOC.replace("auto.", "auto 6."))
        session.observe(set())
        env2 = session.final_environment()
        assert env2.lookup("dec_False").cell is cell_before
        assert cell_before.current is not old_promise

    def test_full_recomputation_equality_after_definition_change(self):
        text = BASIC_DOC
        edited = text.replace(":= P \\/ ~ P", ":= ~ P \\/ P")
        session = session_for(text)
        force_everything(session)
        session.update(edited)
        env, failures = force_everything(session)
        fresh = session_for(edited)
        fresh_env, fresh_failures = force_everything(fresh)
        assert [n for n, _ in failures] == [n for n, _ in fresh_failures]
        assert env_fingerprint(env) == env_fingerprint(fresh_env)

    def test_obsolete_computation_cancelled_on_edit(self):
        session = session_for(BASIC_DOC)
        session.observe(set())
        branch = session.dag.proof_branches[0]
        old_switch = branch.cancel
        assert not old_switch.is_set()
        session.update(BASIC_DOC.replace("auto.", "fail."))
        assert old_switch.is_set()


class TestObserve:
    def test_priorities_follow_perspective_distance(self):
        text = "".join(
            f"Theorem t{i} : True -> True. Proof. intro h. assumption. Qed.\n"
            for i in range(5))
        queue = FakeQueue()
        session = Session(queue=queue)
        session.load(text)
        last_span = session.parsed[-1].span.id
        session.observe({last_span})
        names = [t.entry_name for t in queue.tasks]
        priorities = [t.priority for t in queue.tasks]
        assert names == [f"t{i}" for i in range(5)]  # enqueue in doc order
        assert priorities == sorted(priorities)  # closer to the end = higher
        assert priorities[-1] == 0

    def test_empty_perspective_document_order(self):
        text = "".join(
            f"Theorem t{i} : True -> True. Proof. intro h. assumption. Qed.\n"
            for i in range(4))
        queue = FakeQueue()
        session = Session(queue=queue)
        session.load(text)
        session.observe(set())
        assert [t.priority for t in queue.tasks] == [0, 0, 0, 0]
        assert [t.entry_name for t in queue.tasks] == ["t0", "t1", "t2", "t3"]

    def test_perspective_inside_branch_computes_goals(self):
        log = FeedbackLog()
        session = Session(feedback=log)
        session.load(BASIC_DOC)
        unfold_span = next(p.span.id for p in session.parsed
                           if "unfold" in p.span.text)
        session.observe({unfold_span})
        goals = [p for s, _, k, p in log.events if k == "goals"
                 and s == unfold_span]
        assert goals and "False \\/ (False -> False)" in goals[0]["text"]
        # oracle: the synchronous engine run to the same point
        env = kernel.env_add_definition(
            kernel.EMPTY_ENV, "decidable", ("P",),
            kernel.Disj(kernel.Atom("P"),
                        kernel.Impl(kernel.Atom("P"), kernel.FALSITY)))
        ps = engine.start_proof(env, DEC_FALSE)
        ps = engine.apply_tactic(env, ps, engine.Unfold(("decidable", "not")))
        assert vernac.format_goal(ps.goals[0]) in goals[0]["text"]

    def test_status_feedback_for_clean_document(self):
        log = FeedbackLog()
        session = Session(feedback=log)
        session.load(BASIC_DOC)
        session.observe(set())
        kernel.check_swf(session.final_environment())
        for p in session.parsed:
            assert log.terminal(p.span.id) == "processed", p.span.text

    def test_failed_proof_attribution_in_feedback(self):
        log = FeedbackLog()
        text = BASIC_DOC.replace("auto.", "fail.")
        session = Session(feedback=log)
        session.load(text)
        session.observe(set())
        kernel.check_swf(session.final_environment())
        statement_span = session.parsed[1].span.id
        fail_span = next(p.span.id for p in session.parsed
                         if "fail." in p.span.text)
        assert log.terminal(statement_span) == "processed"
        assert log.terminal(fail_span) == "failed"
        # red on the offending span only: the steps that ran are fine
        for p in session.parsed:
            if p.span.id != fail_span:
                assert log.terminal(p.span.id) == "processed", p.span.text

    def test_open_goals_blame_the_last_proof_step(self):
        log = FeedbackLog()
        text = "Theorem t : True -> True. Proof. intro h. Qed."
        session = Session(feedback=log)
        session.load(text)
        session.observe(set())
        kernel.check_swf(session.final_environment())
        intro_span = next(p.span.id for p in session.parsed
                          if "intro" in p.span.text)
        assert log.terminal(intro_span) == "failed"
        assert log.terminal(session.parsed[0].span.id) == "processed"

    def test_bodyless_proof_failure_lands_on_the_merge(self):
        log = FeedbackLog()
        text = "Theorem t : True. Qed."
        session = Session(feedback=log)
        session.load(text)
        session.observe(set())
        kernel.check_swf(session.final_environment())
        qed_span = session.parsed[-1].span.id
        assert log.terminal(qed_span) == "failed"


class TestSessionParDelegation:
    def test_branch_walk_dispatches_goal_subtasks(self):
        from sprover.taskqueue import TaskQueue
        text = ("Theorem both : (A -> A) /\\ (B -> B). "
                "Proof. split. par: auto. Qed.")
        with TaskQueue(1) as pool:
            session = Session(queue=pool)
            session.load(text)
            par_span = next(p.span.id for p in session.parsed
                            if "par:" in p.span.text)
            # looking at the par span forces its branch prefix through the
            # session, which ships one subtask per goal to the pool
            session.observe({par_span})
            par_dispatches = [e for e in pool.events
                              if e["event"] == "dispatch" and e["kind"] == "par"]
            assert len(par_dispatches) == 2
            pool.drain()
            env = session.final_environment()
            assert kernel.check_swf(env) == []
        # the delegated route built the same term as the sequential one
        inline = Session()
        inline.load(text)
        inline.observe(set())
        assert kernel.check_swf(inline.final_environment()) == []
        assert (env.lookup("both").cell.current.term
                == inline.final_environment().lookup("both").cell.current.term)


class TestExtrusion:
    def test_marshaled_state_loses_key_validity(self):
        session = session_for(BASIC_DOC)
        state = session.compute_state(session.dag.master_tip)
        entry = state.environment.lookup("dec_False")
        key = entry.cell.current.handle
        assert state.extruded.get(key) is not None  # live in-session
        copied = wire.from_bytes(wire.canon_bytes(state))
        assert copied.extruded.get(key) is None     # dead across the boundary
        assert isinstance(copied, stm.SystemState)

    def test_pruned_owner_drops_entries(self):
        session = session_for(BASIC_DOC)
        session.compute_state(session.dag.master_tip)
        assert len(session.side) == 1
        session.update("Check True.")
        assert len(session.side) == 0

    def test_unlabeled_edges_never_executed(self):
        session = session_for(BASIC_DOC)
        session.observe(set())
        kernel.check_swf(session.final_environment())
        qed_span = session.parsed[-1].span.id
        # the qed transaction ran once; following the unlabeled edge would
        # have run it (or the branch tip) again
        assert session.execution_log.count(qed_span) == 1
