"""
Unit tests for the reference interpreters, core lifting and the differential harnesses.
"""
import pytest

from cpc.frontend import parse
from cpc.lang import Assign, Call, Const, FunDecl, If, LetRec, Seq, Var
from cpc.semantics import (
    Closure, Done, InvariantViolation, OutOfFuel, Profile, SplitEnv, Stuck, VerdictKind,
    check_liftable_core, check_semantics, derivation, describe, diff_theorem1, diff_theorem2,
    diff_theorem3, eval_naive, eval_opt, eval_program, gen_term, lift_core,
    liftable_candidates, term_size,
)


def fn(name, params, body):
    return FunDecl(name, tuple(params), body)


def shared_parameter_term():
    """letrec g(x) = (letrec h() = x in h()) in g(1)"""
    h = fn("h", (), Var("x"))
    g = fn("g", ("x",), LetRec((h,), Call("h", ())))
    return LetRec((g,), Call("g", (Const(1),)))


def set_in_non_tail_position():
    """letrec g(rc) = (letrec set() = rc := 0 in set(); rc) in g(5)"""
    set_ = fn("set", (), Assign("rc", Const(0)))
    g = fn("g", ("rc",), LetRec((set_,), Seq((Call("set", ()), Var("rc")))))
    return LetRec((g,), Call("g", (Const(5),)))


@pytest.mark.unit
class TestNaiveRules:
    """Naive rules never reclaim locations."""

    def test_value_and_store(self):
        outcome = eval_naive(shared_parameter_term())
        assert isinstance(outcome, Done)
        assert outcome.value == 1
        assert list(outcome.store.values()) == [1]

    def test_lifted_term_allocates_a_copy(self):
        lifted = lift_core(shared_parameter_term(), "x", {"h"})
        outcome = eval_naive(lifted)
        assert outcome.value == 1
        assert len(outcome.store) == 2

    def test_assignment_through_inner_function(self):
        assert eval_naive(set_in_non_tail_position()).value == 0

    def test_unbound_variable_is_stuck(self):
        assert eval_naive(Var("y")) == Stuck("unbound variable y")

    def test_non_boolean_condition_is_stuck(self):
        outcome = eval_naive(If(Const(1), Const(2), Const(3)))
        assert isinstance(outcome, Stuck)
        assert "not a boolean" in outcome.reason

    def test_fuel(self):
        assert eval_naive(Seq((Const(1), Const(2))), fuel=1) == OutOfFuel("fuel")

    def test_unbounded_recursion_runs_out(self):
        loop = LetRec((fn("g", ("x",), Call("g", (Var("x"),))),), Call("g", (Const(1),)))
        outcome = eval_naive(loop, max_depth=200)
        assert outcome.kind == "out-of-fuel"


@pytest.mark.unit
class TestOptimisedRules:
    """Split environments keep the store minimal."""

    def test_store_is_empty_at_the_end(self):
        for t in (shared_parameter_term(), lift_core(shared_parameter_term(), "x", {"h"})):
            outcome = eval_opt(t)
            assert outcome == Done(1, {})

    def test_tail_locations_are_reclaimed(self):
        outcome = eval_opt(Const(9), SplitEnv(tail={"x": 1}), store={1: 7})
        assert outcome == Done(9, {})

    def test_rest_locations_survive(self):
        outcome = eval_opt(Var("x"), SplitEnv(rest={"x": 1}), store={1: 7})
        assert outcome == Done(7, {1: 7})

    def test_closure_capturing_its_parameter_is_rejected(self):
        bad = Closure(("x",), Var("x"), {"x": 1}, {}, "k")
        with pytest.raises(InvariantViolation, match="captures its parameters"):
            eval_opt(Const(1), funs={"k": bad}, store={1: 0})


@pytest.mark.unit
class TestCoreLifting:
    """Lifting on core terms and its applicability."""

    def test_lift_core_adds_parameter_and_argument(self):
        lifted = lift_core(shared_parameter_term(), "x", {"h"})
        g = lifted.funs[0]
        h = g.body.funs[0]
        assert h.params == ("x",)
        assert g.body.rest == Call("h", (Var("x"),))

    def test_candidates(self):
        assert liftable_candidates(shared_parameter_term()) == [("g", "x", ("h",))]

    def test_non_tail_call_is_not_liftable(self):
        t = set_in_non_tail_position()
        assert not check_liftable_core(t, "rc", "g", {"set"})
        assert check_liftable_core(shared_parameter_term(), "x", "g", {"h"})

    def test_forced_lifting_changes_the_result(self):
        lifted = lift_core(set_in_non_tail_position(), "rc", {"set"})
        assert eval_naive(lifted).value == 5

    def test_counterexample_is_inapplicable(self):
        verdict = diff_theorem1(set_in_non_tail_position(), "rc", "g", {"set"})
        assert verdict.kind is VerdictKind.INAPPLICABLE


@pytest.mark.unit
class TestHarnesses:
    """Differential checks between the interpreters."""

    def test_all_harnesses_agree_on_shared_parameter(self):
        t = shared_parameter_term()
        assert diff_theorem2(t).agrees
        assert diff_theorem1(t, "x", "g", {"h"}).agrees
        assert diff_theorem3(t, "x", "g", {"h"}).agrees

    def test_generator_is_deterministic(self):
        assert gen_term(7, 20) == gen_term(7, 20)
        assert gen_term(7, 20, Profile.LIFTABLE) == gen_term(7, 20, "liftable")

    def test_term_size(self):
        assert term_size(0) == 6
        assert term_size(29) == 35
        assert term_size(30) == 6

    def test_small_run(self):
        report = check_semantics(seed=0, count=25)
        assert report.ok, report.first_disagreement
        assert sum(report.equivalence.values()) == 25
        assert report.summary().startswith("terms 25 (seeds 0..24, fuel 100000, profile any)")

    def test_describe(self):
        assert describe(Done(1, {2: 3})) == "done 1 store {l2=3}"
        assert describe(Stuck("why")) == "stuck: why"
        assert describe(OutOfFuel("depth")) == "out of fuel (depth)"


@pytest.mark.unit
class TestDerivations:
    """Rule-by-rule traces of the interpreters, shown with every disagreement."""

    @pytest.mark.parametrize("evaluate", [eval_naive, eval_opt])
    def test_rules_are_indented_by_call_depth(self, evaluate):
        t = LetRec((fn("h", ("x",), Var("x")),), Call("h", (Const(1),)))
        assert derivation(evaluate, t) == ["letrec h", "call h", "val 1", "  var x"]

    def test_long_traces_are_cut_short(self):
        t = Seq(tuple(Const(i) for i in range(250)))
        trace = derivation(eval_naive, t)
        assert len(trace) == 201
        assert trace[0] == "seq"
        assert trace[-1] == "... 51 more rules"

    def test_disagreement_carries_both_derivations(self, monkeypatch):
        monkeypatch.setattr("cpc.semantics._same_outcome", lambda a, b: False)
        report = check_semantics(seed=0, count=1)
        assert not report.ok
        text = report.failures[0]
        assert text.startswith("seed 0: naive/optimised disagreement")
        assert "  left derivation:" in text
        assert "  right derivation:" in text


@pytest.mark.unit
class TestWholePrograms:
    """The naive rules extended to surface programs."""

    def test_globals_and_output(self):
        run = eval_program(parse("int g = 2; cps int main() { g = g * 3; print(\"g\", g); return g; }"))
        assert run.output == ["g 6"]
        assert run.outcome.value == 6

    def test_goto_and_labels(self, corpus_dir):
        run = eval_program(parse((corpus_dir / "labels.cpl").read_text()))
        assert run.output == ["3 is small", "9 is big"]
        assert run.outcome.value == 12

    def test_break_leaves_the_loop(self):
        run = eval_program(parse("""
            cps int main() {
                int i = 0;
                while (true) {
                    if (i == 4) break;
                    i = i + 1;
                }
                return i;
            }
        """))
        assert run.outcome.value == 4

    def test_primitives_without_scheduler(self):
        run = eval_program(parse("cps int main() { yield(); int s = sleep(3); return s; }"))
        assert run.outcome.value == 1

    def test_spawn_is_stuck(self, corpus_dir):
        run = eval_program(parse((corpus_dir / "threads.cpl").read_text()))
        assert run.outcome == Stuck("spawn needs the scheduler")

    def test_entry_arguments(self, corpus_dir):
        p = parse((corpus_dir / "rc_example.cpl").read_text())
        assert eval_program(p, args=(7,)).output == ["rc = 7"]
        assert eval_program(p).output == ["rc = 0"]
