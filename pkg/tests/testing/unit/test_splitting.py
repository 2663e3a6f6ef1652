"""
Unit tests for the splitting pass and the CPS-convertibility check.
"""
import pytest

from cpc.errors import NotConvertible
from cpc.frontend import parse, print_function
from cpc.lang import Assign, Call, Const, Goto, Labelled, LetRec, Return, function_kinds, walk
from cpc.pipeline import Stage
from cpc.semantics import Done, eval_program
from cpc.splitting import (
    check_cps_convertible, eliminate_gotos, make_flow_explicit, split_program,
)

SEQUENTIAL = [
    "accumulate", "collatz", "counter", "detached", "division", "early_eval", "even_odd",
    "extruded", "fib", "gcd", "goto_loop", "heap_cells", "inner_tail", "labels", "logic",
    "nested_if", "primes", "rc_example", "read_loop", "sleeper", "sum_recursive", "void_calls",
]


def rc_program(corpus_dir):
    return parse((corpus_dir / "rc_example.cpl").read_text())


@pytest.mark.unit
class TestFlow:
    """Explicit control flow after cps calls."""

    def test_goto_inserted_after_cps_call(self, corpus_dir):
        p = rc_program(corpus_dir)
        f = make_flow_explicit(p.function("f"), function_kinds(p))
        labels = [n.label for n in walk(f.body) if isinstance(n, Labelled)]
        gotos = [n.label for n in walk(f.body) if isinstance(n, Goto)]
        assert labels == ["f__l1", "f__done1"]
        assert set(gotos) == {"f__l1", "f__done1"}

    def test_function_without_cps_calls_is_untouched(self):
        p = parse("int sq(int x) { return x * x; } cps int main() { return sq(2); }")
        kinds = function_kinds(p)
        for f in p.functions:
            assert make_flow_explicit(f, kinds) is f

    def test_tail_call_needs_no_label(self):
        p = parse("cps int c() { return 1; } cps void main() { c(); return; }")
        main = p.function("main")
        assert make_flow_explicit(main, function_kinds(p)).body == main.body

    def test_loop_with_cps_call_becomes_labels(self, corpus_dir):
        p = parse((corpus_dir / "read_loop.cpl").read_text())
        main = make_flow_explicit(p.function("main"), function_kinds(p))
        labels = {n.label for n in walk(main.body) if isinstance(n, Labelled)}
        assert labels == {"main__while_label1", "main__break_label1", "main__l1"}

    def test_user_labels_are_prefixed(self, corpus_dir):
        p = parse((corpus_dir / "labels.cpl").read_text())
        check = make_flow_explicit(p.function("check"), function_kinds(p))
        labels = {n.label for n in walk(check.body) if isinstance(n, Labelled)}
        assert {"check__big", "check__out"} <= labels


@pytest.mark.unit
class TestGotoElimination:
    """Labelled blocks become inner functions."""

    def test_labels_are_hoisted_into_one_letrec(self, corpus_dir):
        p = rc_program(corpus_dir)
        f = eliminate_gotos(make_flow_explicit(p.function("f"), function_kinds(p)))
        assert [g.name for g in f.inner] == ["f__l1", "f__done1"]
        assert isinstance(f.body.items[0], LetRec)
        assert not any(isinstance(n, (Goto, Labelled)) for n in walk(f.body))

    def test_goto_becomes_tail_call(self, corpus_dir):
        p = rc_program(corpus_dir)
        f = eliminate_gotos(make_flow_explicit(p.function("f"), function_kinds(p)))
        l1 = f.inner[0]
        assert l1.is_cps
        assert l1.params == ()
        assert l1.body.items[-1] == Return(Call("f__done1", ()))
        text = print_function(f)
        assert "return f__l1();" in text
        assert "return f__done1();" in text

    def test_function_without_gotos_is_unchanged(self, corpus_dir):
        f = parse((corpus_dir / "fib.cpl").read_text()).functions[0]
        assert eliminate_gotos(f) is f

    def test_labels_after_a_jump_become_functions(self, corpus_dir):
        split, _ = split_program(parse((corpus_dir / "labels.cpl").read_text()))
        check = split.function("check")
        defined = {g.name for g in check.inner}
        assert {"check__big", "check__out"} <= defined
        called = {n.fname for n in walk(check.body) if isinstance(n, Call)}
        assert called - {"yield"} <= defined

    def test_dead_code_between_jump_and_label_is_dropped(self):
        p = parse("""
            cps int main() {
                int x = 1;
                goto first;
                x = 100;
            first:
                x = x + 1;
                yield();
            second:
                x = x * 10;
                return x;
            }
        """)
        main = make_flow_explicit(p.function("main"), function_kinds(p))
        labels = {n.label for n in walk(main.body) if isinstance(n, Labelled)}
        assert {"main__first", "main__second"} <= labels
        assigned = [n.expr for n in walk(main.body) if isinstance(n, Assign) and n.name == "x"]
        assert Const(100) not in assigned


@pytest.mark.unit
class TestSplitProgram:
    """Whole-program splitting."""

    def test_report_lists_generated_functions(self, corpus_dir):
        _, report = split_program(rc_program(corpus_dir))
        assert report.generated == {"f": ["f__l1", "f__done1"]}
        assert report.generated_count == 2

    def test_read_loop_inner_functions(self, corpus_dir):
        split, _ = split_program(parse((corpus_dir / "read_loop.cpl").read_text()))
        names = {g.name for g in split.function("main").inner}
        assert names == {"main__while_label1", "main__l1", "main__break_label1"}

    def test_shared_target_goes_through_temporary(self):
        p = parse("int g = 0; cps int c() { return 1; } cps int main() { g = c(); return g; }")
        split, _ = split_program(p)
        assert ("tmp1", "int") in split.function("main").locals
        assert check_cps_convertible(split).convertible

    @pytest.mark.parametrize("name", SEQUENTIAL)
    def test_split_corpus_is_convertible_and_equivalent(self, corpus_dir, compile_source, name):
        result = compile_source((corpus_dir / f"{name}.cpl").read_text(), until=Stage.SPLIT,
                                filename=f"{name}.cpl")
        assert check_cps_convertible(result.split).convertible
        before = eval_program(result.boxed)
        after = eval_program(result.split)
        assert after.output == before.output
        assert after.outcome.kind == before.outcome.kind
        if isinstance(before.outcome, Done):
            assert after.outcome.value == before.outcome.value


@pytest.mark.unit
class TestConvertibility:
    """Sites that violate CPS-convertibility."""

    def test_direct_style_after_cps_call(self, corpus_dir):
        verdict = check_cps_convertible(rc_program(corpus_dir))
        assert not verdict.convertible
        reasons = {reason for _, _, reason in verdict.sites}
        assert "cps call followed by direct-style code" in reasons

    def test_cps_call_at_end_of_function(self):
        p = parse("cps void c() { return; } cps void main() { if (true) { c(); } }")
        verdict = check_cps_convertible(p)
        assert [s[2] for s in verdict.sites] == ["cps call not followed by a tail call"]

    def test_store_into_global(self):
        p = parse("int g = 0; cps int c() { return 1; } cps int main() { g = c(); return g; }")
        reasons = [s[2] for s in check_cps_convertible(p).sites]
        assert "result of a cps call stored into a shared variable" in reasons

    def test_raise_reports_function(self, corpus_dir):
        with pytest.raises(NotConvertible, match="not CPS-convertible in f"):
            check_cps_convertible(rc_program(corpus_dir)).raise_for_sites()

    def test_tail_call_forms_are_accepted(self):
        p = parse("""
            cps int k(int v) { return v; }
            cps void w() { return; }
            cps int main() {
                int a;
                a = k(1);
                return k(a);
            }
            cps void other() {
                w();
                w();
                return;
            }
        """)
        assert check_cps_convertible(p).convertible
