"""
Unit tests for parameter lifting, the liftability check and block floating.
"""
import pytest

from cpc.errors import InnerNotClosed, NotLiftable
from cpc.frontend import parse, print_function
from cpc.lang import Call, Spawn, all_functions, walk
from cpc.lifting import (
    alpha_view, check_liftable, float_blocks, free_in_inner, lift_parameters, tail_call_sites,
)
from cpc.pipeline import Stage
from cpc.semantics import eval_program
from cpc.splitting import split_program


def split_of(text: str):
    return split_program(parse(text))[0]


@pytest.fixture
def rc_split(corpus_dir):
    return split_of((corpus_dir / "rc_example.cpl").read_text())


@pytest.fixture
def counterexample(corpus_dir):
    return split_of((corpus_dir / "rejected" / "rc_counterexample.cpl").read_text())


@pytest.mark.unit
class TestCallPartition:
    """Tail and non-tail call sites of inner functions."""

    def test_split_continuations_are_tail_called(self, rc_split):
        f = rc_split.function("f")
        for name in ("f__l1", "f__done1"):
            sites = tail_call_sites(f, name)
            assert sites.tail
            assert not sites.non_tail

    def test_non_tail_site(self, counterexample):
        sites = tail_call_sites(counterexample.function("f"), "set")
        assert len(sites.non_tail) == 1
        assert sites.non_tail_spans[0].line == 12


@pytest.mark.unit
class TestLiftability:
    """Which variables may be lifted."""

    def test_rc_example_is_liftable(self, rc_split):
        report = check_liftable(rc_split)
        assert report.all_liftable
        assert report.verdict("f", "rc").liftable

    def test_counterexample_is_refused(self, counterexample):
        report = check_liftable(counterexample)
        failures = report.failures()
        assert [(g, x) for g, x, _ in failures] == [("f", "rc")]
        verdict = failures[0][2]
        assert verdict.callee == "set"
        assert verdict.witness.line == 12

    def test_lifting_raises_with_witness(self, counterexample):
        with pytest.raises(NotLiftable) as info:
            lift_parameters(counterexample)
        error = info.value
        assert (error.parameter, error.function, error.callee) == ("rc", "f", "set")
        assert error.witness.line == 12
        assert "parameter rc of f is not liftable at non-tail call to set" in str(error)


@pytest.mark.unit
class TestLifting:
    """Free variables become parameters."""

    def test_rc_example_lifted(self, rc_split):
        lifted, report = lift_parameters(rc_split)
        assert report.lifted == {("f", "rc")}
        assert report.added == {"f__l1": ["rc"], "f__done1": ["rc"]}
        text = print_function(lifted.function("f"))
        assert "return f__l1(rc);" in text
        assert "return f__done1(rc);" in text

    def test_lifted_parameter_keeps_type(self, rc_split):
        lifted, _ = lift_parameters(rc_split)
        l1 = lifted.function("f").inner[0]
        assert l1.params == ("rc",)
        assert l1.param_types == ("int",)

    def test_liveness_lite_keeps_local_in_its_only_user(self):
        split = split_of("cps int main() { int t; yield(); t = 5; print(t); return t; }")
        _, report = lift_parameters(split, liveness_lite=True)
        assert report.kept_local == {"main__l1": ["t"]}
        assert report.lifted == set()

    def test_without_liveness_lite_the_local_is_lifted(self):
        split = split_of("cps int main() { int t; yield(); t = 5; print(t); return t; }")
        _, report = lift_parameters(split, liveness_lite=False)
        assert report.lifted == {("main", "t")}

    def test_report_fraction_and_table(self, rc_split):
        _, report = lift_parameters(rc_split)
        assert report.total_locals == 1
        assert report.lifted_fraction == 1.0
        table = report.table()
        assert "f__l1" in table
        assert table.splitlines()[-1] == "lifted 1 of 1 variables (100.0%)"

    def test_lifting_preserves_behaviour(self, corpus_dir, compile_source):
        for name in ("rc_example", "read_loop", "goto_loop", "inner_tail", "labels", "fib"):
            result = compile_source((corpus_dir / f"{name}.cpl").read_text(), until=Stage.LIFTED)
            before, after = eval_program(result.split), eval_program(result.lifted)
            assert after.output == before.output, name
            assert after.outcome.value == before.outcome.value, name


@pytest.mark.unit
class TestFloating:
    """Inner functions move to the top level once closed."""

    def test_free_in_inner(self, rc_split):
        assert free_in_inner(rc_split) == {("f", "rc")}

    def test_unlifted_inner_is_not_closed(self, rc_split):
        with pytest.raises(InnerNotClosed) as info:
            float_blocks(rc_split)
        assert info.value.function == "f__l1"
        assert info.value.names == ("rc",)

    def test_floated_functions(self, rc_split):
        lifted, _ = lift_parameters(rc_split)
        floated = float_blocks(lifted)
        assert [f.name for f in floated.functions] == ["f", "f__l1", "f__done1"]
        assert all(f.params == ("rc",) for f in floated.functions)
        assert all(not f.inner for f in floated.functions)

    def test_alpha_view_renames_shared_names(self, rc_split):
        floated = float_blocks(lift_parameters(rc_split)[0])
        renamed = alpha_view(floated)
        assert [f.params for f in renamed.functions] == [("rc1",), ("rc2",), ("rc3",)]
        assert "cps int f__l1(int rc2) {" in print_function(renamed.function("f__l1"))


def arity_mismatches(program):
    arity = {f.name: len(f.params) for f, _ in all_functions(program)}
    return [(f.name, node.fname, len(node.args), arity[node.fname])
            for f, _ in all_functions(program) for node in walk(f.body)
            if isinstance(node, (Call, Spawn)) and node.fname in arity
            and len(node.args) != arity[node.fname]]


@pytest.mark.unit
class TestCallArity:
    """Every call passes exactly the parameters its callee declares once lifted."""

    def test_loop_around_a_cps_call(self):
        split = split_of("""
            cps int main() {
                cond cv = cond_new();
                int i = 0;
                while (i < 3) { sleep(1, cv); i = i + 1; }
                return i;
            }
        """)
        lifted, report = lift_parameters(split)
        assert arity_mismatches(lifted) == []
        assert sorted(report.added["main__l1"]) == ["cv", "i"]
        l1 = next(f for f, _ in all_functions(lifted) if f.name == "main__l1")
        assert len(l1.params) == 2

    def test_nested_inner_functions(self):
        split = split_of("""
            cps int main() {
                int a = 1;
                int b = 2;
                cps int outer() {
                    cps int inner() { return a + b; }
                    yield();
                    return inner();
                }
                return outer();
            }
        """)
        lifted, _ = lift_parameters(split)
        assert arity_mismatches(lifted) == []

    def test_whole_corpus(self, corpus_dir, compile_source):
        for path in sorted(corpus_dir.glob("*.cpl")):
            result = compile_source(path.read_text(), until=Stage.LIFTED, filename=path.name)
            assert arity_mismatches(result.lifted) == [], path.name


@pytest.mark.unit
class TestLiftabilityRule:
    """A variable of g is liftable only when every inner function of g is tail called."""

    def test_non_tail_inner_call_blocks_every_variable_of_the_owner(self):
        p = parse("""
            cps int g(int x, int y) {
                cps void h() { print(y); }
                h();
                return x;
            }
            cps int main() { return g(1, 2); }
        """)
        report = check_liftable(p)
        assert not report.verdict("g", "x").liftable
        assert not report.verdict("g", "y").liftable
        assert report.verdict("g", "x").callee == "h"
        assert report.verdict("g", "x").witness.line == 4

    def test_lifting_names_the_lifted_variable(self):
        split = split_of("""
            cps int g(int x, int y) {
                cps void h() { print(y); }
                h();
                return 0;
            }
            cps int main() { return g(1, 2); }
        """)
        with pytest.raises(NotLiftable) as info:
            lift_parameters(split)
        assert info.value.parameter == "y"
        assert info.value.callee == "h"

    def test_address_taken_variable_has_a_witness(self):
        p = parse("""
            cps int g(int x) {
                int *p = &x;
                cps int h() { return x; }
                return h();
            }
            cps int main() { return g(1); }
        """)
        verdict = check_liftable(p).verdict("g", "x")
        assert not verdict.liftable
        assert verdict.witness is not None
        assert verdict.witness.line == 3
        assert verdict.reason == "its address is taken and h uses it"

    def test_functions_without_inner_functions_are_liftable(self, corpus_dir):
        report = check_liftable(parse((corpus_dir / "fib.cpl").read_text()))
        assert report.all_liftable
