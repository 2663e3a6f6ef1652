"""
Unit tests for the language core: tail positions, free and extruded variables,
the cps call-graph rule, validation and fresh names.
"""
import pytest
from hypothesis import given, strategies as st

from cpc.errors import ValidationError
from cpc.frontend import parse
from cpc.lang import (
    CPS, UNIT, Assign, Call, Const, FunDecl, If, LetRec, Program, Return, Seq, Var,
    NameSupply, all_functions, check_cps_callgraph, dump_program, extruded_variables,
    free_variables, fun_free_variables, iter_call_sites, seq, tail_positions, validate,
)
from cpc.lang import validation_errors


def fun(body, params=(), name="f", **kwargs):
    return FunDecl(name, tuple(params), body, **kwargs)


@pytest.mark.unit
class TestTailPositions:
    """Tail positions of function bodies."""

    def test_last_statement_and_return_operand(self):
        """The last item of the body and the operand of its return are tail."""
        f = fun(Seq((Call("a", ()), Return(Call("b", (Var("x"),))))), params=("x",))
        assert tail_positions(f) == {(), (1,), (1, 0)}

    def test_if_branches_inherit_tail(self):
        """Both branches of a tail conditional are tail; the condition is not."""
        f = fun(If(Var("c"), Call("a", ()), Call("b", ())))
        assert tail_positions(f) == {(), (1,), (2,)}

    def test_non_tail_if(self):
        """Branches of a conditional followed by more code are not tail."""
        f = fun(Seq((If(Var("c"), Call("a", ()), Call("b", ())), Call("k", ()))))
        paths = tail_positions(f)
        assert (0, 1) not in paths
        assert (0, 2) not in paths
        assert (1,) in paths

    def test_letrec_function_bodies_are_tail_roots(self):
        """Inner function bodies are tail; the rest of a letrec inherits."""
        g = fun(Call("k", ()), name="g")
        f = fun(LetRec((g,), Seq((Call("h", ()), Call("g", ())))))
        paths = tail_positions(f)
        assert (0,) in paths
        assert (1, 1) in paths
        assert (1, 0) not in paths

    def test_call_sites_with_owner(self):
        """Call sites report their owning function and position."""
        p = parse("""
            cps void h() { return; }
            cps int f(int x) {
                cps int g() { return x; }
                h();
                return g();
            }
        """)
        sites = [(s.call.fname, s.owner, s.tail) for s in iter_call_sites(p.function("f"))]
        assert ("h", "f", False) in sites
        assert ("g", "f", True) in sites


@pytest.mark.unit
class TestVariables:
    """Free and extruded variable analyses."""

    def test_free_variables_include_assignment_targets(self):
        assert free_variables(Assign("y", Var("x"))) == {"x", "y"}

    def test_fun_free_variables_exclude_parameters(self):
        g = fun(Seq((Assign("a", Var("b")), Var("p"))), params=("p",), name="g")
        assert fun_free_variables(g) == {"a", "b"}

    def test_letrec_free_variables(self):
        g = fun(Var("z"), params=("y",), name="g")
        t = LetRec((g,), Call("g", (Var("w"),)))
        assert free_variables(t) == {"z", "w"}

    def test_address_taken_local_is_extruded(self):
        p = parse("cps int main() { int a = 0; int *p = &a; return *p; }")
        assert extruded_variables(p.function("main")) == {"a"}

    def test_smart_extrusion_ignores_discarded_address(self):
        """A discarded ``&a`` only extrudes ``a`` without the smart rule."""
        p = parse("cps int main() { int a = 0; &a; return a; }")
        f = p.function("main")
        assert extruded_variables(f) == {"a"}
        assert extruded_variables(f, smart=True) == set()

    def test_smart_extrusion_ignores_unread_store(self):
        p = parse("cps int main() { int a = 0; int *q; q = &a; return a; }")
        assert extruded_variables(p.function("main"), smart=True) == set()

    def test_address_of_inner_variable_is_not_extruded_in_owner(self):
        """Only the function's own parameters and locals count."""
        f = parse("cps int main() { int a = 1; return a; }").function("main")
        assert extruded_variables(f) == set()


@pytest.mark.unit
class TestCallGraph:
    """Native functions must not call cps functions."""

    def test_native_calling_cps_is_reported(self):
        p = Program((
            fun(Return(Const(UNIT)), name="c", kind=CPS, ret_type="void"),
            fun(Seq((Call("c", ()),)), name="n", kind="native", ret_type="void"),
            fun(Seq((Call("n", ()), Return(Const(0)))), name="main"),
        ), entry="main")
        violations = check_cps_callgraph(p)
        assert [(v.caller, v.callee) for v in violations] == [("n", "c")]

    def test_clean_program_has_no_violations(self, corpus_dir):
        p = parse((corpus_dir / "read_loop.cpl").read_text())
        assert check_cps_callgraph(p) == []


@pytest.mark.unit
class TestValidation:
    """Language rules enforced before compilation."""

    @pytest.mark.parametrize("source, message", [
        ("cps int main() { return y; }", "undefined variable y"),
        ("cps int main() { break; return 0; }", "break outside of a loop"),
        ("cps void main() { return 1; }", "return with a value in void function main"),
        ("cps int main() { return; }", "return without a value in main"),
        ("cps int main() { goto nowhere; return 0; }", "undefined label nowhere"),
        ("cps int main() { l: yield(); l: yield(); return 0; }", "duplicate label in main"),
        ("cps int c() { return 1; } cps int main() { int x = c() + 1; return x; }",
         "cps call to c in expression position"),
        ("int g = 0; cps int main() { int g = 1; return g; }", "g in main shadows"),
        ("cps int main() { return nope(); }", "undefined function nope"),
        ("cps int f(int a) { return a; } cps int main() { return f(); }", "f expects 1 arguments"),
        ("cps void v() { return; } cps int main() { int x = v(); return x; }",
         "value of void function v used"),
        ("void n() { cps void inner() { return; } return; } cps int main() { return 0; }",
         "inner function inner inside native function n"),
    ])
    def test_rejected_programs(self, source, message):
        with pytest.raises(ValidationError, match=message):
            validate(parse(source))

    def test_native_cps_call_reported(self):
        p = parse("cps void c() { return; } void n() { c(); } cps int main() { n(); return 0; }")
        messages = [e.message for e in validation_errors(p)]
        assert "native function n calls cps function c" in messages

    def test_corpus_programs_validate(self, corpus_dir):
        for path in sorted(corpus_dir.glob("*.cpl")):
            validate(parse(path.read_text(), str(path)))

    def test_error_carries_span(self):
        with pytest.raises(ValidationError) as info:
            validate(parse("cps int main() {\n    return y;\n}", "v.cpl"))
        assert info.value.render().startswith("v.cpl:2:")

    def test_validation_is_logged(self, caplog):
        caplog.set_level("DEBUG", logger="cpc.lang")
        validate(parse("cps int f() { return 1; } cps int main() { return f(); }"))
        assert "validated 2 functions: 0 errors" in caplog.text


@pytest.mark.unit
class TestNames:
    """Fresh names and traversal helpers."""

    def test_fresh_names_count_up(self):
        supply = NameSupply()
        assert supply.fresh("l") == "l1"
        assert supply.fresh("l") == "l2"

    def test_fresh_skips_taken(self):
        supply = NameSupply({"l1", "l2"})
        assert supply.fresh("l") == "l3"

    def test_reserve_keeps_free_name(self):
        supply = NameSupply({"x"})
        assert supply.reserve("y") == "y"
        assert supply.reserve("x") == "x1"

    @given(st.lists(st.sampled_from(["l", "l1", "l2", "tmp", "tmp1", "x"]), max_size=12),
           st.integers(min_value=1, max_value=20))
    def test_fresh_never_collides(self, taken, count):
        supply = NameSupply(taken)
        made = [supply.fresh("l") for _ in range(count)]
        assert len(set(made)) == count
        assert not set(made) & set(taken)

    def test_all_functions_reports_parents(self):
        p = parse("""
            cps int main() {
                cps int outer() {
                    cps int inner() { return 1; }
                    return inner();
                }
                return outer();
            }
        """)
        parents = {f.name: parent for f, parent in all_functions(p)}
        assert parents == {"main": None, "outer": "main", "inner": "outer"}

    def test_seq_flattens(self):
        s = seq(Seq((Const(1), Const(2))), Const(3))
        assert s.items == (Const(1), Const(2), Const(3))

    def test_dump_is_deterministic(self, corpus_dir):
        text = (corpus_dir / "fib.cpl").read_text()
        first = dump_program(parse(text))
        assert first == dump_program(parse(text))
        assert first.startswith("Program entry=main\n")
