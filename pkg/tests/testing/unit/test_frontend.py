"""
Unit tests for the frontend: tokenizer, parser, pretty-printer and the
lowering of detached/attached blocks.
"""
import pytest
from hypothesis import given, strategies as st

from cpc.errors import ParseError
from cpc.frontend import expand_scheduling_blocks, format_expr, parse, print_program, tokenize
from cpc.lang import (
    Assign, Call, Const, Deref, LetRec, NativeCall, Return, Scheduled, SetRef, Var, walk,
)


def body_of(source: str, name: str = "main"):
    return parse(source).function(name).body


@pytest.mark.unit
class TestTokenizer:
    """Lexical structure."""

    def test_comments_are_skipped_and_lines_tracked(self):
        tokens = tokenize("a // line\n/* block\n comment */ b")
        idents = [(t.text, t.span.line) for t in tokens if t.kind == "ident"]
        assert idents == [("a", 1), ("b", 3)]

    def test_keywords_and_operators(self):
        kinds = [(t.kind, t.text) for t in tokenize("cps int x <= 3;")][:-1]
        assert kinds == [("kw", "cps"), ("kw", "int"), ("ident", "x"),
                         ("op", "<="), ("int", "3"), ("op", ";")]

    def test_unexpected_character(self):
        with pytest.raises(ParseError, match="unexpected character"):
            tokenize("int $x;", "bad.cpl")


@pytest.mark.unit
class TestParser:
    """Surface syntax to AST."""

    def test_declarations_are_hoisted(self):
        p = parse("cps int main() { int x = 1; bool b; return x; }")
        main = p.function("main")
        assert main.locals == (("x", "int"), ("b", "bool"))
        assert main.body.items[0] == Assign("x", Const(1))
        assert main.body.items[1] == Return(Var("x"))

    def test_entry_is_main_when_present(self):
        p = parse("cps int other() { return 1; } cps int main() { return 0; }")
        assert p.entry == "main"

    def test_entry_falls_back_to_first_cps_function(self):
        p = parse("int helper() { return 1; } cps int f(int rc) { return rc; }")
        assert p.entry == "f"

    def test_no_cps_function_is_an_error(self):
        with pytest.raises(ParseError, match="no entry point"):
            parse("int helper() { return 1; }")

    def test_operator_precedence(self):
        ret = body_of("cps int main() { return 1 + 2 * 3; }").items[0]
        assert ret.expr == NativeCall("add", (Const(1), NativeCall("mul", (Const(2), Const(3)))))

    def test_negative_literal_and_negation(self):
        items = body_of("cps int main() { int a = -3; int b = -a; return b; }").items
        assert items[0].expr == Const(-3)
        assert items[1].expr == NativeCall("neg", (Var("a"),))

    def test_builtins_and_user_calls(self):
        items = body_of("cps void f() { return; } cps int main() { print(1); f(); return 0; }").items
        assert isinstance(items[0], NativeCall)
        assert items[1] == Call("f", ())

    def test_pointer_statements(self):
        p = parse("cps int main() { int *p = alloc(1); *p = *p + 1; return *p; }")
        main = p.function("main")
        assert ("p", "int*") in main.locals
        assert main.body.items[1] == SetRef(Var("p"), NativeCall("add", (Deref(Var("p")), Const(1))))

    def test_inner_functions_become_letrec(self):
        p = parse("""
            cps int f(int x) {
                int y = x;
                cps int g() { return y; }
                cps int h() { return g(); }
                return h();
            }
        """)
        items = p.function("f").body.items
        assert isinstance(items[1], LetRec)
        assert [g.name for g in items[1].funs] == ["g", "h"]
        assert items[1].rest.items == (Return(Call("h", ())),)

    def test_scheduling_blocks(self):
        items = body_of("cps int main() { detached { yield(); } attached { yield(); } return 0; }").items
        assert [s.target for s in items[:2] if isinstance(s, Scheduled)] == ["pool", "loop"]

    def test_syntax_error_reports_position_and_expectation(self):
        with pytest.raises(ParseError) as info:
            parse("cps int main() {\n    return 1\n}", "e.cpl")
        error = info.value
        assert error.span.line == 3
        assert error.expected == (";",)
        assert error.render().startswith("e.cpl:3:1: error:")

    def test_unterminated_block(self):
        with pytest.raises(ParseError, match="unterminated block"):
            parse("cps int main() { return 0;")

    def test_bytes_input(self):
        assert parse(b"cps int main() { return 0; }").entry == "main"


_names = st.sampled_from(["a", "b", "c"])
_leaves = st.one_of(
    st.integers(min_value=-50, max_value=50).map(Const),
    st.booleans().map(Const),
    _names.map(Var),
)
_binary = st.sampled_from(["add", "sub", "mul", "div", "mod", "lt", "le", "gt", "ge",
                           "eq", "ne", "and", "or"])


def _expressions():
    return st.recursive(
        _leaves,
        lambda inner: st.one_of(
            st.tuples(_binary, inner, inner).map(lambda t: NativeCall(t[0], (t[1], t[2]))),
            st.tuples(st.sampled_from(["neg", "not"]), inner).map(lambda t: NativeCall(t[0], (t[1],))),
        ),
        max_leaves=12,
    )


@pytest.mark.unit
class TestPrinter:
    """Printing is the inverse of parsing."""

    @given(_expressions())
    def test_expression_round_trip(self, expr):
        text = format_expr(expr)
        parsed = body_of(f"cps int main() {{ return {text}; }}").items[0].expr
        assert parsed == expr

    def test_corpus_round_trip(self, corpus_dir):
        for path in sorted(corpus_dir.glob("*.cpl")):
            program = parse(path.read_text(), str(path))
            assert parse(print_program(program)) == program, path.name

    def test_printer_is_deterministic(self, corpus_dir):
        text = (corpus_dir / "labels.cpl").read_text()
        assert print_program(parse(text)) == print_program(parse(text))


@pytest.mark.unit
class TestSchedulingExpansion:
    """detached/attached blocks lower to link calls."""

    def test_detached_block_with_return(self):
        p = expand_scheduling_blocks(parse("""
            cps int main() {
                detached {
                    return 1;
                }
                return 0;
            }
        """))
        main = p.function("main")
        text = print_program(p)
        assert "sched1 = link(threadpool());" in text
        assert "ret1 = 1;" in text
        assert "link(sched1);" in text
        assert "return ret1;" in text
        assert ("sched1", "int") in main.locals
        assert not any(isinstance(n, Scheduled) for n in walk(main.body))

    def test_attached_block_uses_event_loop(self):
        p = expand_scheduling_blocks(parse("cps void main() { attached { yield(); } }"))
        assert "link(eventloop())" in print_program(p)

    def test_program_without_blocks_is_unchanged(self, corpus_dir):
        p = parse((corpus_dir / "fib.cpl").read_text())
        assert expand_scheduling_blocks(p) is p


@pytest.mark.unit
class TestSourceEncoding:
    """Source files are UTF-8."""

    def test_bytes_are_decoded(self):
        p = parse("cps int main() { print(\"héllo\"); return 0; }".encode("utf-8"))
        assert p.entry == "main"

    def test_invalid_utf8_is_a_parse_error(self):
        with pytest.raises(ParseError, match="invalid UTF-8 at byte offset 29") as info:
            parse(b"cps int main() { return 0; } \xff\xfe", "bad.cpl")
        span = info.value.span
        assert (span.file, span.line, span.column) == ("bad.cpl", 1, 30)

    def test_position_counts_lines(self):
        with pytest.raises(ParseError) as info:
            parse(b"cps int main() {\n  return 0;\n} // \xc3", "bad.cpl")
        assert info.value.span.line == 3
        assert info.value.span.column == 6
