"""
Unit tests for the boxing pass.
"""
import pytest

from cpc.boxing import assert_no_extrusion, box_program
from cpc.errors import BoxingUnsupported
from cpc.frontend import parse, print_function
from cpc.semantics import Done, eval_program


@pytest.mark.unit
class TestBoxing:
    """Extruded variables move to heap cells."""

    def test_extruded_local_is_boxed(self, corpus_dir):
        p = parse((corpus_dir / "extruded.cpl").read_text())
        boxed, report = box_program(p)
        main = boxed.function("main")
        text = print_function(main)
        assert ("pcounter", "int*") in main.locals
        assert "counter" not in main.local_names
        assert "pcounter = alloc(());" in text
        assert "*pcounter = 10;" in text
        assert "bump(pcounter, 5);" in text
        assert "r1 = *pcounter;" in text
        assert "free(pcounter);" in text
        assert "return r1;" in text
        assert report.boxed("main") == {"counter"}
        assert report.boxed("bump") == set()
        assert report.boxed_count == 1

    def test_boxed_program_keeps_its_behaviour(self, corpus_dir):
        p = parse((corpus_dir / "extruded.cpl").read_text())
        boxed, _ = box_program(p)
        run = eval_program(boxed)
        assert run.output == ["counter 22"]
        assert isinstance(run.outcome, Done)
        assert run.outcome.value == 22

    def test_unboxed_program_with_address_is_stuck(self, corpus_dir):
        p = parse((corpus_dir / "extruded.cpl").read_text())
        assert eval_program(p).outcome.kind == "stuck"

    def test_parameter_cell_starts_with_argument(self):
        p = parse("""
            cps int f(int x) {
                int *q = &x;
                *q = *q + 3;
                return x;
            }
            cps int main() { return f(4); }
        """)
        boxed, report = box_program(p)
        f = boxed.function("f")
        assert f.params == ("x",)
        assert "px = alloc(x);" in print_function(f)
        assert report.boxed("f") == {"x"}
        assert eval_program(boxed).outcome.value == 7

    def test_no_extrusion_left(self, corpus_dir):
        for path in sorted(corpus_dir.glob("*.cpl")):
            boxed, _ = box_program(parse(path.read_text(), str(path)))
            assert assert_no_extrusion(boxed) == set(), path.name

    def test_program_without_addresses_is_unchanged(self, corpus_dir):
        p = parse((corpus_dir / "fib.cpl").read_text())
        boxed, report = box_program(p)
        assert boxed == p
        assert report.boxed_count == 0

    def test_address_of_global_is_unsupported(self):
        p = parse("int g = 0; cps int main() { int *q = &g; return *q; }")
        with pytest.raises(BoxingUnsupported, match="address of global g"):
            box_program(p)

    def test_cell_names_avoid_existing_names(self):
        p = parse("cps int main() { int x = 1; int px = 2; int *q = &x; return px + *q; }")
        boxed, _ = box_program(p)
        main = boxed.function("main")
        assert ("px1", "int*") in main.locals
        assert eval_program(boxed).outcome.value == 3

    def test_every_return_frees(self):
        p = parse("""
            cps int main() {
                int a = 1;
                int *q = &a;
                if (*q > 0) {
                    return 1;
                }
                return 2;
            }
        """)
        text = print_function(box_program(p)[0].function("main"))
        assert text.count("free(pa);") == 2


@pytest.mark.unit
class TestSmartExtrusion:
    """The smarter rule skips addresses that never escape."""

    def test_discarded_address_is_not_boxed(self):
        p = parse("cps int main() { int a = 5; &a; return a; }")
        boxed, report = box_program(p, smart=True)
        assert report.boxed_count == 0
        assert eval_program(boxed).outcome.value == 5

    def test_default_rule_boxes_it(self):
        p = parse("cps int main() { int a = 5; &a; return a; }")
        _, report = box_program(p)
        assert report.boxed("main") == {"a"}

    def test_table_lists_totals(self, corpus_dir):
        _, report = box_program(parse((corpus_dir / "extruded.cpl").read_text()))
        table = report.table()
        lines = table.splitlines()
        assert lines[0].startswith("function")
        assert any(line.startswith("main") and "counter" in line for line in lines)
        assert lines[-1].split()[:3] == ["total", "1", "3"]
