"""
Integration tests: the whole compiler against the reference interpreter and
the golden outputs of the concurrent corpus.
"""
import pytest

from cpc.errors import NotLiftable
from cpc.pipeline import Stage, collect_stats, compile_file, corpus_files
from cpc.runtime import ExitStatus, VirtualEventSource, run_loop
from cpc.semantics import Done, eval_program
from cpc.values import same_value

SEQUENTIAL = [
    "accumulate", "collatz", "counter", "detached", "division", "early_eval", "even_odd",
    "extruded", "fib", "gcd", "goto_loop", "heap_cells", "inner_tail", "labels", "logic",
    "nested_if", "primes", "rc_example", "read_loop", "sleeper", "sum_recursive", "void_calls",
]

CONCURRENT = ["threads", "condvar", "timers", "sleep_cv", "echo_server"]


def source_for(path):
    script = path.with_suffix(".script")
    if script.exists():
        return VirtualEventSource.from_text(script.read_text(), str(script))
    return VirtualEventSource()


def run_file(path, **options):
    result = compile_file(path)
    return run_loop(result.ir, source_for(path), **options)


@pytest.mark.integration
class TestSequentialOracle:
    """Compiled code prints and returns what the reference interpreter does."""

    @pytest.mark.parametrize("name", SEQUENTIAL)
    def test_runtime_matches_interpreter(self, corpus_dir, name):
        path = corpus_dir / f"{name}.cpl"
        result = compile_file(path)
        expected = eval_program(result.boxed)
        assert isinstance(expected.outcome, Done), expected.outcome
        report = run_loop(result.ir, VirtualEventSource(), fuel=None)
        assert report.status is ExitStatus.COMPLETED
        assert report.output == expected.output
        assert same_value(report.result, expected.outcome.value)

    @pytest.mark.parametrize("name", ["extruded", "heap_cells", "labels"])
    def test_smart_extrusion_keeps_behaviour(self, corpus_dir, name):
        path = corpus_dir / f"{name}.cpl"
        plain = run_loop(compile_file(path).ir)
        smart = run_loop(compile_file(path, smart_extrusion=True).ir)
        assert smart.output == plain.output

    @pytest.mark.parametrize("name", ["read_loop", "fib", "goto_loop"])
    def test_liveness_lite_keeps_behaviour(self, corpus_dir, name):
        path = corpus_dir / f"{name}.cpl"
        with_lite = run_loop(compile_file(path).ir)
        without = run_loop(compile_file(path, liveness_lite=False).ir)
        assert without.output == with_lite.output


@pytest.mark.integration
class TestConcurrentGoldens:
    """Scheduled programs against their recorded output."""

    @pytest.mark.parametrize("name", CONCURRENT)
    def test_golden_output(self, corpus_dir, name):
        path = corpus_dir / f"{name}.cpl"
        report = run_file(path)
        assert report.status is ExitStatus.COMPLETED
        golden = (corpus_dir / f"{name}.out").read_text().splitlines()
        assert report.output + report.transcript_lines() == golden

    @pytest.mark.parametrize("name", CONCURRENT)
    def test_runs_are_deterministic(self, corpus_dir, name):
        path = corpus_dir / f"{name}.cpl"
        first = run_file(path, trace=True)
        second = run_file(path, trace=True)
        assert first.output == second.output
        assert first.trace == second.trace

    def test_echo_server_transcript(self, corpus_dir):
        report = run_file(corpus_dir / "echo_server.cpl")
        assert report.transcript == [(100, 42), (101, 7)]
        assert report.result == 2


@pytest.mark.integration
class TestStages:
    """Emitted intermediate forms."""

    def test_lifted_alpha_view(self, corpus_dir):
        result = compile_file(corpus_dir / "rc_example.cpl", until=Stage.LIFTED)
        text = result.emit(Stage.LIFTED, alpha=True)
        assert "cps int f__l1(int rc2) {" in text
        assert "cps int f__done1(int rc3) {" in text

    def test_canonical_dump(self, corpus_dir):
        result = compile_file(corpus_dir / "rc_example.cpl", until=Stage.SPLIT)
        assert result.emit(Stage.AST, canonical=True).startswith("Program entry=f\n")
        assert result.lifted is None

    def test_funtable_emit(self, corpus_dir):
        result = compile_file(corpus_dir / "fib.cpl")
        assert result.emit(Stage.FUNTABLE).splitlines()[0] == "0 yield 0 -"

    def test_report_timings(self, corpus_dir):
        report = compile_file(corpus_dir / "fib.cpl").report
        assert set(report.timings) == {"parse", "boxing", "splitting", "lifting", "cps"}
        assert report.functions == 2

    def test_counterexample_is_refused(self, corpus_dir):
        path = corpus_dir / "rejected" / "rc_counterexample.cpl"
        with pytest.raises(NotLiftable) as info:
            compile_file(path)
        rendered = info.value.render()
        assert rendered.startswith(f"{path}:12:5: error:")
        assert "parameter rc of f is not liftable at non-tail call to set" in rendered

    def test_counterexample_splits(self, corpus_dir):
        path = corpus_dir / "rejected" / "rc_counterexample.cpl"
        assert compile_file(path, until=Stage.SPLIT).split is not None


@pytest.mark.integration
class TestCorpusStats:
    """Statistics over the whole corpus."""

    def test_stats_over_corpus(self, corpus_dir):
        paths = corpus_files(corpus_dir)
        stats = collect_stats(paths + [corpus_dir / "rejected" / "rc_counterexample.cpl"])
        assert len(stats.reports) == len(paths)
        assert len(stats.refused) == 1
        text = stats.render()
        assert text.splitlines()[0] == f"programs {len(paths)} compiled, 1 refused"
        assert "rc_counterexample.cpl: parameter rc of f is not liftable" in text
        assert 0.0 < stats.lifted_fraction <= 1.0
        assert stats.boxed >= 1
        assert 0.0 <= stats.boxed_fraction < 1.0
