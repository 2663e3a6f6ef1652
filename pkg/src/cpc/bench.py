"""
Thread Primitive Benchmarks

Times six primitives of the runtime on small compiled programs: a tight loop,
a direct (native) call, a cps call through the trampoline, a yield-based
context switch, a condition-variable ping-pong switch and a thread spawn.

Each row is the minimum over ``repeats`` runs of a fixed-count loop, divided
by the iteration count.

Version: 1.0.0
"""

import logging
import platform
import sys
import time
from dataclasses import dataclass
from typing import Callable, List, Optional

import psutil

from .pipeline import compile_program
from .runtime import ExitStatus, Runtime

logger = logging.getLogger(__name__)

LOOP = """
cps int main(int n) {
    int i = 0;
    while (i < n) { i = i + 1; }
    return i;
}
"""

CALL = """
int inc(int x) { return x + 1; }
cps int main(int n) {
    int i = 0;
    while (i < n) { i = inc(i); }
    return i;
}
"""

CPS_CALL = """
cps int inc(int x) { return x + 1; }
cps int main(int n) {
    int i = 0;
    while (i < n) { i = inc(i); }
    return i;
}
"""

SWITCH = """
cps void other(int n) {
    int i = 0;
    while (i < n) { yield(); i = i + 1; }
}
cps int main(int n) {
    int i = 0;
    spawn other(n);
    while (i < n) { yield(); i = i + 1; }
    return i;
}
"""

COND = """
int turn = 0;
cps void pong(cond cv, int n) {
    int i = 0;
    while (i < n) {
        while (turn == 0) { cond_wait(cv); }
        turn = 0;
        signal(cv);
        i = i + 1;
    }
}
cps int main(int n) {
    int i = 0;
    cond cv = cond_new();
    spawn pong(cv, n);
    while (i < n) {
        turn = 1;
        signal(cv);
        while (turn == 1) { cond_wait(cv); }
        i = i + 1;
    }
    return i;
}
"""

SPAWN = """
cps void worker() { return; }
cps int main(int n) {
    int i = 0;
    while (i < n) { spawn worker(); i = i + 1; }
    return i;
}
"""


@dataclass(frozen=True)
class BenchCase:
    name: str
    source: str
    iterations: int
    # switches per loop iteration
    events: int = 1


CASES = (
    BenchCase("loop", LOOP, 1_000_000),
    BenchCase("call", CALL, 1_000_000),
    BenchCase("cps-call", CPS_CALL, 1_000_000),
    BenchCase("switch", SWITCH, 100_000, events=2),
    BenchCase("cond", COND, 100_000, events=2),
    BenchCase("spawn", SPAWN, 100_000),
)


@dataclass(frozen=True)
class BenchRow:
    name: str
    ns_per_iteration: float
    iterations: int

    def render(self) -> str:
        return f"{self.name:<10}{self.ns_per_iteration:>12.1f} ns{self.iterations:>12}"


def machine_info() -> str:
    memory = psutil.virtual_memory()
    return (f"{platform.machine()} {platform.system()} {platform.release()}, "
            f"{psutil.cpu_count(logical=True)} cpus, {memory.total / 2 ** 30:.1f} GiB, "
            f"Python {sys.version.split()[0]} ({platform.python_implementation()})")


def _time_once(case: BenchCase, iterations: int, ir) -> int:
    runtime = Runtime(ir, fuel=None, debug_linearity=False)
    started = time.perf_counter_ns()
    report = runtime.run(args=(iterations,))
    elapsed = time.perf_counter_ns() - started
    if report.status is not ExitStatus.COMPLETED or report.result != iterations:
        raise RuntimeError(f"bench {case.name} ended {report.status.value} with {report.result}")
    return elapsed


def run_case(case: BenchCase, scale: float = 1.0, repeats: int = 5) -> BenchRow:
    iterations = max(int(case.iterations * scale), 1)
    ir = compile_program(case.source, f"<bench {case.name}>").ir
    best = min(_time_once(case, iterations, ir) for _ in range(repeats))
    row = BenchRow(case.name, best / (iterations * case.events), iterations)
    logger.debug("bench %s: %.1f ns", case.name, row.ns_per_iteration)
    return row


def run_bench(scale: float = 1.0, repeats: int = 5, only: Optional[List[str]] = None,
              progress: Optional[Callable[[BenchRow], None]] = None) -> List[BenchRow]:
    """Run the rows in order; ``scale`` shrinks the iteration counts for quick runs."""
    rows = []
    for case in CASES:
        if only and case.name not in only:
            continue
        row = run_case(case, scale, repeats)
        rows.append(row)
        if progress is not None:
            progress(row)
    return rows


def render(rows: List[BenchRow]) -> str:
    lines = [machine_info(), f"{'primitive':<10}{'time':>15}{'iterations':>12}"]
    lines.extend(row.render() for row in rows)
    return "\n".join(lines)
