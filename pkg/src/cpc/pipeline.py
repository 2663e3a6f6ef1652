"""
Compilation Pipeline

Runs the passes in order (parse, boxing, splitting, lambda-lifting, CPS
conversion), re-checks the pass invariants between them, and aggregates the
per-program statistics reported by ``cpc stats``.

Version: 1.0.0
"""

import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Set, Tuple

from .boxing import BoxingReport, assert_no_extrusion, box_program
from .cps import CpsProgram, cps_convert, dump_funtable, dump_ir, verify_early_evaluation_safety
from .errors import CompileError, NotConvertible
from .frontend import expand_scheduling_blocks, parse, print_program
from .lang import Program, dump_program, validate
from .lifting import LiftingReport, alpha_view, float_blocks, free_in_inner, lift_parameters
from .splitting import SplitReport, check_cps_convertible, split_program

logger = logging.getLogger(__name__)


class Stage(str, Enum):
    AST = "ast"
    BOXED = "boxed"
    SPLIT = "split"
    LIFTED = "lifted"
    CPS = "cps"
    FUNTABLE = "funtable"

    @property
    def order(self) -> int:
        return list(Stage).index(self)


@dataclass
class PassReport:
    """Statistics of one compiled program."""
    filename: str
    functions: int = 0
    boxing: BoxingReport = field(default_factory=BoxingReport)
    splitting: SplitReport = field(default_factory=SplitReport)
    lifting: LiftingReport = field(default_factory=LiftingReport)
    free_in_inner: Set[Tuple[str, str]] = field(default_factory=set)
    cps_locals: int = 0
    timings: Dict[str, float] = field(default_factory=dict)

    @property
    def boxed_lifted(self) -> int:
        cells = {cell for entry in self.boxing.functions.values() for _, cell in entry.cells}
        return sum(1 for _, v in self.lifting.lifted if v in cells)


@dataclass
class Compilation:
    filename: str
    ast: Program
    boxed: Optional[Program] = None
    split: Optional[Program] = None
    lifted: Optional[Program] = None
    ir: Optional[CpsProgram] = None
    report: PassReport = None

    def emit(self, stage: Stage, alpha: bool = False, canonical: bool = False) -> str:
        """Text of ``stage``: surface syntax for source stages, IR dumps otherwise."""
        stage = Stage(stage)
        if stage is Stage.CPS:
            return dump_ir(self.ir)
        if stage is Stage.FUNTABLE:
            return dump_funtable(self.ir)
        program = getattr(self, stage.value)
        if alpha and stage is Stage.LIFTED:
            program = alpha_view(program)
        return dump_program(program) if canonical else print_program(program)


def _check_extrusion(p: Program, after: str, smart: bool) -> None:
    left = assert_no_extrusion(p, smart)
    if left:
        raise CompileError(f"extruded variables remain after {after}: {', '.join(sorted(left))}", None)


def compile_program(text, filename: str = "<input>", until: Stage = Stage.CPS,
                    smart_extrusion: bool = False, liveness_lite: bool = True) -> Compilation:
    """Compile surface text up to (and including) ``until``.

    Raises the ``CompileError`` of the first failing pass.
    """
    until = Stage(until)
    report = PassReport(filename)
    clock = time.perf_counter

    started = clock()
    ast = parse(text, filename)
    validate(ast)
    report.functions = len(ast.functions)
    report.timings["parse"] = clock() - started
    result = Compilation(filename, ast, report=report)
    if until is Stage.AST:
        return result

    started = clock()
    boxed, report.boxing = box_program(expand_scheduling_blocks(ast), smart=smart_extrusion)
    _check_extrusion(boxed, "boxing", smart_extrusion)
    result.boxed = boxed
    report.timings["boxing"] = clock() - started
    if until is Stage.BOXED:
        return result

    started = clock()
    split, report.splitting = split_program(boxed)
    _check_extrusion(split, "splitting", smart_extrusion)
    check_cps_convertible(split).raise_for_sites()
    report.free_in_inner = free_in_inner(split)
    report.cps_locals = sum(len(f.scope_names) for f in boxed.functions if f.is_cps)
    result.split = split
    report.timings["splitting"] = clock() - started
    if until is Stage.SPLIT:
        return result

    started = clock()
    lifted, report.lifting = lift_parameters(split, liveness_lite=liveness_lite)
    lifted = float_blocks(lifted)
    _check_extrusion(lifted, "lifting", smart_extrusion)
    result.lifted = lifted
    report.timings["lifting"] = clock() - started
    if until is Stage.LIFTED:
        return result

    started = clock()
    ir = cps_convert(lifted)
    unsafe = verify_early_evaluation_safety(ir)
    if unsafe:
        raise NotConvertible(unsafe)
    result.ir = ir
    report.timings["cps"] = clock() - started
    logger.info("compiled %s: %d functions, %d boxed, %d lifted, %d descriptors",
                filename, report.functions, report.boxing.boxed_count,
                report.lifting.lifted_count, len(ir.funtable))
    return result


def compile_file(path, **options) -> Compilation:
    path = Path(path)
    return compile_program(path.read_bytes(), str(path), **options)


# --------------------------------------------------------------------------
# Corpus statistics

REFERENCE_LIFTED = 0.50
REFERENCE_BOXED_OF_LIFTED = 0.10
REFERENCE_BOXED = 0.05
REFERENCE_BOX_EVERYTHING = 0.50


@dataclass
class CorpusStats:
    reports: List[PassReport] = field(default_factory=list)
    refused: List[Tuple[str, str]] = field(default_factory=list)

    def _sum(self, attr) -> int:
        return sum(attr(r) for r in self.reports)

    @property
    def total_locals(self) -> int:
        return self._sum(lambda r: r.boxing.total_locals)

    @property
    def boxed(self) -> int:
        return self._sum(lambda r: r.boxing.boxed_count)

    @property
    def lifted(self) -> int:
        return self._sum(lambda r: r.lifting.lifted_count)

    @property
    def lifting_locals(self) -> int:
        return self._sum(lambda r: r.lifting.total_locals)

    @property
    def boxed_lifted(self) -> int:
        return self._sum(lambda r: r.boxed_lifted)

    @staticmethod
    def _fraction(n: int, d: int) -> float:
        return n / d if d else 0.0

    @property
    def lifted_fraction(self) -> float:
        return self._fraction(self.lifted, self.lifting_locals)

    @property
    def boxed_fraction(self) -> float:
        return self._fraction(self.boxed, self.total_locals)

    @property
    def boxed_of_lifted_fraction(self) -> float:
        return self._fraction(self.boxed_lifted, self.lifted)

    @property
    def box_everything_fraction(self) -> float:
        return self._fraction(self._sum(lambda r: len(r.free_in_inner)),
                              self._sum(lambda r: r.cps_locals))

    def render(self) -> str:
        lines = [f"programs {len(self.reports)} compiled, {len(self.refused)} refused"]
        rows = (
            ("lifted", self.lifted_fraction, f"{self.lifted}/{self.lifting_locals}", REFERENCE_LIFTED),
            ("boxed", self.boxed_fraction, f"{self.boxed}/{self.total_locals}", REFERENCE_BOXED),
            ("boxed of lifted", self.boxed_of_lifted_fraction,
             f"{self.boxed_lifted}/{self.lifted}", REFERENCE_BOXED_OF_LIFTED),
            ("box everything", self.box_everything_fraction, "", REFERENCE_BOX_EVERYTHING),
        )
        lines.append(f"{'':<18}{'corpus':>10}{'':>12}{'reference':>12}")
        for name, fraction, counts, reference in rows:
            lines.append(f"{name:<18}{100 * fraction:>9.1f}%{counts:>12}{100 * reference:>11.0f}%")
        for filename, reason in self.refused:
            lines.append(f"refused {filename}: {reason}")
        return "\n".join(lines)


def corpus_files(directory) -> List[Path]:
    return sorted(Path(directory).glob("*.cpl"))


def collect_stats(paths: Iterable, **options) -> CorpusStats:
    stats = CorpusStats()
    for path in paths:
        try:
            stats.reports.append(compile_file(path, **options).report)
        except CompileError as e:
            stats.refused.append((str(path), e.message))
            logger.info("stats: %s refused: %s", path, e.message)
    return stats
