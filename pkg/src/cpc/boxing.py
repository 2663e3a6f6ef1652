"""
Boxing Pass

Heap-allocates extruded variables (variables whose address is taken) so that no
extruded variable survives into splitting and lifting.

For each boxed ``x`` of ``f``:

- a fresh ``int* px`` local is allocated on entry (``px = alloc(x)`` for a
  parameter, ``px = alloc(())`` for a local)
- reads of ``x`` become ``*px``, writes become ``*px = ...``, ``&x`` becomes ``px``
- every cell is released before each ``return`` of ``f`` and at its end

Version: 1.0.0
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Set, Tuple

from .errors import BoxingUnsupported
from .lang import (
    UNIT, AddrOf, Assign, Const, Deref, FunDecl, Goto, If, Labelled, LetRec,
    NameSupply, NativeCall, Program, Return, Seq, SetRef, Term, Var, all_functions,
    children, extruded_variables, map_children, rebuild, seq, walk,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FunctionBoxing:
    boxed: Tuple[str, ...]
    total_locals: int
    cells: Tuple[Tuple[str, str], ...] = ()


@dataclass
class BoxingReport:
    """Per-function boxing statistics."""
    functions: Dict[str, FunctionBoxing] = field(default_factory=dict)

    @property
    def boxed_count(self) -> int:
        return sum(len(b.boxed) for b in self.functions.values())

    @property
    def total_locals(self) -> int:
        return sum(b.total_locals for b in self.functions.values())

    def boxed(self, function: str) -> Set[str]:
        entry = self.functions.get(function)
        return set(entry.boxed) if entry else set()

    def merge(self, other: "BoxingReport") -> "BoxingReport":
        self.functions.update(other.functions)
        return self

    def table(self) -> str:
        rows = ["function              boxed  locals  names"]
        for name in sorted(self.functions):
            entry = self.functions[name]
            rows.append(f"{name:<20} {len(entry.boxed):>6} {entry.total_locals:>7}  "
                        f"{', '.join(entry.boxed) or '-'}")
        rows.append(f"{'total':<20} {self.boxed_count:>6} {self.total_locals:>7}")
        return "\n".join(rows)


def _always_exits(t: Term) -> bool:
    if isinstance(t, (Return, Goto)):
        return True
    if isinstance(t, Seq):
        return bool(t.items) and _always_exits(t.items[-1])
    if isinstance(t, If):
        return _always_exits(t.then) and _always_exits(t.else_)
    if isinstance(t, LetRec):
        return _always_exits(t.rest)
    if isinstance(t, Labelled):
        return _always_exits(t.body)
    return False


def _strip_unused_addresses(f: FunDecl) -> FunDecl:
    """Drop ``&x`` whose result is discarded or stored into a never-read local."""
    reads = {n.name for n in walk(f.body) if isinstance(n, (Var, AddrOf))}

    def visit(t: Term) -> Term:
        if isinstance(t, Seq):
            return replace(t, items=tuple(visit(i) for i in t.items if not isinstance(i, AddrOf)))
        if isinstance(t, Assign) and isinstance(t.expr, AddrOf) and t.name not in reads:
            return replace(t, expr=Const(UNIT, span=t.expr.span))
        return map_children(t, visit)

    return replace(f, body=visit(f.body))


class _Boxer:
    def __init__(self, supply: NameSupply, smart: bool = False):
        self.supply = supply
        self.smart = smart
        self.report = BoxingReport()

    def function(self, f: FunDecl) -> FunDecl:
        if self.smart:
            f = _strip_unused_addresses(f)
        own = extruded_variables(f, smart=self.smart)
        boxed = tuple(n for n in f.scope_names if n in own)
        cells: Dict[str, str] = {x: self.supply.reserve(f"p{x}") for x in boxed}
        self.report.functions[f.name] = FunctionBoxing(
            boxed, len(f.scope_names), tuple(cells.items()))
        if cells:
            logger.debug("boxing %s in %s", ", ".join(boxed), f.name)
            f = self.box(f, cells)
        return replace(f, body=self.inner(f.body))

    def inner(self, t: Term) -> Term:
        if isinstance(t, LetRec):
            return replace(t, funs=tuple(self.function(g) for g in t.funs), rest=self.inner(t.rest))
        return map_children(t, self.inner)

    def box(self, f: FunDecl, cells: Dict[str, str]) -> FunDecl:
        body = _rename(f.body, cells)
        new_locals: List[Tuple[str, str]] = []
        body = self.exits(body, f, list(cells.values()), new_locals)
        inits = []
        for x, px in cells.items():
            source: Term = Var(x, span=f.span) if x in f.params else Const(UNIT, span=f.span)
            inits.append(Assign(px, NativeCall("alloc", (source,), span=f.span), span=f.span))
        tail = [] if _always_exits(body) else _frees(cells.values(), f.span)
        locals_ = tuple(lv for lv in f.locals if lv[0] not in cells)
        locals_ += tuple((px, "int*") for px in cells.values()) + tuple(new_locals)
        return replace(f, body=seq(*inits, body, *tail, span=f.body.span), locals=locals_)

    def exits(self, t: Term, f: FunDecl, cells: List[str], new_locals) -> Term:
        if isinstance(t, Return):
            frees = _frees(cells, t.span)
            e = t.expr
            if isinstance(e, Const) or (isinstance(e, Var) and e.name not in cells):
                return seq(*frees, t, span=t.span)
            result = self.supply.fresh("r")
            new_locals.append((result, f.ret_type))
            return seq(Assign(result, e, span=t.span), *frees,
                       Return(Var(result, span=t.span), span=t.span), span=t.span)
        if isinstance(t, LetRec):
            return replace(t, rest=self.exits(t.rest, f, cells, new_locals))
        kids = children(t)
        if not kids:
            return t
        return rebuild(t, [self.exits(c, f, cells, new_locals) for c in kids])


def _frees(cells, span) -> List[Term]:
    return [NativeCall("free", (Var(px, span=span),), span=span) for px in cells]


def _rename(t: Term, cells: Dict[str, str]) -> Term:
    if isinstance(t, Var) and t.name in cells:
        return Deref(Var(cells[t.name], span=t.span), span=t.span)
    if isinstance(t, AddrOf) and t.name in cells:
        return Var(cells[t.name], span=t.span)
    if isinstance(t, Assign) and t.name in cells:
        return SetRef(Var(cells[t.name], span=t.span), _rename(t.expr, cells), span=t.span)
    return map_children(t, lambda c: _rename(c, cells))


def _program_names(p: Program) -> Set[str]:
    names = set(p.global_names)
    for f, _ in all_functions(p):
        names.add(f.name)
        names.update(f.scope_names)
    return names


def box_extruded(f: FunDecl, supply: Optional[NameSupply] = None,
                 smart: bool = False) -> Tuple[FunDecl, BoxingReport]:
    """Box the extruded variables of ``f`` and of its inner functions."""
    if supply is None:
        supply = NameSupply(n for g, _ in all_functions(Program((f,))) for n in (g.name, *g.scope_names))
    boxer = _Boxer(supply, smart)
    return boxer.function(f), boxer.report


def box_program(p: Program, smart: bool = False) -> Tuple[Program, BoxingReport]:
    for f, _ in all_functions(p):
        for node in walk(f.body):
            if isinstance(node, AddrOf) and node.name in p.global_names:
                raise BoxingUnsupported(f"cannot take the address of global {node.name}", node.span)
    boxer = _Boxer(NameSupply(_program_names(p)), smart)
    boxed = p.with_functions(boxer.function(f) for f in p.functions)
    report = boxer.report
    logger.info("boxing: %d of %d variables boxed", report.boxed_count, report.total_locals)
    return boxed, report


def assert_no_extrusion(p: Program, smart: bool = False) -> Set[str]:
    """Names of variables still extruded anywhere in ``p`` (empty when none)."""
    names: Set[str] = set()
    for f, _ in all_functions(p):
        names |= extruded_variables(f, smart=smart)
    return names
