"""
Lambda-Lifting Pass

Parameter lifting and block floating for the inner functions produced by
splitting (and for hand-written inner functions).

Lifting is incremental: the free variables of inner functions become trailing
parameters and trailing arguments at every call site, which may create new free
variables in the callers; the process iterates to a fixed point. A variable may
only be lifted into inner functions that are called exclusively in tail
position, otherwise the copies would be observable.

Version: 1.0.0
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Set, Tuple

from .errors import InnerNotClosed, NotLiftable, SourceSpan
from .lang import (
    AddrOf, Assign, Call, FunDecl, LetRec, Program, Seq, Term, Var, all_functions,
    extruded_variables, fun_free_variables, iter_call_sites, map_children, walk, walk_local,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CallPartition:
    """Call sites of one inner function, split by position."""
    tail: Tuple[Call, ...] = ()
    non_tail: Tuple[Call, ...] = ()

    @property
    def tail_spans(self) -> List[Optional[SourceSpan]]:
        return [c.span for c in self.tail]

    @property
    def non_tail_spans(self) -> List[Optional[SourceSpan]]:
        return [c.span for c in self.non_tail]


def tail_call_sites(g: FunDecl, h: str) -> CallPartition:
    """Every call to ``h`` inside ``g`` (and its inner functions), tail or not."""
    tail: List[Call] = []
    non_tail: List[Call] = []
    for site in iter_call_sites(g):
        if site.call.fname == h:
            (tail if site.tail else non_tail).append(site.call)
    return CallPartition(tuple(tail), tuple(non_tail))


@dataclass(frozen=True)
class Liftability:
    liftable: bool
    witness: Optional[SourceSpan] = None
    callee: str = ""
    reason: str = ""


@dataclass
class LiftabilityReport:
    """Verdict for every (function, variable) pair."""
    verdicts: Dict[Tuple[str, str], Liftability] = field(default_factory=dict)

    @property
    def all_liftable(self) -> bool:
        return all(v.liftable for v in self.verdicts.values())

    def failures(self) -> List[Tuple[str, str, Liftability]]:
        return [(g, x, v) for (g, x), v in self.verdicts.items() if not v.liftable]

    def verdict(self, function: str, variable: str) -> Liftability:
        return self.verdicts[(function, variable)]


@dataclass
class LiftingReport:
    lifted: Set[Tuple[str, str]] = field(default_factory=set)
    total_locals: int = 0
    added: Dict[str, List[str]] = field(default_factory=dict)
    kept_local: Dict[str, List[str]] = field(default_factory=dict)

    @property
    def lifted_count(self) -> int:
        return len(self.lifted)

    @property
    def added_count(self) -> int:
        return sum(len(v) for v in self.added.values())

    @property
    def lifted_fraction(self) -> float:
        return self.lifted_count / self.total_locals if self.total_locals else 0.0

    def table(self) -> str:
        rows = ["function              added parameters"]
        for name in sorted(self.added):
            rows.append(f"{name:<20}  {', '.join(self.added[name])}")
        rows.append(f"lifted {self.lifted_count} of {self.total_locals} variables "
                    f"({100 * self.lifted_fraction:.1f}%)")
        return "\n".join(rows)


def _mentions(t: Term) -> Set[str]:
    return {n.name for n in walk_local(t) if isinstance(n, (Var, Assign, AddrOf))}


class _Family:
    """A top-level function with all of its nested inner functions."""

    def __init__(self, top: FunDecl, globals_: Set[str]):
        self.top = top
        self.globals = globals_
        self.funs: Dict[str, FunDecl] = {}
        self.parent: Dict[str, Optional[str]] = {}
        for f, parent in all_functions(Program((top,))):
            self.funs[f.name] = f
            self.parent[f.name] = parent

    def owner(self, h: str, v: str) -> Optional[str]:
        name = self.parent[h]
        while name is not None:
            if v in self.funs[name].scope_names:
                return name
            name = self.parent[name]
        return None

    def encloses(self, g: str, h: str) -> bool:
        """Whether ``h`` is defined, at any depth, inside ``g``."""
        name = self.parent[h]
        while name is not None:
            if name == g:
                return True
            name = self.parent[name]
        return False

    def inner_calls(self, f: FunDecl) -> List[str]:
        return [n.fname for n in walk_local(f.body)
                if isinstance(n, Call) and n.fname in self.funs and n.fname != self.top.name]

    def needs(self) -> Dict[str, List[str]]:
        """Variables to add to each inner function, in discovery order."""
        added: Dict[str, List[str]] = {name: [] for name in self.funs if name != self.top.name}
        uses = {name: _mentions(f.body) for name, f in self.funs.items()}
        calls = {name: self.inner_calls(f) for name, f in self.funs.items()}
        changed = True
        while changed:
            changed = False
            for name in added:
                f = self.funs[name]
                wanted = set(uses[name])
                for callee in calls[name]:
                    wanted.update(added[callee])
                wanted -= set(f.scope_names) | set(added[name]) | self.globals
                for v in sorted(wanted):
                    if self.owner(name, v) is None:
                        continue
                    added[name].append(v)
                    changed = True
        return {name: vs for name, vs in added.items() if vs}

    def variable_type(self, h: str, v: str) -> str:
        owner = self.funs[self.owner(h, v)]
        if v in owner.params:
            return owner.param_type(owner.params.index(v))
        return dict(owner.locals).get(v, "int")


def _first_mention_is_assignment(f: FunDecl, v: str) -> bool:
    items = list(f.body.items) if isinstance(f.body, Seq) else [f.body]
    while items:
        item = items.pop(0)
        if isinstance(item, LetRec):
            items[:0] = list(item.rest.items) if isinstance(item.rest, Seq) else [item.rest]
            continue
        if v in _mentions(item):
            return isinstance(item, Assign) and item.name == v and v not in _mentions(item.expr)
    return False


def _keep_single_use_locals(top: FunDecl, report: Optional[LiftingReport] = None) -> FunDecl:
    """Move a local used by exactly one inner function (and not by its owner) into it."""
    family = _Family(top, set())
    moves: Dict[str, List[Tuple[str, str]]] = {}
    removed: Dict[str, Set[str]] = {}
    for g in family.funs.values():
        for v, ty in g.locals:
            if v in _mentions(g.body):
                continue
            users = [h for h in family.funs.values()
                     if h.name != g.name and v in _mentions(h.body) and family.owner(h.name, v) == g.name]
            if len(users) == 1 and _first_mention_is_assignment(users[0], v):
                moves.setdefault(users[0].name, []).append((v, ty))
                removed.setdefault(g.name, set()).add(v)
                if report is not None:
                    report.kept_local.setdefault(users[0].name, []).append(v)
    if not moves:
        return top

    def rewrite(f: FunDecl) -> FunDecl:
        locals_ = tuple(lv for lv in f.locals if lv[0] not in removed.get(f.name, ()))
        locals_ += tuple(moves.get(f.name, ()))
        return replace(f, locals=locals_, body=inner_rewrite(f.body))

    def inner_rewrite(t: Term) -> Term:
        if isinstance(t, LetRec):
            return replace(t, funs=tuple(rewrite(g) for g in t.funs), rest=inner_rewrite(t.rest))
        return map_children(t, inner_rewrite)

    return rewrite(top)


def _address_taken_at(f: FunDecl, v: str) -> Optional[SourceSpan]:
    for node in walk(f.body):
        if isinstance(node, AddrOf) and node.name == v:
            return node.span
    return None


def _first_non_tail_inner_call(family: _Family, g: FunDecl) -> Optional[Call]:
    """A call, anywhere in ``g``, to one of ``g``'s inner functions that is not a tail call."""
    inner = {name for name in family.funs if family.encloses(g.name, name)}
    for site in iter_call_sites(g):
        if not site.tail and site.call.fname in inner:
            return site.call
    return None


def _liftability(family: _Family, added: Dict[str, List[str]]) -> Dict[Tuple[str, str], Liftability]:
    verdicts: Dict[Tuple[str, str], Liftability] = {}
    for g in family.funs.values():
        bad = _first_non_tail_inner_call(family, g)
        for x in g.scope_names:
            if bad is None:
                verdicts[(g.name, x)] = Liftability(True)
            else:
                verdicts[(g.name, x)] = Liftability(False, bad.span, bad.fname)
    for h, variables in added.items():
        for v in variables:
            owner = family.owner(h, v)
            if owner in family.funs and v in extruded_variables(family.funs[owner]):
                verdicts[(owner, v)] = Liftability(False, _address_taken_at(family.funs[owner], v), h,
                                                   reason=f"its address is taken and {h} uses it")
    return verdicts


def check_liftable(p: Program) -> LiftabilityReport:
    """Liftability of every parameter and local of every function of ``p``."""
    report = LiftabilityReport()
    for top in p.functions:
        family = _Family(top, p.global_names)
        report.verdicts.update(_liftability(family, family.needs()))
    return report


def _lift_family(top: FunDecl, globals_: Set[str], report: LiftingReport) -> FunDecl:
    family = _Family(top, globals_)
    added = family.needs()
    if not added:
        return top
    lifted = {(family.owner(h, v), v) for h, variables in added.items() for v in variables}
    failures = [(key, v) for key, v in _liftability(family, added).items() if not v.liftable]
    # report a variable that is actually lifted before a bystander
    failures.sort(key=lambda item: item[0] not in lifted)
    if failures:
        (g, x), verdict = failures[0]
        raise NotLiftable(x, g, verdict.witness, verdict.callee, verdict.reason)
    for h, variables in added.items():
        logger.debug("lifting %s into %s", ", ".join(variables), h)
        report.added[h] = list(variables)
        for v in variables:
            report.lifted.add((family.owner(h, v), v))

    def call(t: Term) -> Term:
        # inner function bodies are rewritten by ``nested``
        if isinstance(t, LetRec):
            return replace(t, rest=call(t.rest))
        t = map_children(t, call)
        if isinstance(t, Call) and t.fname in added:
            extra = tuple(Var(v, span=t.span) for v in added[t.fname])
            return replace(t, args=t.args + extra)
        return t

    def rewrite(f: FunDecl) -> FunDecl:
        body = call(f.body)
        if f.name in added:
            types = tuple(f.param_type(i) for i in range(len(f.params)))
            types += tuple(family.variable_type(f.name, v) for v in added[f.name])
            f = replace(f, params=f.params + tuple(added[f.name]), param_types=types)
        return replace(f, body=nested(body))

    def nested(t: Term) -> Term:
        if isinstance(t, LetRec):
            return replace(t, funs=tuple(rewrite(g) for g in t.funs), rest=nested(t.rest))
        return map_children(t, nested)

    return rewrite(top)


def lift_parameters(p: Program, liveness_lite: bool = True) -> Tuple[Program, LiftingReport]:
    """Lift free variables of inner functions to a fixed point.

    Raises ``NotLiftable`` when a variable would be lifted into an inner
    function that has a non-tail call site.
    """
    report = LiftingReport()
    report.total_locals = sum(len(f.scope_names) for f, _ in all_functions(p) if f.is_cps)
    functions = []
    for top in p.functions:
        if liveness_lite:
            top = _keep_single_use_locals(top, report)
        functions.append(_lift_family(top, p.global_names, report))
    logger.info("lifting: %d variables lifted, %d parameters added",
                report.lifted_count, report.added_count)
    return p.with_functions(functions), report


def free_in_inner(p: Program) -> Set[Tuple[str, str]]:
    """(owner, variable) pairs free in some inner function: what closure conversion would box."""
    out: Set[Tuple[str, str]] = set()
    for top in p.functions:
        family = _Family(top, p.global_names)
        for name, f in family.funs.items():
            if family.parent[name] is None:
                continue
            for v in fun_free_variables(f) - p.global_names:
                owner = family.owner(name, v)
                if owner is not None:
                    out.add((owner, v))
    return out


# --------------------------------------------------------------------------
# Block floating

def _drop_letrec(t: Term) -> Term:
    if isinstance(t, LetRec):
        return _drop_letrec(t.rest)
    if isinstance(t, Seq):
        items: List[Term] = []
        for item in t.items:
            stripped = _drop_letrec(item)
            if isinstance(item, LetRec) and isinstance(stripped, Seq):
                items.extend(stripped.items)
            else:
                items.append(stripped)
        return replace(t, items=tuple(items))
    return map_children(t, _drop_letrec)


def float_blocks(p: Program) -> Program:
    """Move every (closed) inner function to the top level."""
    functions: List[FunDecl] = []
    for f, parent in all_functions(p):
        if parent is not None:
            leaked = fun_free_variables(f) - p.global_names
            if leaked:
                raise InnerNotClosed(f.name, leaked, f.span)
        functions.append(replace(f, body=_drop_letrec(f.body)))
    return p.with_functions(functions)


def alpha_view(p: Program) -> Program:
    """Rename variables shared by several top-level functions to ``name<k>``."""
    owners: Dict[str, List[str]] = {}
    for f in p.functions:
        for v in f.scope_names:
            owners.setdefault(v, []).append(f.name)
    functions = []
    for f in p.functions:
        mapping = {v: f"{v}{fs.index(f.name) + 1}" for v, fs in owners.items()
                   if len(fs) > 1 and f.name in fs}
        if not mapping:
            functions.append(f)
            continue

        def rename(t: Term, mapping=mapping) -> Term:
            t = map_children(t, lambda c: rename(c, mapping))
            if isinstance(t, (Var, Assign, AddrOf)) and t.name in mapping:
                return replace(t, name=mapping[t.name])
            return t

        functions.append(replace(
            f,
            params=tuple(mapping.get(x, x) for x in f.params),
            locals=tuple((mapping.get(n, n), ty) for n, ty in f.locals),
            body=rename(f.body),
        ))
    return p.with_functions(functions)
