"""
Splitting Pass

Brings every cps function into CPS-convertible form in two steps:

1. ``make_flow_explicit`` adds a ``goto`` after every cps call that is not
   already followed by a tail call, turns loops that contain cps calls into
   ``if``/``goto`` form and makes every labelled block end with ``return`` or
   ``goto``.
2. ``eliminate_gotos`` turns each labelled block into an inner cps function and
   each ``goto l;`` into ``return l();``.

Only subtrees containing cps calls, gotos or labels are touched; direct-style
regions are left as written.

Version: 1.0.0
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, FrozenSet, Iterable, List, Optional, Set, Tuple

from .errors import NotConvertible, SourceSpan
from .lang import (
    CPS, UNIT, Assign, Break, Call, Const, FunDecl, Goto, If, Labelled, LetRec,
    NameSupply, Program, Return, Seq, SetRef, Term, Var, While, all_functions, children,
    extruded_variables, function_kinds, is_cps_call, map_children, seq, walk_local,
)
from .natives import PRIMITIVES

logger = logging.getLogger(__name__)

# Exit of a statement list: a label to jump to, or None for the end of the function.
Exit = Optional[str]


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


def _ends_in_jump(t: Term, in_loop: bool) -> bool:
    if isinstance(t, (Return, Goto)):
        return True
    if isinstance(t, Break):
        return in_loop
    if isinstance(t, Seq):
        return bool(t.items) and _ends_in_jump(t.items[-1], in_loop)
    if isinstance(t, If):
        return _ends_in_jump(t.then, in_loop) and _ends_in_jump(t.else_, in_loop)
    return False


def _cps_statement(t: Term, kinds: Dict[str, str]) -> Optional[Call]:
    """The cps call performed by statement ``t``, if ``t`` is a cps-call statement."""
    if is_cps_call(t, kinds):
        return t
    if isinstance(t, Assign) and is_cps_call(t.expr, kinds):
        return t.expr
    if isinstance(t, SetRef) and is_cps_call(t.value, kinds):
        return t.value
    return None


def _unit_return(t: Term) -> bool:
    return isinstance(t, Return) and isinstance(t.expr, Const) and t.expr.value is UNIT


def _items(t: Term) -> List[Term]:
    return list(t.items) if isinstance(t, Seq) else [t]


def _next_labelled(items: List[Term], start: int) -> Optional[int]:
    """Index of the first statement from ``start`` on that holds a label; the ones before it are dead."""
    for j in range(start, len(items)):
        if any(isinstance(n, Labelled) for n in walk_local(items[j])):
            return j
    return None


class _FlowBuilder:
    def __init__(self, f: FunDecl, kinds: Dict[str, str], shared: FrozenSet[str],
                 supply: NameSupply):
        self.f = f
        self.kinds = kinds
        self.shared = shared
        self.supply = supply
        self.new_locals: List[Tuple[str, str]] = []
        self.labels: Dict[str, str] = {}

    def fresh_label(self, base: str) -> str:
        label = self.supply.fresh(f"{self.f.name}__{base}")
        logger.debug("synthesized label %s", label)
        return label

    def needs(self, t: Term, in_loop: bool) -> bool:
        if is_cps_call(t, self.kinds) or isinstance(t, (Goto, Labelled)):
            return True
        if isinstance(t, Break):
            return in_loop
        if isinstance(t, While):
            return self.needs(t.cond, in_loop) or self.needs(t.body, False)
        if isinstance(t, LetRec):
            return self.needs(t.rest, in_loop)
        return any(self.needs(c, in_loop) for c in children(t))

    def exits(self, exit: Exit, span) -> List[Term]:
        return [Goto(exit, span=span)] if exit is not None else []

    def non_shared_args(self, call: Term) -> bool:
        return all(isinstance(a, Var) and a.name not in self.shared for a in call.args)

    def already_convertible(self, rest: List[Term]) -> bool:
        if not rest:
            return False
        first = rest[0]
        if _unit_return(first):
            return True
        if isinstance(first, Return) and is_cps_call(first.expr, self.kinds):
            return self.non_shared_args(first.expr)
        if is_cps_call(first, self.kinds) and len(rest) > 1 and _unit_return(rest[1]):
            return self.non_shared_args(first)
        return False

    def private_target(self, s: Term) -> List[Term]:
        """Route the result of a cps call through a fresh local when the target is shared."""
        if isinstance(s, Assign) and s.name not in self.shared:
            return [s]
        if isinstance(s, Assign) or isinstance(s, SetRef):
            tmp = self.supply.fresh("tmp")
            self.new_locals.append((tmp, "int"))
            value = s.expr if isinstance(s, Assign) else s.value
            store = replace(s, expr=Var(tmp, span=s.span)) if isinstance(s, Assign) \
                else replace(s, value=Var(tmp, span=s.span))
            return [Assign(tmp, value, span=s.span), store]
        return [s]

    def block(self, items: List[Term], exit: Exit, brk: Exit) -> List[Term]:
        out: List[Term] = []
        items = list(items)
        i = 0
        while i < len(items):
            s = items[i]
            rest = items[i + 1:]
            if isinstance(s, (Return, Goto)) or (isinstance(s, Break) and brk is not None):
                out.append(Goto(brk, span=s.span) if isinstance(s, Break) else self.relabel(s))
                resume = _next_labelled(items, i + 1)
                if resume is None:
                    return out
                i = resume
                continue
            if not self.needs(s, brk is not None):
                out.append(s)
                i += 1
                continue
            if isinstance(s, Seq):
                items = items[:i] + list(s.items) + rest
                continue
            if _cps_statement(s, self.kinds) is not None:
                head, *moved = self.private_target(s)
                rest = moved + rest
                out.append(head)
                if not rest:
                    out.extend(self.exits(exit, s.span) or [Return(Const(UNIT), span=s.span)])
                    return out
                if isinstance(rest[0], Goto) or self.already_convertible(rest):
                    items = items[:i] + [head] + rest
                    i += 1
                    continue
                label = self.fresh_label("l")
                out.append(Goto(label, span=s.span))
                out.append(Labelled(label, Seq(tuple(self.block(rest, exit, brk)), span=s.span), span=s.span))
                return out
            if isinstance(s, While):
                top = self.fresh_label("while_label")
                done = self.fresh_label("break_label")
                body = self.block(_items(s.body), top, done)
                loop = If(s.cond, Seq(tuple(body), span=s.span), Seq((Goto(done, span=s.span),)), span=s.span)
                out.append(Labelled(top, Seq((loop,), span=s.span), span=s.span))
                out.append(Labelled(done, Seq(tuple(self.block(rest, exit, brk)), span=s.span), span=s.span))
                return out
            if isinstance(s, If):
                in_loop = brk is not None
                jumps = all(_ends_in_jump(b, in_loop) for b in (s.then, s.else_) if self.needs(b, in_loop))
                if rest and jumps:
                    # transformed branches never fall through: the rest stays inline
                    out.append(replace(s, then=self.branch(s.then, None, brk),
                                       else_=self.branch(s.else_, None, brk)))
                    i += 1
                    continue
                join = exit
                if rest:
                    join = self.fresh_label("done")
                then = self.branch(s.then, join, brk)
                else_ = self.branch(s.else_, join, brk)
                out.append(replace(s, then=then, else_=else_))
                if rest:
                    out.append(Labelled(join, Seq(tuple(self.block(rest, exit, brk)), span=s.span), span=s.span))
                    return out
                i += 1
                continue
            if isinstance(s, Labelled):
                label = self.labels[s.label]
                body = self.block(_items(s.body) + rest, exit, brk)
                out.append(Labelled(label, Seq(tuple(body), span=s.span), span=s.span))
                return out
            if isinstance(s, LetRec):
                body = self.block(_items(s.rest) + rest, exit, brk)
                out.append(replace(s, rest=Seq(tuple(body), span=s.span)))
                return out
            raise NotConvertible([(self.f.name, s.span, f"unexpected statement {type(s).__name__}")])
        if exit is not None and not (out and _always_exits(out[-1])):
            out.append(Goto(exit))
        return out

    def branch(self, t: Term, exit: Exit, brk: Exit) -> Term:
        if not self.needs(t, brk is not None):
            return t
        return Seq(tuple(self.block(_items(t), exit, brk)), span=getattr(t, "span", None))

    def relabel(self, t: Term) -> Term:
        if isinstance(t, Goto):
            return replace(t, label=self.labels.get(t.label, t.label))
        return t


def make_flow_explicit(f: FunDecl, kinds: Optional[Dict[str, str]] = None,
                       shared: Iterable[str] = (), supply: Optional[NameSupply] = None) -> FunDecl:
    """Insert gotos after cps calls and desugar loops that contain cps calls."""
    if kinds is None:
        kinds = function_kinds(Program((f,)))
    if supply is None:
        supply = NameSupply(_names(Program((f,))))
    if not f.is_cps or not any(isinstance(n, (Goto, Labelled)) or is_cps_call(n, kinds)
                               for n in walk_local(f.body)):
        return f
    builder = _FlowBuilder(f, kinds, frozenset(shared) | extruded_variables(f), supply)
    for node in walk_local(f.body):
        if isinstance(node, Labelled):
            builder.labels[node.label] = supply.reserve(f"{f.name}__{node.label}")
    body = Seq(tuple(builder.block(_items(f.body), None, None)), span=f.body.span)
    return replace(f, body=body, locals=f.locals + tuple(builder.new_locals))


# --------------------------------------------------------------------------
# goto elimination

class _GotoEliminator:
    def __init__(self, f: FunDecl):
        self.f = f
        self.hoisted: List[FunDecl] = []

    def strip(self, t: Term) -> Term:
        if isinstance(t, Goto):
            return Return(Call(t.label, (), span=t.span), span=t.span)
        if isinstance(t, Labelled):
            self.hoist(t)
            return Return(Call(t.label, (), span=t.span), span=t.span)
        if isinstance(t, LetRec):
            self.hoisted.extend(t.funs)
            return self.strip(t.rest)
        if isinstance(t, Seq):
            items: List[Term] = []
            previous: Optional[Term] = None
            for item in t.items:
                if isinstance(item, Labelled):
                    reachable = previous is None or not _always_exits(previous)
                    self.hoist(item)
                    if reachable:
                        items.append(Return(Call(item.label, (), span=item.span), span=item.span))
                else:
                    stripped = self.strip(item)
                    items.extend(stripped.items if isinstance(stripped, Seq) and isinstance(item, LetRec)
                                 else [stripped])
                previous = item
            return replace(t, items=tuple(items))
        return map_children(t, self.strip)

    def hoist(self, t: Labelled):
        body = self.strip(t.body)
        self.hoisted.append(FunDecl(t.label, (), body if isinstance(body, Seq) else seq(body),
                                    CPS, self.f.ret_type, span=t.span))


def eliminate_gotos(f: FunDecl) -> FunDecl:
    """Turn labelled blocks into inner cps functions and gotos into tail calls."""
    if not any(isinstance(n, (Goto, Labelled)) for n in walk_local(f.body)):
        return f
    eliminator = _GotoEliminator(f)
    rest = eliminator.strip(f.body)
    body = LetRec(tuple(eliminator.hoisted), rest, span=f.body.span)
    return replace(f, body=Seq((body,), span=f.body.span))


# --------------------------------------------------------------------------
# Whole-program driver and convertibility check

@dataclass
class SplitReport:
    """Inner functions generated per split function."""
    generated: Dict[str, List[str]] = field(default_factory=dict)

    @property
    def generated_count(self) -> int:
        return sum(len(v) for v in self.generated.values())


def _names(p: Program) -> Set[str]:
    names = set(p.global_names) | set(PRIMITIVES)
    for g, _ in all_functions(p):
        names.add(g.name)
        names.update(g.scope_names)
    return names


def split_function(f: FunDecl, kinds: Dict[str, str], shared: FrozenSet[str],
                   supply: NameSupply, report: Optional[SplitReport] = None) -> FunDecl:
    def inner(t: Term) -> Term:
        if isinstance(t, LetRec):
            funs = tuple(split_function(g, kinds, shared, supply, report) for g in t.funs)
            return replace(t, funs=funs, rest=inner(t.rest))
        return map_children(t, inner)

    f = replace(f, body=inner(f.body))
    if not f.is_cps:
        return f
    before = {g.name for g in f.inner}
    f = eliminate_gotos(make_flow_explicit(f, kinds, shared, supply))
    if report is not None:
        added = [g.name for g in f.inner if g.name not in before]
        if added:
            report.generated[f.name] = added
    return f


def split_program(p: Program) -> Tuple[Program, SplitReport]:
    kinds = function_kinds(p)
    supply = NameSupply(_names(p))
    shared = frozenset(p.global_names)
    report = SplitReport()
    split = p.with_functions(split_function(f, kinds, shared, supply, report) for f in p.functions)
    logger.info("splitting: %d inner functions generated", report.generated_count)
    return split, report


@dataclass(frozen=True)
class ConvertibilityVerdict:
    sites: Tuple[Tuple[str, Optional[SourceSpan], str], ...] = ()

    @property
    def convertible(self) -> bool:
        return not self.sites

    def raise_for_sites(self):
        if self.sites:
            raise NotConvertible(list(self.sites))


class _ConvertibilityChecker:
    def __init__(self, p: Program):
        self.kinds = function_kinds(p)
        self.globals = p.global_names
        self.sites: List[Tuple[str, Optional[SourceSpan], str]] = []

    def function(self, f: FunDecl):
        self.shared = set(self.globals) | extruded_variables(f)
        self.owner = f.name
        self.visit(f.body)

    def flag(self, span, reason: str):
        self.sites.append((self.owner, span, reason))

    def variable_args(self, call: Call) -> bool:
        return all(isinstance(a, Var) and a.name not in self.shared for a in call.args)

    def visit(self, t: Term):
        if isinstance(t, LetRec):
            self.visit(t.rest)
            return
        if isinstance(t, Return):
            return
        if isinstance(t, Seq):
            for i, item in enumerate(t.items):
                call = _cps_statement(item, self.kinds)
                if call is not None:
                    self.sequence(item, t.items[i + 1:])
                else:
                    self.visit(item)
            return
        if _cps_statement(t, self.kinds) is not None:
            self.flag(t.span, "cps call not followed by a tail call")
            return
        for child in children(t):
            self.visit(child)

    def sequence(self, s: Term, rest: Tuple[Term, ...]):
        if isinstance(s, SetRef) or (isinstance(s, Assign) and s.name in self.shared):
            self.flag(s.span, "result of a cps call stored into a shared variable")
            return
        if not rest:
            self.flag(s.span, "cps call not followed by a tail call")
            return
        nxt = rest[0]
        if _unit_return(nxt):
            return
        if isinstance(nxt, Return) and is_cps_call(nxt.expr, self.kinds):
            if not self.variable_args(nxt.expr):
                self.flag(nxt.span, "arguments of the continuation call must be non-shared variables")
            return
        if is_cps_call(nxt, self.kinds) and len(rest) > 1 and _unit_return(rest[1]):
            if not self.variable_args(nxt):
                self.flag(nxt.span, "arguments of the continuation call must be non-shared variables")
            return
        self.flag(nxt.span or s.span, "cps call followed by direct-style code")


def check_cps_convertible(p: Program) -> ConvertibilityVerdict:
    checker = _ConvertibilityChecker(p)
    for f, _ in all_functions(p):
        if f.is_cps:
            checker.function(f)
    return ConvertibilityVerdict(tuple(checker.sites))
