"""
CPS Conversion

Translates CPS-convertible, lifted programs into the continuation IR executed by
the runtime. Only tail positions change:

    return a;                        ->  InvokeValue(a)
    return f(a1..an);                ->  PushInvoke(f, a1..an)
    x = f(a1..an); return g(x, y..); ->  PushPushInvoke(second=g(y..) receiving x,
                                                        first=f(a1..an))

The arguments ``y..`` of the second call are evaluated when the continuation is
built (early evaluation); they must be non-shared variables.

Version: 1.0.0
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Set, Tuple

from .errors import NotConvertible, SourceSpan
from .frontend import format_expr
from .lang import (
    AddrOf, Assign, Call, FunDecl, GlobalDecl, If, LetRec, Program, Return, Seq, Term, Var, While,
    all_functions, children, dump, dump_function, format_value, function_kinds, is_cps_call,
)
from .natives import PRIMITIVES
from .splitting import _cps_statement, _unit_return, check_cps_convertible

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Frame:
    """A continuation frame to push: target, saved arguments and receive slots."""
    target: str
    args: Tuple[Term, ...]
    receive: Tuple[int, ...] = ()
    descriptor: int = -1


class Terminator(Term):
    __slots__ = ()


@dataclass(frozen=True)
class InvokeValue(Terminator):
    expr: Term
    span: Optional[SourceSpan] = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class PushInvoke(Terminator):
    frame: Frame
    span: Optional[SourceSpan] = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class PushPushInvoke(Terminator):
    second: Frame
    first: Frame
    span: Optional[SourceSpan] = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class Descriptor:
    id: int
    name: str
    arity: Optional[int]
    receive: Tuple[int, ...] = ()

    @property
    def is_primitive(self) -> bool:
        return self.name in PRIMITIVES


class FunTable:
    """Dense, build-stable table of function descriptors."""

    def __init__(self):
        self.descriptors: List[Descriptor] = []
        self._index: Dict[Tuple[str, Tuple[int, ...]], int] = {}

    def add(self, name: str, arity: Optional[int], receive: Tuple[int, ...] = ()) -> Descriptor:
        key = (name, receive)
        if key in self._index:
            return self.descriptors[self._index[key]]
        descriptor = Descriptor(len(self.descriptors), name, arity, receive)
        self.descriptors.append(descriptor)
        self._index[key] = descriptor.id
        return descriptor

    def lookup(self, name: str, receive: Tuple[int, ...] = ()) -> Descriptor:
        return self.descriptors[self._index[(name, receive)]]

    def __len__(self) -> int:
        return len(self.descriptors)

    def __iter__(self):
        return iter(self.descriptors)


@dataclass(frozen=True)
class CpsFunction:
    name: str
    params: Tuple[str, ...]
    body: Seq
    ret_type: str = "int"
    param_types: Tuple[str, ...] = ()
    locals: Tuple[Tuple[str, str], ...] = ()
    descriptor: int = -1


@dataclass
class CpsProgram:
    functions: Tuple[CpsFunction, ...]
    natives: Tuple[FunDecl, ...]
    globals: Tuple[GlobalDecl, ...]
    entry: str
    funtable: FunTable

    def function(self, name: str) -> CpsFunction:
        for f in self.functions:
            if f.name == name:
                return f
        raise KeyError(name)


def ir_children(t: Term) -> List[Term]:
    if isinstance(t, InvokeValue):
        return [t.expr]
    if isinstance(t, PushInvoke):
        return list(t.frame.args)
    if isinstance(t, PushPushInvoke):
        return list(t.second.args) + list(t.first.args)
    return children(t)


def ir_walk(t: Term):
    stack = [t]
    while stack:
        node = stack.pop()
        yield node
        stack.extend(reversed(ir_children(node)))


class _Converter:
    def __init__(self, p: Program, table: FunTable):
        self.kinds = function_kinds(p)
        self.arity = {f.name: len(f.params) for f, _ in all_functions(p)}
        self.table = table
        self.function_name = ""

    def frame(self, call: Call, receive_into: Optional[str] = None) -> Frame:
        receive: Tuple[int, ...] = ()
        if receive_into is not None:
            receive = tuple(i for i, a in enumerate(call.args)
                            if isinstance(a, Var) and a.name == receive_into)
        saved = tuple(a for i, a in enumerate(call.args) if i not in receive)
        descriptor = self.table.add(call.fname, self.arity.get(call.fname), receive)
        return Frame(call.fname, saved, receive, descriptor.id)

    def fail(self, span, reason: str):
        raise NotConvertible([(self.function_name, span, reason)])

    def block(self, t: Term) -> Seq:
        items = list(t.items) if isinstance(t, Seq) else [t]
        return Seq(tuple(self.statements(items)), span=getattr(t, "span", None))

    def statements(self, items: List[Term]) -> List[Term]:
        out: List[Term] = []
        for i, s in enumerate(items):
            if isinstance(s, Return):
                if is_cps_call(s.expr, self.kinds):
                    out.append(PushInvoke(self.frame(s.expr), span=s.span))
                else:
                    out.append(InvokeValue(s.expr, span=s.span))
                return out
            call = _cps_statement(s, self.kinds)
            if call is not None:
                out.append(self.continuation(s, call, items[i + 1:]))
                return out
            if isinstance(s, If):
                out.append(replace(s, then=self.block(s.then), else_=self.block(s.else_)))
            elif isinstance(s, While):
                out.append(replace(s, body=self.block(s.body)))
            elif isinstance(s, Seq):
                out.append(self.block(s))
            elif isinstance(s, LetRec):
                self.fail(s.span, "inner function left after lifting")
            else:
                out.append(s)
        return out

    def continuation(self, s: Term, call: Call, rest: List[Term]) -> Terminator:
        receiver = s.name if isinstance(s, Assign) else None
        first = self.frame(call)
        if not rest:
            self.fail(s.span, "cps call not followed by a tail call")
        nxt = rest[0]
        if _unit_return(nxt):
            return PushInvoke(first, span=s.span)
        second_call = None
        if isinstance(nxt, Return) and is_cps_call(nxt.expr, self.kinds):
            second_call = nxt.expr
        elif is_cps_call(nxt, self.kinds) and len(rest) > 1 and _unit_return(rest[1]):
            second_call = nxt
        if second_call is None:
            self.fail(nxt.span or s.span, "cps call followed by direct-style code")
        return PushPushInvoke(self.frame(second_call, receiver), first, span=s.span)

    def function(self, f: FunDecl) -> CpsFunction:
        self.function_name = f.name
        return CpsFunction(f.name, f.params, self.block(f.body), f.ret_type,
                           tuple(f.param_type(i) for i in range(len(f.params))), f.locals,
                           self.table.lookup(f.name).id)


def cps_convert(p: Program) -> CpsProgram:
    """Convert a lifted, CPS-convertible program into continuation IR."""
    nested = [f.name for f, parent in all_functions(p) if parent is not None]
    if nested:
        raise NotConvertible([(nested[0], None, "inner function left after lifting")])
    check_cps_convertible(p).raise_for_sites()
    table = FunTable()
    for name, (lo, hi, _) in PRIMITIVES.items():
        table.add(name, hi if lo == hi else None)
    for f in p.functions:
        if f.is_cps:
            table.add(f.name, len(f.params))
    converter = _Converter(p, table)
    functions = tuple(converter.function(f) for f in p.functions if f.is_cps)
    natives = tuple(f for f in p.functions if not f.is_cps)
    logger.info("cps conversion: %d functions, %d descriptors", len(functions), len(table))
    return CpsProgram(functions, natives, p.globals, p.entry, table)


def _address_taken(f: CpsFunction) -> Set[str]:
    own = set(f.params) | {name for name, _ in f.locals}
    return {n.name for n in ir_walk(f.body) if isinstance(n, AddrOf) and n.name in own}


def verify_early_evaluation_safety(ir: CpsProgram) -> List[Tuple[str, Optional[SourceSpan], str]]:
    """Sites where an early-evaluated argument is not a non-shared variable.

    Shared variables are the globals and the variables of the function whose
    address is taken.
    """
    globals_ = {g.name for g in ir.globals}
    sites: List[Tuple[str, Optional[SourceSpan], str]] = []
    for f in ir.functions:
        shared = globals_ | _address_taken(f)
        for node in ir_walk(f.body):
            if not isinstance(node, PushPushInvoke):
                continue
            for arg in node.second.args:
                if not isinstance(arg, Var):
                    sites.append((f.name, node.span, "early-evaluated argument is not a variable"))
                elif arg.name in shared:
                    sites.append((f.name, node.span, f"early-evaluated argument {arg.name} is shared"))
    return sites


# --------------------------------------------------------------------------
# Canonical text

def _frame_text(frame: Frame) -> str:
    args = ", ".join(_arg_text(a) for a in frame.args)
    receive = f" receive@{','.join(map(str, frame.receive))}" if frame.receive else ""
    return f"{frame.target}#{frame.descriptor}({args}){receive}"


def _arg_text(t: Term) -> str:
    try:
        return format_expr(t)
    except ValueError:
        return dump(t).replace("\n", " ")


def dump_ir(ir: CpsProgram) -> str:
    lines = [f"CpsProgram entry={ir.entry}"]
    for g in ir.globals:
        lines.append(f"Global {g.type} {g.name} = {format_value(g.value)}")
    for f in ir.functions:
        params = ", ".join(f.params)
        locals_ = ", ".join(n for n, _ in f.locals)
        lines.append(f"CpsFunction #{f.descriptor} {f.ret_type} {f.name}({params})"
                     + (f" locals({locals_})" if locals_ else ""))
        _dump_block(f.body, 1, lines)
    for f in ir.natives:
        lines.append(dump_function(f))
    return "\n".join(lines) + "\n"


def _dump_block(t: Term, depth: int, lines: List[str]):
    pad = "  " * depth
    if isinstance(t, InvokeValue):
        lines.append(f"{pad}InvokeValue {_arg_text(t.expr)}")
    elif isinstance(t, PushInvoke):
        lines.append(f"{pad}PushInvoke {_frame_text(t.frame)}")
    elif isinstance(t, PushPushInvoke):
        lines.append(f"{pad}PushPushInvoke second={_frame_text(t.second)} first={_frame_text(t.first)}")
    elif isinstance(t, Seq):
        lines.append(f"{pad}Seq")
        for item in t.items:
            _dump_block(item, depth + 1, lines)
    elif isinstance(t, If):
        lines.append(f"{pad}If {_arg_text(t.cond)}")
        _dump_block(t.then, depth + 1, lines)
        _dump_block(t.else_, depth + 1, lines)
    elif isinstance(t, While):
        lines.append(f"{pad}While {_arg_text(t.cond)}")
        _dump_block(t.body, depth + 1, lines)
    else:
        lines.append(dump(t, depth))


def dump_funtable(ir: CpsProgram) -> str:
    lines = []
    for d in ir.funtable:
        arity = "*" if d.arity is None else str(d.arity)
        receives = ",".join(map(str, d.receive)) if d.receive else "-"
        lines.append(f"{d.id} {d.name} {arity} {receives}")
    return "\n".join(lines) + "\n"


def cps_call_outside_terminators(ir: CpsProgram) -> List[str]:
    """Functions whose IR still contains a cps call outside a terminator."""
    kinds = {name: "cps" for name in PRIMITIVES}
    kinds.update({f.name: "cps" for f in ir.functions})
    bad = []
    for f in ir.functions:
        for node in ir_walk(f.body):
            if isinstance(node, Call) and kinds.get(node.fname) == "cps":
                bad.append(f.name)
                break
    return bad
