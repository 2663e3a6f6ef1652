"""
Language Core

Unified AST for the surface language and the core calculus, plus the static
analyses every pass relies on:

- tail positions (extended to labelled blocks and ``return``)
- free variables
- extruded variables (address taken with ``&``)
- the cps call-graph constraint
- well-formedness validation
- canonical one-node-per-line dumps

Version: 1.0.0
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, Iterator, List, Optional, Set, Tuple

from .errors import SourceSpan, ValidationError
from .natives import BUILTINS, PRIMITIVES
from .values import UNIT, Ref, Unit, Value, format_value, is_value, same_value

__all__ = [
    "UNIT", "Unit", "Ref", "Value", "format_value", "is_value", "same_value", "SourceSpan",
    "Term", "Const", "Str", "Var", "Assign", "Seq", "If", "LetRec", "Call", "NativeCall",
    "Return", "While", "Break", "Goto", "Labelled", "AddrOf", "Deref", "SetRef", "Spawn",
    "Scheduled", "FunDecl", "GlobalDecl", "Program", "seq", "children", "rebuild",
    "map_children", "walk", "walk_local", "tail_positions", "free_variables",
    "fun_free_variables", "extruded_variables", "check_cps_callgraph", "CallSite",
    "iter_call_sites", "function_kinds", "is_cps_call", "validate", "dump", "dump_program",
    "NameSupply", "all_functions", "CPS", "NATIVE",
]

logger = logging.getLogger(__name__)

CPS = "cps"
NATIVE = "native"


def _span():
    return field(default=None, compare=False, repr=False)


class Term:
    """Base class of every AST node."""
    __slots__ = ()


@dataclass(frozen=True)
class Const(Term):
    value: Value
    span: Optional[SourceSpan] = _span()


@dataclass(frozen=True)
class Str(Term):
    """String literal; only legal as an argument of ``print``."""
    text: str
    span: Optional[SourceSpan] = _span()


@dataclass(frozen=True)
class Var(Term):
    name: str
    span: Optional[SourceSpan] = _span()


@dataclass(frozen=True)
class Assign(Term):
    name: str
    expr: Term
    span: Optional[SourceSpan] = _span()


@dataclass(frozen=True)
class Seq(Term):
    items: Tuple[Term, ...]
    span: Optional[SourceSpan] = _span()


@dataclass(frozen=True)
class If(Term):
    cond: Term
    then: Term
    else_: Term
    span: Optional[SourceSpan] = _span()


@dataclass(frozen=True)
class Call(Term):
    fname: str
    args: Tuple[Term, ...]
    span: Optional[SourceSpan] = _span()


@dataclass(frozen=True)
class NativeCall(Term):
    builtin: str
    args: Tuple[Term, ...]
    span: Optional[SourceSpan] = _span()


@dataclass(frozen=True)
class Return(Term):
    expr: Term
    span: Optional[SourceSpan] = _span()


@dataclass(frozen=True)
class While(Term):
    cond: Term
    body: Term
    span: Optional[SourceSpan] = _span()


@dataclass(frozen=True)
class Break(Term):
    span: Optional[SourceSpan] = _span()


@dataclass(frozen=True)
class Goto(Term):
    label: str
    span: Optional[SourceSpan] = _span()


@dataclass(frozen=True)
class Labelled(Term):
    label: str
    body: Term
    span: Optional[SourceSpan] = _span()


@dataclass(frozen=True)
class AddrOf(Term):
    name: str
    span: Optional[SourceSpan] = _span()


@dataclass(frozen=True)
class Deref(Term):
    expr: Term
    span: Optional[SourceSpan] = _span()


@dataclass(frozen=True)
class SetRef(Term):
    target: Term
    value: Term
    span: Optional[SourceSpan] = _span()


@dataclass(frozen=True)
class Spawn(Term):
    fname: str
    args: Tuple[Term, ...]
    span: Optional[SourceSpan] = _span()


@dataclass(frozen=True)
class Scheduled(Term):
    """``detached { }`` (target "pool") or ``attached { }`` (target "loop")."""
    target: str
    body: Term
    span: Optional[SourceSpan] = _span()


@dataclass(frozen=True)
class FunDecl:
    name: str
    params: Tuple[str, ...]
    body: Term
    kind: str = CPS
    ret_type: str = "int"
    param_types: Tuple[str, ...] = ()
    locals: Tuple[Tuple[str, str], ...] = ()
    span: Optional[SourceSpan] = _span()

    @property
    def is_cps(self) -> bool:
        return self.kind == CPS

    @property
    def is_void(self) -> bool:
        return self.ret_type == "void"

    @property
    def local_names(self) -> Tuple[str, ...]:
        return tuple(name for name, _ in self.locals)

    @property
    def scope_names(self) -> Tuple[str, ...]:
        return self.params + self.local_names

    def param_type(self, index: int) -> str:
        if index < len(self.param_types):
            return self.param_types[index]
        return "int"

    @property
    def inner(self) -> Tuple["FunDecl", ...]:
        """Functions defined directly in this function's body."""
        found: List[FunDecl] = []
        for node in walk_local(self.body):
            if isinstance(node, LetRec):
                found.extend(node.funs)
        return tuple(found)


@dataclass(frozen=True)
class LetRec(Term):
    """``letrec f1(..) = M1 and ... in N``; a group of mutually recursive functions."""
    funs: Tuple[FunDecl, ...]
    rest: Term
    span: Optional[SourceSpan] = _span()

    @property
    def fname(self) -> str:
        return self.funs[0].name

    @property
    def params(self) -> Tuple[str, ...]:
        return self.funs[0].params

    @property
    def body(self) -> Term:
        return self.funs[0].body


@dataclass(frozen=True)
class GlobalDecl:
    name: str
    type: str
    value: Value = 0
    span: Optional[SourceSpan] = _span()


@dataclass(frozen=True)
class Program:
    functions: Tuple[FunDecl, ...]
    globals: Tuple[GlobalDecl, ...] = ()
    entry: Optional[str] = None

    def function(self, name: str) -> FunDecl:
        for f in self.functions:
            if f.name == name:
                return f
        raise KeyError(name)

    @property
    def entry_function(self) -> FunDecl:
        return self.function(self.entry)

    @property
    def global_names(self) -> Set[str]:
        return {g.name for g in self.globals}

    def with_functions(self, functions: Iterable[FunDecl]) -> "Program":
        return replace(self, functions=tuple(functions))


# --------------------------------------------------------------------------
# Generic traversal

def seq(*items: Term, span: Optional[SourceSpan] = None) -> Seq:
    """Build a flat sequence, splicing nested sequences and dropping empty ones."""
    flat: List[Term] = []
    for item in items:
        if isinstance(item, Seq):
            flat.extend(item.items)
        elif item is not None:
            flat.append(item)
    return Seq(tuple(flat), span=span)


def children(t: Term) -> List[Term]:
    if isinstance(t, (Const, Str, Var, Break, Goto, AddrOf)):
        return []
    if isinstance(t, Assign):
        return [t.expr]
    if isinstance(t, Seq):
        return list(t.items)
    if isinstance(t, If):
        return [t.cond, t.then, t.else_]
    if isinstance(t, LetRec):
        return [f.body for f in t.funs] + [t.rest]
    if isinstance(t, (Call, NativeCall, Spawn)):
        return list(t.args)
    if isinstance(t, (Return, Deref)):
        return [t.expr]
    if isinstance(t, While):
        return [t.cond, t.body]
    if isinstance(t, (Labelled, Scheduled)):
        return [t.body]
    if isinstance(t, SetRef):
        return [t.target, t.value]
    raise TypeError(f"not a term: {t!r}")


def rebuild(t: Term, kids: List[Term]) -> Term:
    if isinstance(t, (Const, Str, Var, Break, Goto, AddrOf)):
        return t
    if isinstance(t, Assign):
        return replace(t, expr=kids[0])
    if isinstance(t, Seq):
        return replace(t, items=tuple(kids))
    if isinstance(t, If):
        return replace(t, cond=kids[0], then=kids[1], else_=kids[2])
    if isinstance(t, LetRec):
        funs = tuple(replace(f, body=b) for f, b in zip(t.funs, kids))
        return replace(t, funs=funs, rest=kids[-1])
    if isinstance(t, (Call, NativeCall, Spawn)):
        return replace(t, args=tuple(kids))
    if isinstance(t, (Return, Deref)):
        return replace(t, expr=kids[0])
    if isinstance(t, While):
        return replace(t, cond=kids[0], body=kids[1])
    if isinstance(t, (Labelled, Scheduled)):
        return replace(t, body=kids[0])
    if isinstance(t, SetRef):
        return replace(t, target=kids[0], value=kids[1])
    raise TypeError(f"not a term: {t!r}")


def map_children(t: Term, fn) -> Term:
    kids = children(t)
    if not kids:
        return t
    return rebuild(t, [fn(c) for c in kids])


def walk(t: Term) -> Iterator[Term]:
    """Pre-order traversal, entering inner function bodies."""
    stack = [t]
    while stack:
        node = stack.pop()
        yield node
        stack.extend(reversed(children(node)))


def walk_local(t: Term) -> Iterator[Term]:
    """Pre-order traversal that does not enter inner function bodies."""
    stack = [t]
    while stack:
        node = stack.pop()
        yield node
        if isinstance(node, LetRec):
            stack.append(node.rest)
        else:
            stack.extend(reversed(children(node)))


def all_functions(p: Program) -> List[Tuple[FunDecl, Optional[str]]]:
    """Every function of the program with the name of its parent (None at top level)."""
    out: List[Tuple[FunDecl, Optional[str]]] = []

    def visit(f: FunDecl, parent: Optional[str]):
        out.append((f, parent))
        for g in f.inner:
            visit(g, f.name)

    for f in p.functions:
        visit(f, None)
    return out


class NameSupply:
    """Fresh names that avoid a growing set of taken names."""

    def __init__(self, taken: Iterable[str] = ()):
        self.taken: Set[str] = set(taken)
        self._counters: Dict[str, int] = {}

    def fresh(self, base: str) -> str:
        n = self._counters.get(base, 0)
        while True:
            n += 1
            candidate = f"{base}{n}"
            if candidate not in self.taken:
                break
        self._counters[base] = n
        self.taken.add(candidate)
        return candidate

    def reserve(self, name: str) -> str:
        if name in self.taken:
            return self.fresh(name)
        self.taken.add(name)
        return name


# --------------------------------------------------------------------------
# Tail positions

Path = Tuple[int, ...]


def _child_is_tail(t: Term, index: int, tail: bool) -> bool:
    if isinstance(t, If):
        return tail and index in (1, 2)
    if isinstance(t, Seq):
        return tail and index == len(t.items) - 1
    if isinstance(t, LetRec):
        return True if index < len(t.funs) else tail
    if isinstance(t, (Return, Labelled)):
        return True
    return False


def tail_positions(f: FunDecl) -> Set[Path]:
    """Paths (child indices from ``f.body``) of every position in tail position.

    The body of ``f`` and of every inner function, the body of every labelled
    block and the operand of every ``return`` are tail roots.
    """
    out: Set[Path] = set()

    def mark(t: Term, path: Path, tail: bool):
        if tail:
            out.add(path)
        for i, child in enumerate(children(t)):
            mark(child, path + (i,), _child_is_tail(t, i, tail))

    mark(f.body, (), True)
    return out


def subterm(t: Term, path: Path) -> Term:
    for i in path:
        t = children(t)[i]
    return t


@dataclass(frozen=True)
class CallSite:
    call: Call
    owner: str
    tail: bool


def iter_call_sites(f: FunDecl) -> Iterator[CallSite]:
    """Every user-function call in ``f`` and its inner functions, with its owner."""

    def visit(t: Term, owner: str, tail: bool):
        if isinstance(t, Call):
            yield CallSite(t, owner, tail)
        if isinstance(t, LetRec):
            for g in t.funs:
                yield from visit(g.body, g.name, True)
            yield from visit(t.rest, owner, tail)
            return
        for i, child in enumerate(children(t)):
            yield from visit(child, owner, _child_is_tail(t, i, tail))

    yield from visit(f.body, f.name, True)


# --------------------------------------------------------------------------
# Free and extruded variables

def free_variables(t: Term) -> Set[str]:
    if isinstance(t, Var):
        return {t.name}
    if isinstance(t, AddrOf):
        return {t.name}
    if isinstance(t, Assign):
        return {t.name} | free_variables(t.expr)
    if isinstance(t, LetRec):
        out = free_variables(t.rest)
        for g in t.funs:
            out |= fun_free_variables(g)
        return out
    out: Set[str] = set()
    for child in children(t):
        out |= free_variables(child)
    return out


def fun_free_variables(f: FunDecl) -> Set[str]:
    return free_variables(f.body) - set(f.scope_names)


def _reads(t: Term) -> Set[str]:
    """Variables whose value is read (not merely assigned) somewhere in ``t``."""
    return {n.name for n in walk(t) if isinstance(n, (Var, AddrOf))}


def extruded_variables(f: FunDecl, smart: bool = False) -> Set[str]:
    own = set(f.scope_names)
    reads = _reads(f.body) if smart else set()
    out: Set[str] = set()

    def visit(t: Term, parent: Optional[Term]):
        if isinstance(t, AddrOf) and t.name in own:
            discarded = parent is None or isinstance(parent, Seq)
            unused_store = (isinstance(parent, Assign) and parent.name not in reads)
            if not (smart and (discarded or unused_store)):
                out.add(t.name)
        for child in children(t):
            visit(child, t)

    visit(f.body, None)
    return out


# --------------------------------------------------------------------------
# Call graph

def function_kinds(p: Program) -> Dict[str, str]:
    kinds = {name: CPS for name in PRIMITIVES}
    for f, _ in all_functions(p):
        kinds[f.name] = f.kind
    return kinds


def is_cps_call(t: Term, kinds: Dict[str, str]) -> bool:
    return isinstance(t, Call) and kinds.get(t.fname) == CPS


@dataclass(frozen=True)
class Violation:
    caller: str
    callee: str
    span: Optional[SourceSpan] = None


def check_cps_callgraph(p: Program) -> List[Violation]:
    kinds = function_kinds(p)
    out: List[Violation] = []
    for f, _ in all_functions(p):
        if f.is_cps:
            continue
        for node in walk_local(f.body):
            if is_cps_call(node, kinds):
                out.append(Violation(f.name, node.fname, node.span))
    return out


# --------------------------------------------------------------------------
# Validation

_STATEMENT_FORMS = (Assign, SetRef, Call, NativeCall, Return, If, While, Break, Goto,
                    Labelled, LetRec, Spawn, Scheduled, Seq)


class _Validator:
    def __init__(self, p: Program):
        self.p = p
        self.kinds = function_kinds(p)
        self.decls: Dict[str, FunDecl] = {}
        self.errors: List[ValidationError] = []
        self.globals = p.global_names

    def fail(self, message: str, span: Optional[SourceSpan]):
        self.errors.append(ValidationError(message, span))

    def run(self) -> List[ValidationError]:
        seen: Set[str] = set()
        for f, parent in all_functions(self.p):
            if f.name in seen or f.name in PRIMITIVES or f.name in BUILTINS:
                self.fail(f"duplicate or reserved function name {f.name}", f.span)
            seen.add(f.name)
            self.decls[f.name] = f
            if parent is not None and self.decls[parent].kind == NATIVE:
                self.fail(f"inner function {f.name} inside native function {parent}", f.span)
        if self.p.entry is None or self.p.entry not in {f.name for f in self.p.functions}:
            self.fail("no entry point", None)
        elif not self.p.entry_function.is_cps:
            self.fail(f"entry point {self.p.entry} is not a cps function", self.p.entry_function.span)
        top = {f.name for f in self.p.functions}
        for f in self.p.functions:
            self.function(f, set(), top)
        for v in check_cps_callgraph(self.p):
            self.fail(f"native function {v.caller} calls cps function {v.callee}", v.span)
        return self.errors

    def function(self, f: FunDecl, outer: Set[str], visible: Set[str]):
        names = list(f.scope_names)
        if len(set(names)) != len(names):
            self.fail(f"duplicate parameter or local in {f.name}", f.span)
        for n in names:
            if n in self.globals or n in outer:
                self.fail(f"{n} in {f.name} shadows an enclosing declaration", f.span)
        scope = outer | set(names)
        labels: List[str] = [n.label for n in walk_local(f.body) if isinstance(n, Labelled)]
        if len(set(labels)) != len(labels):
            self.fail(f"duplicate label in {f.name}", f.span)
        self.stmt(f.body, f, scope, visible, set(labels), in_loop=False)

    def stmt(self, t: Term, f: FunDecl, scope: Set[str], visible: Set[str],
             labels: Set[str], in_loop: bool):
        if isinstance(t, Seq):
            for item in t.items:
                self.stmt(item, f, scope, visible, labels, in_loop)
        elif isinstance(t, LetRec):
            group = visible | {g.name for g in t.funs}
            for g in t.funs:
                self.function(g, scope, group)
            self.stmt(t.rest, f, scope, group, labels, in_loop)
        elif isinstance(t, If):
            self.expr(t.cond, f, scope, visible)
            self.stmt(t.then, f, scope, visible, labels, in_loop)
            self.stmt(t.else_, f, scope, visible, labels, in_loop)
        elif isinstance(t, While):
            self.expr(t.cond, f, scope, visible)
            self.stmt(t.body, f, scope, visible, labels, True)
        elif isinstance(t, Break):
            if not in_loop:
                self.fail("break outside of a loop", t.span)
        elif isinstance(t, Goto):
            if t.label not in labels:
                self.fail(f"undefined label {t.label}", t.span)
        elif isinstance(t, Labelled):
            self.stmt(t.body, f, scope, visible, labels, in_loop)
        elif isinstance(t, Scheduled):
            self.stmt(t.body, f, scope, visible, labels, in_loop)
        elif isinstance(t, Return):
            is_unit = isinstance(t.expr, Const) and t.expr.value is UNIT
            if f.is_void and not is_unit:
                self.fail(f"return with a value in void function {f.name}", t.span)
            if not f.is_void and is_unit:
                self.fail(f"return without a value in {f.name}", t.span)
            if not is_unit:
                self.expr(t.expr, f, scope, visible, cps_ok=True)
        elif isinstance(t, Assign):
            self.variable(t.name, scope, t.span)
            self.expr(t.expr, f, scope, visible, cps_ok=True)
        elif isinstance(t, SetRef):
            self.expr(t.target, f, scope, visible)
            self.expr(t.value, f, scope, visible, cps_ok=True)
        elif isinstance(t, Spawn):
            target = self.decls.get(t.fname)
            if target is None or t.fname not in {g.name for g in self.p.functions}:
                self.fail(f"spawn target {t.fname} is not a top-level function", t.span)
            elif not target.is_cps:
                self.fail(f"spawn target {t.fname} is not a cps function", t.span)
            elif len(target.params) != len(t.args):
                self.fail(f"{t.fname} expects {len(target.params)} arguments", t.span)
            for a in t.args:
                self.expr(a, f, scope, visible)
        elif isinstance(t, (Call, NativeCall)):
            self.expr(t, f, scope, visible, cps_ok=True, statement=True)
        else:
            self.expr(t, f, scope, visible, statement=True)

    def variable(self, name: str, scope: Set[str], span):
        if name not in scope and name not in self.globals:
            self.fail(f"undefined variable {name}", span)

    def expr(self, t: Term, f: FunDecl, scope: Set[str], visible: Set[str],
             cps_ok: bool = False, statement: bool = False):
        if isinstance(t, (Const,)):
            return
        if isinstance(t, Str):
            self.fail("string literal outside of print", t.span)
        elif isinstance(t, (Var, AddrOf)):
            self.variable(t.name, scope, t.span)
        elif isinstance(t, Deref):
            self.expr(t.expr, f, scope, visible)
        elif isinstance(t, Call):
            self.call(t, f, scope, visible, cps_ok, statement)
        elif isinstance(t, NativeCall):
            spec = BUILTINS.get(t.builtin)
            if spec is None:
                self.fail(f"unknown builtin {t.builtin}", t.span)
                return
            if spec.arity is not None and spec.arity != len(t.args):
                self.fail(f"{t.builtin} expects {spec.arity} arguments", t.span)
            if not spec.returns_value and not statement:
                self.fail(f"value of void builtin {t.builtin} used", t.span)
            for a in t.args:
                if isinstance(a, Str) and t.builtin == "print":
                    continue
                self.expr(a, f, scope, visible)
        elif isinstance(t, _STATEMENT_FORMS):
            self.fail("statement used as an expression", getattr(t, "span", None))
        else:
            self.fail(f"unexpected node {type(t).__name__}", None)

    def call(self, t: Call, f: FunDecl, scope, visible, cps_ok: bool, statement: bool):
        kind = self.kinds.get(t.fname)
        if kind is None:
            self.fail(f"undefined function {t.fname}", t.span)
            return
        if t.fname in PRIMITIVES:
            lo, hi, returns = PRIMITIVES[t.fname]
            if not lo <= len(t.args) <= hi:
                self.fail(f"{t.fname} expects {lo}..{hi} arguments", t.span)
        else:
            decl = self.decls[t.fname]
            if t.fname not in visible:
                self.fail(f"function {t.fname} is not visible here", t.span)
            if len(decl.params) != len(t.args):
                self.fail(f"{t.fname} expects {len(decl.params)} arguments", t.span)
            returns = not decl.is_void
        if not returns and not statement:
            self.fail(f"value of void function {t.fname} used", t.span)
        if kind == CPS and not cps_ok:
            self.fail(f"cps call to {t.fname} in expression position", t.span)
        for a in t.args:
            self.expr(a, f, scope, visible)


def validate(p: Program) -> None:
    """Raise the first ``ValidationError`` found in ``p``."""
    errors = _Validator(p).run()
    logger.debug("validated %d functions: %d errors", len(all_functions(p)), len(errors))
    if errors:
        raise errors[0]


def validation_errors(p: Program) -> List[ValidationError]:
    return _Validator(p).run()


# --------------------------------------------------------------------------
# Canonical dump

def _fields(t: Term) -> str:
    if isinstance(t, Const):
        return format_value(t.value)
    if isinstance(t, Str):
        return repr(t.text)
    if isinstance(t, (Var, AddrOf, Assign)):
        return t.name
    if isinstance(t, (Call, Spawn)):
        return t.fname
    if isinstance(t, NativeCall):
        return t.builtin
    if isinstance(t, (Goto, Labelled)):
        return t.label
    if isinstance(t, Scheduled):
        return t.target
    return ""


def _fun_header(f: FunDecl) -> str:
    params = ", ".join(f"{p}:{f.param_type(i)}" for i, p in enumerate(f.params))
    line = f"FunDecl {f.kind} {f.ret_type} {f.name}({params})"
    if f.locals:
        line += " locals(" + ", ".join(f"{n}:{ty}" for n, ty in f.locals) + ")"
    return line


def dump(t: Term, indent: int = 0) -> str:
    """Deterministic text form, one node per line."""
    lines: List[str] = []

    def emit(node: Term, depth: int):
        pad = "  " * depth
        if isinstance(node, LetRec):
            lines.append(f"{pad}LetRec")
            for g in node.funs:
                lines.append(f"{pad}  {_fun_header(g)}")
                emit(g.body, depth + 2)
            emit(node.rest, depth + 1)
            return
        extra = _fields(node)
        lines.append(f"{pad}{type(node).__name__}" + (f" {extra}" if extra else ""))
        for child in children(node):
            emit(child, depth + 1)

    emit(t, indent)
    return "\n".join(lines)


def dump_function(f: FunDecl) -> str:
    return _fun_header(f) + "\n" + dump(f.body, 1)


def dump_program(p: Program) -> str:
    lines = [f"Program entry={p.entry}"]
    for g in p.globals:
        lines.append(f"Global {g.type} {g.name} = {format_value(g.value)}")
    for f in p.functions:
        lines.append(dump_function(f))
    return "\n".join(lines) + "\n"
