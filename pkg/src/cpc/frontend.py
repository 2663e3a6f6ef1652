"""
Frontend

Parser and pretty-printer for the surface language, plus the expansion of
``detached { }`` / ``attached { }`` blocks in terms of ``link``.

The grammar is a closed C-like subset; see ``corpus/`` for examples.

Version: 1.0.0
"""

import logging
import re
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Set, Tuple

from .errors import ParseError, SourceSpan
from .lang import (
    UNIT, AddrOf, Assign, Break, Call, Const, Deref, FunDecl, GlobalDecl, Goto, If,
    Labelled, LetRec, NameSupply, NativeCall, Program, Return, Scheduled, Seq, SetRef,
    Spawn, Str, Term, Var, While, all_functions, children, rebuild, seq, walk,
)
from .natives import BINARY_OPERATORS, BUILTINS
from .values import Ref, format_value

logger = logging.getLogger(__name__)

TYPES = ("int", "bool", "void", "cond")
KEYWORDS = set(TYPES) | {
    "cps", "if", "else", "while", "break", "goto", "return", "spawn",
    "detached", "attached", "true", "false",
}

_TOKEN_RE = re.compile(r"""
    (?P<ws>[ \t\r]+)
  | (?P<nl>\n)
  | (?P<comment>//[^\n]*|/\*.*?\*/)
  | (?P<int>\d+)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<string>"(?:[^"\\\n]|\\.)*")
  | (?P<op>==|!=|<=|>=|&&|\|\||[-+*/%<>=!&(){};,:])
""", re.VERBOSE | re.DOTALL)

_ESCAPES = {"n": "\n", "t": "\t", '"': '"', "\\": "\\"}


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    span: SourceSpan


def tokenize(text: str, filename: str = "<input>") -> List[Token]:
    tokens: List[Token] = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        span = SourceSpan(filename, line, pos - line_start + 1)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", span)
        kind, value = m.lastgroup, m.group()
        if kind == "nl":
            line, line_start = line + 1, m.end()
        elif kind == "comment":
            newlines = value.count("\n")
            if newlines:
                line += newlines
                line_start = pos + value.rfind("\n") + 1
        elif kind != "ws":
            if kind == "ident" and value in KEYWORDS:
                kind = "kw"
            tokens.append(Token(kind, value, replace(span, length=len(value))))
        pos = m.end()
    tokens.append(Token("eof", "", SourceSpan(filename, line, pos - line_start + 1)))
    return tokens


def _unescape(literal: str) -> str:
    body = literal[1:-1]
    return re.sub(r"\\(.)", lambda m: _ESCAPES.get(m.group(1), m.group(1)), body)


def _escape(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n").replace("\t", "\\t") + '"'


_BINARY_LEVELS: List[Tuple[str, ...]] = [
    ("||",), ("&&",), ("==", "!="), ("<", "<=", ">", ">="), ("+", "-"), ("*", "/", "%"),
]
_PRECEDENCE: Dict[str, int] = {op: i + 1 for i, ops in enumerate(_BINARY_LEVELS) for op in ops}
_UNARY_PRECEDENCE = len(_BINARY_LEVELS) + 1


class _FunctionScope:
    """Collects hoisted local declarations of one function."""

    def __init__(self):
        self.locals: List[Tuple[str, str]] = []


class Parser:
    def __init__(self, text: str, filename: str = "<input>"):
        self.filename = filename
        self.tokens = tokenize(text, filename)
        self.pos = 0
        self.scopes: List[_FunctionScope] = []

    # -- token helpers -----------------------------------------------------
    @property
    def tok(self) -> Token:
        return self.tokens[self.pos]

    def peek(self, offset: int = 1) -> Token:
        return self.tokens[min(self.pos + offset, len(self.tokens) - 1)]

    def at(self, text: str) -> bool:
        return self.tok.text == text and self.tok.kind in ("op", "kw")

    def advance(self) -> Token:
        tok = self.tok
        self.pos += 1
        return tok

    def expect(self, text: str) -> Token:
        if not self.at(text):
            raise ParseError(f"unexpected {self.tok.text or 'end of input'!r}", self.tok.span,
                             expected=[text])
        return self.advance()

    def ident(self) -> Token:
        if self.tok.kind != "ident":
            raise ParseError(f"unexpected {self.tok.text or 'end of input'!r}", self.tok.span,
                             expected=["identifier"])
        return self.advance()

    def at_type(self, offset: int = 0) -> bool:
        tok = self.peek(offset)
        return tok.kind == "kw" and tok.text in TYPES

    def at_declaration(self) -> bool:
        return self.at("cps") or self.at_type()

    # -- top level ---------------------------------------------------------
    def program(self) -> Program:
        functions: List[FunDecl] = []
        globals_: List[GlobalDecl] = []
        while self.tok.kind != "eof":
            if not self.at_declaration():
                raise ParseError(f"unexpected {self.tok.text!r}", self.tok.span,
                                 expected=["cps", *TYPES])
            start = self.tok.span
            is_cps, ty, name = self.header()
            if self.at("("):
                functions.append(self.function(start, is_cps, ty, name))
            else:
                if is_cps:
                    raise ParseError("cps qualifier on a global", start)
                globals_.append(self.global_decl(start, ty, name))
        entry = None
        names = [f.name for f in functions]
        if "main" in names:
            entry = "main"
        else:
            entry = next((f.name for f in functions if f.is_cps), None)
        if entry is None:
            raise ParseError("no entry point (define main or a cps function)", self.tok.span)
        return Program(tuple(functions), tuple(globals_), entry)

    def header(self) -> Tuple[bool, str, Token]:
        is_cps = False
        if self.at("cps"):
            self.advance()
            is_cps = True
        return is_cps, self.type_name(), self.ident()

    def type_name(self) -> str:
        if not self.at_type():
            raise ParseError(f"unexpected {self.tok.text!r}", self.tok.span, expected=TYPES)
        ty = self.advance().text
        if self.at("*"):
            self.advance()
            ty += "*"
        return ty

    def global_decl(self, start: SourceSpan, ty: str, name: Token) -> GlobalDecl:
        value = 0 if ty != "bool" else False
        if self.at("="):
            self.advance()
            expr = self.expression()
            if not isinstance(expr, Const):
                raise ParseError("global initializer must be a literal", expr.span or start)
            value = expr.value
        self.expect(";")
        return GlobalDecl(name.text, ty, value, span=start)

    def function(self, start: SourceSpan, is_cps: bool, ty: str, name: Token) -> FunDecl:
        self.expect("(")
        params: List[str] = []
        types: List[str] = []
        if self.at("void") and self.peek().text == ")":
            self.advance()
        while not self.at(")"):
            if params:
                self.expect(",")
            types.append(self.type_name())
            params.append(self.ident().text)
        self.expect(")")
        self.scopes.append(_FunctionScope())
        body = self.block()
        scope = self.scopes.pop()
        return FunDecl(name.text, tuple(params), body, "cps" if is_cps else "native",
                       ty, tuple(types), tuple(scope.locals), span=start)

    # -- statements --------------------------------------------------------
    def block(self) -> Seq:
        start = self.expect("{").span
        items = self.block_items()
        self.expect("}")
        return Seq(tuple(items), span=start)

    def block_items(self) -> List[Term]:
        items: List[Term] = []
        while not self.at("}"):
            if self.tok.kind == "eof":
                raise ParseError("unterminated block", self.tok.span, expected=["}"])
            if self.at_function_declaration():
                group: List[FunDecl] = []
                start = self.tok.span
                while self.at_function_declaration():
                    fstart = self.tok.span
                    is_cps, ty, name = self.header()
                    group.append(self.function(fstart, is_cps, ty, name))
                rest = self.block_items()
                items.append(LetRec(tuple(group), Seq(tuple(rest), span=start), span=start))
                return items
            stmt = self.statement()
            if stmt is not None:
                items.append(stmt)
        return items

    def at_function_declaration(self) -> bool:
        if self.at("cps"):
            return True
        if not self.at_type():
            return False
        offset = 2 if self.peek().text == "*" else 1
        return self.peek(offset).kind == "ident" and self.peek(offset + 1).text == "("

    def statement(self) -> Optional[Term]:
        tok = self.tok
        span = tok.span
        if self.at("{"):
            return self.block()
        if self.at("if"):
            self.advance()
            self.expect("(")
            cond = self.expression()
            self.expect(")")
            then = self.substatement()
            else_: Term = Seq(())
            if self.at("else"):
                self.advance()
                else_ = self.substatement()
            return If(cond, then, else_, span=span)
        if self.at("while"):
            self.advance()
            self.expect("(")
            cond = self.expression()
            self.expect(")")
            return While(cond, self.substatement(), span=span)
        if self.at("break"):
            self.advance()
            self.expect(";")
            return Break(span=span)
        if self.at("goto"):
            self.advance()
            label = self.ident().text
            self.expect(";")
            return Goto(label, span=span)
        if self.at("return"):
            self.advance()
            expr: Term = Const(UNIT, span=span)
            if not self.at(";"):
                expr = self.expression()
            self.expect(";")
            return Return(expr, span=span)
        if self.at("spawn"):
            self.advance()
            name = self.ident().text
            args = self.arguments()
            self.expect(";")
            return Spawn(name, tuple(args), span=span)
        if self.at("detached") or self.at("attached"):
            target = "pool" if self.advance().text == "detached" else "loop"
            return Scheduled(target, self.block(), span=span)
        if tok.kind == "ident" and self.peek().text == ":":
            self.advance()
            self.advance()
            return Labelled(tok.text, self.substatement(), span=span)
        if self.at_type():
            return self.declaration()
        expr = self.expression()
        if self.at("="):
            self.advance()
            value = self.expression()
            self.expect(";")
            if isinstance(expr, Var):
                return Assign(expr.name, value, span=span)
            if isinstance(expr, Deref):
                return SetRef(expr.expr, value, span=span)
            raise ParseError("left-hand side is not assignable", span)
        self.expect(";")
        return expr

    def substatement(self) -> Term:
        stmt = self.statement()
        if stmt is None:
            raise ParseError("declaration not allowed here", self.tok.span)
        return stmt

    def declaration(self) -> Optional[Term]:
        span = self.tok.span
        if not self.scopes:
            raise ParseError("declaration outside of a function", span)
        ty = self.type_name()
        name = self.ident().text
        self.scopes[-1].locals.append((name, ty))
        init: Optional[Term] = None
        if self.at("="):
            self.advance()
            init = Assign(name, self.expression(), span=span)
        self.expect(";")
        return init

    # -- expressions -------------------------------------------------------
    def expression(self, level: int = 1) -> Term:
        if level > len(_BINARY_LEVELS):
            return self.unary()
        left = self.expression(level + 1)
        ops = _BINARY_LEVELS[level - 1]
        while self.tok.kind == "op" and self.tok.text in ops:
            op = self.advance()
            right = self.expression(level + 1)
            left = NativeCall(BINARY_OPERATORS[op.text], (left, right), span=op.span)
        return left

    def unary(self) -> Term:
        tok = self.tok
        if self.at("-"):
            self.advance()
            if self.tok.kind == "int":
                return Const(-int(self.advance().text), span=tok.span)
            return NativeCall("neg", (self.unary(),), span=tok.span)
        if self.at("!"):
            self.advance()
            return NativeCall("not", (self.unary(),), span=tok.span)
        if self.at("*"):
            self.advance()
            return Deref(self.unary(), span=tok.span)
        if self.at("&"):
            self.advance()
            return AddrOf(self.ident().text, span=tok.span)
        return self.primary()

    def primary(self) -> Term:
        tok = self.tok
        if tok.kind == "int":
            self.advance()
            return Const(int(tok.text), span=tok.span)
        if tok.kind == "string":
            self.advance()
            return Str(_unescape(tok.text), span=tok.span)
        if self.at("true") or self.at("false"):
            self.advance()
            return Const(tok.text == "true", span=tok.span)
        if self.at("("):
            self.advance()
            if self.at(")"):
                self.advance()
                return Const(UNIT, span=tok.span)
            inner = self.expression()
            self.expect(")")
            return inner
        if tok.kind == "ident":
            self.advance()
            if self.at("("):
                args = tuple(self.arguments())
                if tok.text in BUILTINS:
                    return NativeCall(tok.text, args, span=tok.span)
                return Call(tok.text, args, span=tok.span)
            return Var(tok.text, span=tok.span)
        raise ParseError(f"unexpected {tok.text or 'end of input'!r}", tok.span,
                         expected=["expression"])

    def arguments(self) -> List[Term]:
        self.expect("(")
        args: List[Term] = []
        while not self.at(")"):
            if args:
                self.expect(",")
            args.append(self.expression())
        self.expect(")")
        return args


def parse(text, filename: str = "<input>") -> Program:
    """Parse surface text (``str`` or UTF-8 ``bytes``) into a Program."""
    if isinstance(text, (bytes, bytearray)):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as e:
            before = bytes(text[:e.start])
            line = before.count(b"\n") + 1
            column = e.start - (before.rfind(b"\n") + 1) + 1
            raise ParseError(f"invalid UTF-8 at byte offset {e.start}",
                             SourceSpan(filename, line, column, e.end - e.start)) from e
    program = Parser(text, filename).program()
    logger.debug("parsed %s: %d functions", filename, len(program.functions))
    return program


# --------------------------------------------------------------------------
# Pretty-printer

_OPERATOR_OF = {spec.name: spec.operator for spec in BUILTINS.values() if spec.operator}


def _expr_precedence(t: Term) -> int:
    if isinstance(t, NativeCall) and t.builtin in _OPERATOR_OF:
        if len(t.args) == 2:
            return _PRECEDENCE[_OPERATOR_OF[t.builtin]]
        return _UNARY_PRECEDENCE
    if isinstance(t, (Deref, AddrOf)):
        return _UNARY_PRECEDENCE
    if isinstance(t, Const) and type(t.value) is int and t.value < 0:
        return _UNARY_PRECEDENCE
    return _UNARY_PRECEDENCE + 1


def format_expr(t: Term) -> str:
    if isinstance(t, Const):
        if isinstance(t.value, Ref):
            raise ValueError(f"reference constant {format_value(t.value)} has no surface form")
        return format_value(t.value)
    if isinstance(t, Str):
        return _escape(t.text)
    if isinstance(t, Var):
        return t.name
    if isinstance(t, AddrOf):
        return f"&{t.name}"
    if isinstance(t, Deref):
        return "*" + _operand(t.expr, _UNARY_PRECEDENCE)
    if isinstance(t, Call):
        return f"{t.fname}({', '.join(format_expr(a) for a in t.args)})"
    if isinstance(t, NativeCall):
        op = _OPERATOR_OF.get(t.builtin)
        if op is not None and len(t.args) == 2:
            prec = _PRECEDENCE[op]
            return f"{_operand(t.args[0], prec)} {op} {_operand(t.args[1], prec + 1)}"
        if op is not None and len(t.args) == 1:
            operand = t.args[0]
            if t.builtin == "neg" and isinstance(operand, Const) and type(operand.value) is int:
                return f"-({format_expr(operand)})"
            return op + _operand(operand, _UNARY_PRECEDENCE)
        return f"{t.builtin}({', '.join(format_expr(a) for a in t.args)})"
    raise ValueError(f"{type(t).__name__} is not an expression")


def _operand(t: Term, minimum: int) -> str:
    text = format_expr(t)
    if _expr_precedence(t) < minimum:
        return f"({text})"
    return text


class Printer:
    def __init__(self, indent: str = "    "):
        self.indent = indent
        self.lines: List[str] = []

    def emit(self, depth: int, text: str):
        self.lines.append(self.indent * depth + text)

    def function(self, f: FunDecl, depth: int = 0):
        params = ", ".join(f"{f.param_type(i)} {p}" for i, p in enumerate(f.params))
        prefix = "cps " if f.is_cps else ""
        self.emit(depth, f"{prefix}{f.ret_type} {f.name}({params}) {{")
        for name, ty in f.locals:
            self.emit(depth + 1, f"{ty} {name};")
        self.items(f.body, depth + 1)
        self.emit(depth, "}")

    def items(self, t: Term, depth: int):
        if isinstance(t, Seq):
            for item in t.items:
                self.statement(item, depth)
        else:
            self.statement(t, depth)

    def block(self, t: Term, depth: int, head: str, tail: str = "}"):
        self.emit(depth, head + " {")
        self.items(t, depth + 1)
        self.emit(depth, tail)

    def nested(self, head: str, t: Term, depth: int):
        """``head`` followed by a sub-statement."""
        if isinstance(t, Seq):
            self.block(t, depth, head)
        else:
            self.emit(depth, head)
            self.statement(t, depth + 1)

    def statement(self, t: Term, depth: int):
        if isinstance(t, Seq):
            self.emit(depth, "{")
            self.items(t, depth + 1)
            self.emit(depth, "}")
        elif isinstance(t, LetRec):
            for g in t.funs:
                self.function(g, depth)
            self.items(t.rest, depth)
        elif isinstance(t, If):
            then = t.then
            dangling = isinstance(then, If) and not _is_empty(t.else_)
            if dangling:
                then = Seq((then,))
            self.nested(f"if ({format_expr(t.cond)})", then, depth)
            if not _is_empty(t.else_):
                self.nested("else", t.else_, depth)
        elif isinstance(t, While):
            self.nested(f"while ({format_expr(t.cond)})", t.body, depth)
        elif isinstance(t, Labelled):
            self.nested(f"{t.label}:", t.body, depth)
        elif isinstance(t, Scheduled):
            self.block(t.body, depth, "detached" if t.target == "pool" else "attached")
        elif isinstance(t, Return):
            if isinstance(t.expr, Const) and t.expr.value is UNIT:
                self.emit(depth, "return;")
            else:
                self.emit(depth, f"return {format_expr(t.expr)};")
        elif isinstance(t, Break):
            self.emit(depth, "break;")
        elif isinstance(t, Goto):
            self.emit(depth, f"goto {t.label};")
        elif isinstance(t, Spawn):
            self.emit(depth, f"spawn {t.fname}({', '.join(format_expr(a) for a in t.args)});")
        elif isinstance(t, Assign):
            self.emit(depth, f"{t.name} = {format_expr(t.expr)};")
        elif isinstance(t, SetRef):
            self.emit(depth, f"*{_operand(t.target, _UNARY_PRECEDENCE)} = {format_expr(t.value)};")
        else:
            self.emit(depth, f"{format_expr(t)};")


def _is_empty(t: Term) -> bool:
    return isinstance(t, Seq) and not t.items


def print_program(p: Program) -> str:
    """Deterministic surface text; ``parse(print_program(p))`` rebuilds ``p``."""
    printer = Printer()
    for g in p.globals:
        printer.emit(0, f"{g.type} {g.name} = {format_value(g.value)};")
    for i, f in enumerate(p.functions):
        if i or p.globals:
            printer.emit(0, "")
        printer.function(f)
    return "\n".join(printer.lines) + "\n"


def print_function(f: FunDecl) -> str:
    printer = Printer()
    printer.function(f)
    return "\n".join(printer.lines) + "\n"


# --------------------------------------------------------------------------
# detached / attached expansion

def _variable_names(p: Program) -> Set[str]:
    names = set(p.global_names)
    for f, _ in all_functions(p):
        names.update(f.scope_names)
        names.add(f.name)
    return names


class _SchedulingExpander:
    def __init__(self, supply: NameSupply):
        self.supply = supply
        self.new_locals: List[Tuple[str, str]] = []

    def function(self, f: FunDecl) -> FunDecl:
        saved, self.new_locals = self.new_locals, []
        body = self.term(f.body)
        added = tuple(self.new_locals)
        self.new_locals = saved
        return replace(f, body=body, locals=f.locals + added)

    def term(self, t: Term) -> Term:
        if isinstance(t, LetRec):
            funs = tuple(self.function(g) for g in t.funs)
            return replace(t, funs=funs, rest=self.term(t.rest))
        if isinstance(t, Scheduled):
            return self.expand(t)
        kids = children(t)
        if not kids:
            return t
        return rebuild(t, [self.term(c) for c in kids])

    def expand(self, t: Scheduled) -> Term:
        body = self.term(t.body)
        saved = self.supply.fresh("sched")
        self.new_locals.append((saved, "int"))
        target = "threadpool" if t.target == "pool" else "eventloop"
        enter = Assign(saved, Call("link", (NativeCall(target, (), span=t.span),), span=t.span), span=t.span)
        leave = Call("link", (Var(saved),), span=t.span)
        return seq(enter, self.returns(body, saved), leave, span=t.span)

    def returns(self, t: Term, saved: str) -> Term:
        if isinstance(t, Return):
            leave = Call("link", (Var(saved),), span=t.span)
            if isinstance(t.expr, Const) and t.expr.value is UNIT:
                return seq(leave, t, span=t.span)
            result = self.supply.fresh("ret")
            self.new_locals.append((result, "int"))
            return seq(Assign(result, t.expr, span=t.span), leave,
                       Return(Var(result), span=t.span), span=t.span)
        if isinstance(t, LetRec):
            return replace(t, rest=self.returns(t.rest, saved))
        kids = children(t)
        if not kids:
            return t
        return rebuild(t, [self.returns(c, saved) for c in kids])


def expand_scheduling_blocks(p: Program) -> Program:
    """Lower ``detached``/``attached`` blocks into ``link`` calls."""
    if not any(isinstance(n, Scheduled) for f in p.functions for n in walk(f.body)):
        return p
    expander = _SchedulingExpander(NameSupply(_variable_names(p)))
    return p.with_functions(expander.function(f) for f in p.functions)
