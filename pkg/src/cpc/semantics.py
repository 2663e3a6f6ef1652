"""
Reference Semantics

Big-step interpreters for the core language (values, variables, assignment,
sequence, conditional, ``letrec`` and calls) under two rule sets:

- naive rules: every call allocates fresh locations that are never reclaimed
- optimised rules: split environments (tail | non-tail) clean the store at
  tail positions, and closures are compact (they never capture their own
  parameters)

Also here: parameter lifting on core terms, the liftability check, a seeded
term generator and the differential harnesses comparing the interpreters with
each other and with lifted terms. The naive interpreter additionally accepts
whole surface programs (loops, ``return``, ``goto``, builtins, heap cells) so
that it can serve as the end-to-end oracle for the compiler.

Evaluation failures are values (``Stuck``, ``OutOfFuel``), never exceptions.

Version: 1.0.0
"""

import logging
import random
import sys
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, Iterator, List, Optional, Set, Tuple, Union

from .errors import RuntimeTrap
from .lang import (
    AddrOf, Assign, Break, Call, Const, Deref, FunDecl, Goto, If, Labelled, LetRec, NativeCall,
    Program, Return, Scheduled, Seq, SetRef, Spawn, Str, Term, Var, While, children, dump, rebuild,
)
from .natives import EVENT_LOOP, PRIMITIVES, HeapContext, NativeFault, apply_builtin
from .values import UNIT, Ref, Value, format_value, same_value

logger = logging.getLogger(__name__)

DEFAULT_FUEL = 100_000
DEFAULT_MAX_DEPTH = 2_000
DERIVATION_LIMIT = 200

Location = int
VarEnv = Dict[str, Location]
Store = Dict[Location, Value]


class InvariantViolation(RuntimeTrap):
    """An environment or closure invariant of the interpreters was broken."""


@dataclass(eq=False)
class Closure:
    params: Tuple[str, ...]
    body: Term
    env: VarEnv
    funs: Dict[str, "Closure"]
    name: str = ""
    locals: Tuple[str, ...] = ()

    def __repr__(self) -> str:
        return f"Closure({self.name}({', '.join(self.params)}))"


FunEnv = Dict[str, Closure]


@dataclass(frozen=True)
class SplitEnv:
    """``tail | rest``; ``tail`` holds the parameters reclaimable at the current tail position."""
    tail: VarEnv = field(default_factory=dict)
    rest: VarEnv = field(default_factory=dict)

    def merged(self) -> VarEnv:
        env = dict(self.rest)
        env.update(self.tail)
        return env


@dataclass(frozen=True)
class Done:
    value: Value
    store: Dict[Location, Value]

    kind = "done"


@dataclass(frozen=True)
class Stuck:
    reason: str

    kind = "stuck"


@dataclass(frozen=True)
class OutOfFuel:
    reason: str = "fuel"

    kind = "out-of-fuel"


Outcome = Union[Done, Stuck, OutOfFuel]


def describe(outcome: Outcome) -> str:
    if isinstance(outcome, Done):
        store = ", ".join(f"l{k}={format_value(v)}" for k, v in sorted(outcome.store.items()))
        return f"done {format_value(outcome.value)} store {{{store}}}"
    if isinstance(outcome, Stuck):
        return f"stuck: {outcome.reason}"
    return f"out of fuel ({outcome.reason})"


# --------------------------------------------------------------------------
# Internal control flow

class _Stuck(Exception):
    pass


class _OutOfFuel(Exception):
    pass


class _Return(Exception):
    def __init__(self, value):
        self.value = value


class _Break(Exception):
    pass


class _Goto(Exception):
    def __init__(self, label: str):
        self.label = label


@contextmanager
def _recursion_room(frames: int):
    previous = sys.getrecursionlimit()
    if frames > previous:
        sys.setrecursionlimit(frames)
    try:
        yield
    finally:
        sys.setrecursionlimit(previous)


def _locations(env: VarEnv, funs: FunEnv) -> Iterator[Location]:
    yield from env.values()
    for e in _environments(funs):
        yield from e.values()


def _environments(funs: FunEnv) -> Iterator[VarEnv]:
    """Env(F): every environment captured by a closure reachable from ``funs``."""
    seen: Set[int] = set()
    stack = list(funs.values())
    while stack:
        clo = stack.pop()
        if id(clo) in seen:
            continue
        seen.add(id(clo))
        yield clo.env
        stack.extend(clo.funs.values())


def _check_aliasing(envs: List[VarEnv], funs: FunEnv) -> None:
    owner: Dict[Location, str] = {}
    for env in list(envs) + list(_environments(funs)):
        for name, loc in env.items():
            if owner.setdefault(loc, name) != name:
                raise InvariantViolation(f"{owner[loc]} and {name} share location l{loc}")


def _check_compact(funs: FunEnv) -> None:
    seen: Set[int] = set()
    stack = list(funs.values())
    while stack:
        clo = stack.pop()
        if id(clo) in seen:
            continue
        seen.add(id(clo))
        captured = set(clo.params) & set(clo.env)
        if captured:
            raise InvariantViolation(f"closure {clo.name} captures its parameters {sorted(captured)}")
        stack.extend(clo.funs.values())


class _Machine:
    """Shared state of one evaluation: store, fuel, fresh locations and the optional rule trace."""

    def __init__(self, store: Optional[Store], fuel: int, check_invariants: bool,
                 max_depth: int, env_locations: Iterator[Location] = (),
                 trace: Optional[List[str]] = None, trace_limit: int = DERIVATION_LIMIT):
        self.trace = trace
        self.trace_limit = trace_limit
        self.untraced = 0
        self.store: Store = dict(store or {})
        self.fuel = fuel
        self.check_invariants = check_invariants
        self.max_depth = max_depth
        self.depth = 0
        used = list(self.store) + list(env_locations)
        self._next = max(used, default=0) + 1

    def fresh(self) -> Location:
        loc = self._next
        self._next += 1
        return loc

    def tick(self, t: Optional[Term] = None) -> None:
        self.fuel -= 1
        if self.fuel < 0:
            raise _OutOfFuel("fuel")
        if self.trace is not None and t is not None:
            if len(self.trace) < self.trace_limit:
                self.trace.append("  " * self.depth + _rule(t))
            else:
                self.untraced += 1

    def enter(self) -> None:
        self.depth += 1
        if self.depth > self.max_depth:
            raise _OutOfFuel("depth")

    def read(self, env: VarEnv, name: str) -> Tuple[Location, Value]:
        loc = env.get(name)
        if loc is None:
            raise _Stuck(f"unbound variable {name}")
        if loc not in self.store:
            raise _Stuck(f"location l{loc} of {name} is not in the store")
        return loc, self.store[loc]

    def run(self, thunk) -> Outcome:
        with _recursion_room(self.max_depth * 12 + 1000):
            try:
                value = thunk()
            except _Stuck as exc:
                return Stuck(str(exc))
            except _OutOfFuel as exc:
                return OutOfFuel(str(exc))
            except RecursionError:
                return OutOfFuel("host recursion")
        return Done(value, dict(self.store))

    def close_trace(self) -> None:
        if self.trace is not None and self.untraced:
            self.trace.append(f"... {self.untraced} more rules")


def _rule(t: Term) -> str:
    """Name of the rule that evaluates ``t``, with the construct it applies to."""
    if isinstance(t, Const):
        return f"val {format_value(t.value)}"
    if isinstance(t, Var):
        return f"var {t.name}"
    if isinstance(t, Assign):
        return f"assign {t.name}"
    if isinstance(t, LetRec):
        return "letrec " + ", ".join(f.name for f in t.funs)
    if isinstance(t, Call):
        return f"call {t.fname}"
    return type(t).__name__.lower()


def _group_closures(t: LetRec, env: VarEnv, funs: FunEnv, compact: bool) -> FunEnv:
    """Extend ``funs`` with the closures of a letrec group.

    A single function captures ``funs`` itself; members of a larger group also
    see each other.
    """
    extended = dict(funs)
    captured = extended if len(t.funs) > 1 else funs
    for f in t.funs:
        scope = env
        if compact:
            scope = {n: l for n, l in env.items() if n not in f.params}
        extended[f.name] = Closure(tuple(f.params), f.body, scope, captured, f.name,
                                   tuple(f.local_names))
    return extended


# --------------------------------------------------------------------------
# Naive rules

class NaiveInterpreter:
    """Naive big-step rules, extended with the surface statements for whole programs."""

    def __init__(self, machine: _Machine, statements: bool = False,
                 ctx: Optional[HeapContext] = None):
        self.m = machine
        self.statements = statements
        self.ctx = ctx or HeapContext()
        self.scheduler = EVENT_LOOP

    def eval(self, t: Term, rho: VarEnv, funs: FunEnv):
        m = self.m
        m.tick(t)
        if isinstance(t, Const):
            return t.value
        if isinstance(t, Var):
            return m.read(rho, t.name)[1]
        if isinstance(t, Assign):
            v = self.eval(t.expr, rho, funs)
            loc, _ = m.read(rho, t.name)
            m.store[loc] = v
            return UNIT
        if isinstance(t, Seq):
            return self.sequence(t.items, rho, funs)
        if isinstance(t, If):
            c = self.eval(t.cond, rho, funs)
            if c is True:
                return self.eval(t.then, rho, funs)
            if c is False:
                return self.eval(t.else_, rho, funs)
            raise _Stuck(f"condition is not a boolean: {format_value(c)}")
        if isinstance(t, LetRec):
            extended = _group_closures(t, rho, funs, compact=False)
            if m.check_invariants:
                _check_aliasing([rho], extended)
            return self.eval(t.rest, rho, extended)
        if isinstance(t, Call):
            return self.call(t, rho, funs)
        if self.statements:
            return self.statement(t, rho, funs)
        raise _Stuck(f"{type(t).__name__} is not a core term")

    def sequence(self, items, rho: VarEnv, funs: FunEnv):
        value = UNIT
        i = 0
        while i < len(items):
            try:
                value = self.eval(items[i], rho, funs)
                i += 1
            except _Goto as jump:
                target = _label_index(items, jump.label)
                if target is None:
                    raise
                i = target
        return value

    def call(self, t: Call, rho: VarEnv, funs: FunEnv):
        m = self.m
        clo = funs.get(t.fname)
        if clo is None:
            if self.statements and t.fname in PRIMITIVES:
                return self.primitive(t, rho, funs)
            raise _Stuck(f"unbound function {t.fname}")
        if len(t.args) != len(clo.params):
            raise _Stuck(f"{t.fname} expects {len(clo.params)} arguments, got {len(t.args)}")
        values = [self.eval(a, rho, funs) for a in t.args]
        callee_env = dict(clo.env)
        for x, v in zip(clo.params, values):
            loc = m.fresh()
            callee_env[x] = loc
            m.store[loc] = v
        for x in clo.locals:
            loc = m.fresh()
            callee_env[x] = loc
            m.store[loc] = UNIT
        callee_funs = dict(clo.funs)
        callee_funs[t.fname] = clo
        if m.check_invariants:
            _check_aliasing([callee_env], callee_funs)
        m.enter()
        try:
            if not self.statements:
                return self.eval(clo.body, callee_env, callee_funs)
            try:
                self.eval(clo.body, callee_env, callee_funs)
            except _Return as ret:
                return ret.value
            except _Goto as jump:
                raise _Stuck(f"goto {jump.label} does not target an enclosing block") from None
            except _Break:
                raise _Stuck("break outside of a loop") from None
            return UNIT
        finally:
            m.depth -= 1

    # surface statements ----------------------------------------------------

    def statement(self, t: Term, rho: VarEnv, funs: FunEnv):
        if isinstance(t, Return):
            raise _Return(self.eval(t.expr, rho, funs))
        if isinstance(t, While):
            while True:
                c = self.eval(t.cond, rho, funs)
                if c is False:
                    return UNIT
                if c is not True:
                    raise _Stuck(f"condition is not a boolean: {format_value(c)}")
                try:
                    self.eval(t.body, rho, funs)
                except _Break:
                    return UNIT
        if isinstance(t, Break):
            raise _Break()
        if isinstance(t, Goto):
            raise _Goto(t.label)
        if isinstance(t, (Labelled, Scheduled)):
            return self.eval(t.body, rho, funs)
        if isinstance(t, Str):
            return t.text
        if isinstance(t, NativeCall):
            values = [self.eval(a, rho, funs) for a in t.args]
            try:
                return apply_builtin(t.builtin, self.ctx, values)
            except NativeFault as exc:
                raise _Stuck(str(exc)) from None
        if isinstance(t, Deref):
            return self.cell(self.eval(t.expr, rho, funs), None)
        if isinstance(t, SetRef):
            ref = self.eval(t.target, rho, funs)
            self.cell(ref, self.eval(t.value, rho, funs))
            return UNIT
        if isinstance(t, AddrOf):
            raise _Stuck(f"address of unboxed variable {t.name}")
        if isinstance(t, Spawn):
            raise _Stuck("spawn needs the scheduler")
        raise _Stuck(f"unexpected {type(t).__name__}")

    def cell(self, ref, value):
        if not isinstance(ref, Ref):
            raise _Stuck(f"expected a reference, got {format_value(ref)}")
        try:
            if value is None:
                return self.ctx.load(ref)
            self.ctx.store(ref, value)
            return UNIT
        except NativeFault as exc:
            raise _Stuck(str(exc)) from None

    def primitive(self, t: Call, rho: VarEnv, funs: FunEnv):
        values = [self.eval(a, rho, funs) for a in t.args]
        if t.fname == "yield":
            return UNIT
        if t.fname == "sleep":
            return 1
        if t.fname == "link":
            previous, self.scheduler = self.scheduler, values[0]
            return previous
        raise _Stuck(f"{t.fname} would block forever without a scheduler")


def _label_index(items, label: str) -> Optional[int]:
    for i, item in enumerate(items):
        if isinstance(item, Labelled) and item.label == label:
            return i
    return None


# --------------------------------------------------------------------------
# Optimised rules

class OptimisedInterpreter:
    """Optimised big-step rules: minimal stores and compact closures."""

    def __init__(self, machine: _Machine):
        self.m = machine

    def gc(self, tail: VarEnv) -> None:
        for loc in tail.values():
            self.m.store.pop(loc, None)

    def eval(self, t: Term, tail: VarEnv, rest: VarEnv, funs: FunEnv):
        m = self.m
        m.tick(t)
        if isinstance(t, Const):
            self.gc(tail)
            return t.value
        if isinstance(t, Var):
            env = {**rest, **tail}
            _, value = m.read(env, t.name)
            self.gc(tail)
            return value
        if isinstance(t, Assign):
            env = {**rest, **tail}
            v = self.eval(t.expr, {}, env, funs)
            loc, _ = m.read(env, t.name)
            m.store[loc] = v
            self.gc(tail)
            return UNIT
        if isinstance(t, Seq):
            if not t.items:
                self.gc(tail)
                return UNIT
            env = {**rest, **tail}
            for item in t.items[:-1]:
                self.eval(item, {}, env, funs)
            return self.eval(t.items[-1], tail, rest, funs)
        if isinstance(t, If):
            c = self.eval(t.cond, {}, {**rest, **tail}, funs)
            if c is True:
                return self.eval(t.then, tail, rest, funs)
            if c is False:
                return self.eval(t.else_, tail, rest, funs)
            raise _Stuck(f"condition is not a boolean: {format_value(c)}")
        if isinstance(t, LetRec):
            env = {**rest, **tail}
            extended = _group_closures(t, env, funs, compact=True)
            if m.check_invariants:
                _check_compact(extended)
                _check_aliasing([tail, rest], extended)
            return self.eval(t.rest, tail, rest, extended)
        if isinstance(t, Call):
            return self.call(t, tail, rest, funs)
        raise _Stuck(f"{type(t).__name__} is not a core term")

    def call(self, t: Call, tail: VarEnv, rest: VarEnv, funs: FunEnv):
        m = self.m
        clo = funs.get(t.fname)
        if clo is None:
            raise _Stuck(f"unbound function {t.fname}")
        if len(t.args) != len(clo.params):
            raise _Stuck(f"{t.fname} expects {len(clo.params)} arguments, got {len(t.args)}")
        env = {**rest, **tail}
        values = [self.eval(a, {}, env, funs) for a in t.args]
        params: VarEnv = {}
        for x, v in zip(clo.params, values):
            loc = m.fresh()
            params[x] = loc
            m.store[loc] = v
        callee_funs = dict(clo.funs)
        callee_funs[t.fname] = clo
        if m.check_invariants:
            _check_aliasing([params, clo.env], callee_funs)
        m.enter()
        try:
            value = self.eval(clo.body, params, clo.env, callee_funs)
        finally:
            m.depth -= 1
        self.gc(tail)
        return value


# --------------------------------------------------------------------------
# Public evaluation API

def eval_naive(t: Term, env: Optional[VarEnv] = None, funs: Optional[FunEnv] = None,
               store: Optional[Store] = None, fuel: int = DEFAULT_FUEL,
               check_invariants: bool = True, max_depth: int = DEFAULT_MAX_DEPTH,
               trace: Optional[List[str]] = None) -> Outcome:
    """Evaluate ``t`` under the naive rules; rule applications are appended to ``trace`` if given."""
    env, funs = dict(env or {}), dict(funs or {})
    machine = _Machine(store, fuel, check_invariants, max_depth, _locations(env, funs), trace)
    interpreter = NaiveInterpreter(machine)
    outcome = machine.run(lambda: interpreter.eval(t, env, funs))
    machine.close_trace()
    return outcome


def eval_opt(t: Term, env: Optional[SplitEnv] = None, funs: Optional[FunEnv] = None,
             store: Optional[Store] = None, fuel: int = DEFAULT_FUEL,
             check_invariants: bool = True, max_depth: int = DEFAULT_MAX_DEPTH,
             trace: Optional[List[str]] = None) -> Outcome:
    env = env or SplitEnv()
    funs = dict(funs or {})
    machine = _Machine(store, fuel, check_invariants, max_depth, _locations(env.merged(), funs),
                       trace)
    interpreter = OptimisedInterpreter(machine)
    if check_invariants:
        _check_compact(funs)
    outcome = machine.run(lambda: interpreter.eval(t, dict(env.tail), dict(env.rest), funs))
    machine.close_trace()
    return outcome


def derivation(evaluate, t: Term, fuel: int = DEFAULT_FUEL) -> List[str]:
    """Rule applications of one run of ``eval_naive`` or ``eval_opt``, indented by call depth."""
    trace: List[str] = []
    evaluate(t, fuel=fuel, trace=trace)
    return trace


@dataclass
class ProgramRun:
    outcome: Outcome
    output: List[str]


def eval_program(p: Program, fuel: int = 10_000_000, args: Tuple[Value, ...] = (),
                 max_depth: int = DEFAULT_MAX_DEPTH) -> ProgramRun:
    """Run a whole surface program under the naive rules (sequential; no scheduler)."""
    machine = _Machine(None, fuel, False, max_depth)
    interpreter = NaiveInterpreter(machine, statements=True)
    env: VarEnv = {}
    for g in p.globals:
        loc = machine.fresh()
        env[g.name] = loc
        machine.store[loc] = g.value
    funs: FunEnv = {}
    for f in p.functions:
        funs[f.name] = Closure(tuple(f.params), f.body, env, funs, f.name, tuple(f.local_names))
    entry = p.entry_function
    actuals = tuple(Const(a) for a in args) or tuple(Const(0) for _ in entry.params)
    outcome = machine.run(lambda: interpreter.eval(Call(entry.name, actuals), env, funs))
    return ProgramRun(outcome, list(interpreter.ctx.output))


# --------------------------------------------------------------------------
# Lifting on core terms

def lift_core(t: Term, target: str, hset) -> Term:
    """Add ``target`` as a trailing parameter of every function in ``hset`` and at every call."""
    hset = frozenset(hset)
    if not hset:
        return t

    def term(u: Term) -> Term:
        if isinstance(u, LetRec):
            return replace(u, funs=tuple(function(f) for f in u.funs), rest=term(u.rest))
        if isinstance(u, Call):
            args = tuple(term(a) for a in u.args)
            if u.fname in hset:
                args += (Var(target, span=u.span),)
            return replace(u, args=args)
        kids = children(u)
        if not kids:
            return u
        return rebuild(u, [term(c) for c in kids])

    def function(f: FunDecl) -> FunDecl:
        params = tuple(f.params)
        if f.name in hset:
            params += (target,)
        return replace(f, params=params, body=term(f.body))

    return term(t)


def _find_function(t: Term, name: str) -> Optional[FunDecl]:
    stack = [t]
    while stack:
        u = stack.pop()
        if isinstance(u, LetRec):
            for f in u.funs:
                if f.name == name:
                    return f
                stack.append(f.body)
            stack.append(u.rest)
        else:
            stack.extend(children(u))
    return None


def inner_functions(f: FunDecl) -> Set[str]:
    """Names of every function defined (at any depth) inside ``f``."""
    out: Set[str] = set()
    stack = [f.body]
    while stack:
        u = stack.pop()
        if isinstance(u, LetRec):
            for g in u.funs:
                out.add(g.name)
                stack.append(g.body)
            stack.append(u.rest)
        else:
            stack.extend(children(u))
    return out


def _calls_with_tail(body: Term) -> Iterator[Tuple[Call, bool]]:
    """Calls in a function body with whether each is in tail position of its own function."""

    def visit(u: Term, tail: bool):
        if isinstance(u, Call):
            yield u, tail
            for a in u.args:
                yield from visit(a, False)
        elif isinstance(u, If):
            yield from visit(u.cond, False)
            yield from visit(u.then, tail)
            yield from visit(u.else_, tail)
        elif isinstance(u, Seq):
            for i, item in enumerate(u.items):
                yield from visit(item, tail and i == len(u.items) - 1)
        elif isinstance(u, LetRec):
            for g in u.funs:
                yield from visit(g.body, True)
            yield from visit(u.rest, tail)
        else:
            for c in children(u):
                yield from visit(c, False)

    yield from visit(body, True)


def check_liftable_core(t: Term, x: str, g: str, hset) -> bool:
    """``x`` is a parameter of ``g`` and every call to ``hset`` inside ``g`` is a tail call."""
    decl = _find_function(t, g)
    if decl is None or x not in decl.params:
        return False
    hset = set(hset)
    return all(tail for call, tail in _calls_with_tail(decl.body) if call.fname in hset)


def liftable_candidates(t: Term) -> List[Tuple[str, str, Tuple[str, ...]]]:
    """(g, x, inner functions of g) for every parameter of a function with inner functions."""
    out = []
    stack = [t]
    while stack:
        u = stack.pop()
        if isinstance(u, LetRec):
            for f in u.funs:
                inner = tuple(sorted(inner_functions(f)))
                if inner:
                    out.extend((f.name, x, inner) for x in f.params)
                stack.append(f.body)
            stack.append(u.rest)
        else:
            stack.extend(children(u))
    return sorted(out)


# --------------------------------------------------------------------------
# Term generation

class Profile(str, Enum):
    LIFTABLE = "liftable"
    ANY = "any"


class _Generator:
    def __init__(self, seed: int, profile: Profile):
        self.rng = random.Random(seed)
        self.profile = Profile(profile)
        self._params = 0
        self._funs = 0

    def leaf(self, scope: Tuple[str, ...]) -> Term:
        if scope and self.rng.random() < 0.5:
            return Var(self.rng.choice(scope))
        return Const(self.rng.choice([UNIT, True, False, 0, 1, 2, 3, 7]))

    def condition(self, scope: Tuple[str, ...]) -> Term:
        if scope and self.rng.random() < 0.3:
            return Var(self.rng.choice(scope))
        return Const(self.rng.random() < 0.5)

    def callable(self, funs: Dict[str, int], top: Set[str], tail: bool,
                 in_function: bool) -> List[str]:
        names = sorted(funs)
        if self.profile is Profile.LIFTABLE and in_function and not tail:
            names = [f for f in names if f in top]
        return names

    def call(self, name: str, arity: int, size: int, scope, funs, top, in_function) -> Call:
        share = max((size - 1) // max(arity, 1), 1)
        args = tuple(self.term(share, scope, funs, top, False, in_function) for _ in range(arity))
        return Call(name, args)

    def term(self, size: int, scope: Tuple[str, ...], funs: Dict[str, int], top: Set[str],
             tail: bool, in_function: bool) -> Term:
        rng = self.rng
        if size <= 1:
            return self.leaf(scope)
        targets = self.callable(funs, top, tail, in_function)
        choices = ["seq", "if", "letrec"] + (["assign"] if scope else []) + (["call"] * 2 if targets else [])
        kind = rng.choice(choices)
        if kind == "assign":
            return Assign(rng.choice(scope), self.term(size - 1, scope, funs, top, False, in_function))
        if kind == "seq":
            left = rng.randint(1, size - 1)
            return Seq((self.term(left, scope, funs, top, False, in_function),
                        self.term(size - left, scope, funs, top, tail, in_function)))
        if kind == "if":
            half = max((size - 1) // 2, 1)
            return If(self.condition(scope),
                      self.term(half, scope, funs, top, tail, in_function),
                      self.term(half, scope, funs, top, tail, in_function))
        if kind == "call":
            name = rng.choice(targets)
            return self.call(name, funs[name], size, scope, funs, top, in_function)
        return self.letrec(size, scope, funs, top, tail, in_function)

    def letrec(self, size: int, scope, funs, top, tail: bool, in_function: bool) -> Term:
        rng = self.rng
        self._funs += 1
        name = f"f{self._funs}"
        params = []
        for _ in range(rng.choice([0, 1, 1, 2])):
            self._params += 1
            params.append(f"x{self._params}")
        body_size = max(size // 2, 1)
        body_funs = dict(funs)
        if rng.random() < 0.15:
            body_funs[name] = len(params)
        body = self.term(body_size, scope + tuple(params), body_funs, top, True, True)
        rest_funs = dict(funs)
        rest_funs[name] = len(params)
        rest_top = top | ({name} if not in_function else set())
        rest_size = max(size - body_size - 1, 1)
        can_call = name in self.callable(rest_funs, rest_top, tail, in_function)
        if can_call and rng.random() < 0.7:
            lead = self.term(max(rest_size - len(params) - 1, 1), scope, rest_funs, rest_top,
                             False, in_function) if rest_size > 3 else None
            call = self.call(name, len(params), len(params) + 1, scope, rest_funs, rest_top,
                             in_function)
            rest: Term = Seq((lead, call)) if lead is not None else call
        else:
            rest = self.term(rest_size, scope, rest_funs, rest_top, tail, in_function)
        decl = FunDecl(name, tuple(params), body, ret_type="int",
                       param_types=tuple("int" for _ in params))
        return LetRec((decl,), rest)


def gen_term(seed: int, size: int = 24, profile: Union[Profile, str] = Profile.ANY) -> Term:
    """Deterministic closed core term for ``seed``."""
    return _Generator(seed, Profile(profile)).term(size, (), {}, set(), True, False)


# --------------------------------------------------------------------------
# Differential harnesses

class VerdictKind(str, Enum):
    AGREE = "agree"
    DISAGREE = "disagree"
    INAPPLICABLE = "inapplicable"


@dataclass(frozen=True)
class Verdict:
    kind: VerdictKind
    detail: str = ""
    left: Optional[Outcome] = None
    right: Optional[Outcome] = None

    @property
    def agrees(self) -> bool:
        return self.kind is VerdictKind.AGREE


def _same_outcome(a: Outcome, b: Outcome) -> bool:
    if type(a) is not type(b):
        return False
    if isinstance(a, Done):
        return same_value(a.value, b.value)
    return True


def diff_theorem2(t: Term, fuel: int = DEFAULT_FUEL) -> Verdict:
    """Naive and optimised rules agree, and the optimised run leaves an empty store."""
    naive = eval_naive(t, fuel=fuel)
    opt = eval_opt(t, fuel=fuel)
    if not _same_outcome(naive, opt):
        return Verdict(VerdictKind.DISAGREE, "outcomes differ", naive, opt)
    if isinstance(opt, Done) and opt.store:
        return Verdict(VerdictKind.DISAGREE, "optimised run left a non-empty store", naive, opt)
    return Verdict(VerdictKind.AGREE, "", naive, opt)


def _lifting_verdict(t: Term, x: str, g: str, hset, fuel: int, evaluate,
                     compare_store: bool) -> Verdict:
    if not check_liftable_core(t, x, g, hset):
        return Verdict(VerdictKind.INAPPLICABLE, f"{x} is not liftable in {g}")
    original = evaluate(t, fuel=fuel)
    if not isinstance(original, Done):
        return Verdict(VerdictKind.INAPPLICABLE, "original does not terminate", original)
    # the lifted term evaluates one extra argument per call
    lifted = evaluate(lift_core(t, x, hset), fuel=fuel * 4)
    if not isinstance(lifted, Done) or not same_value(original.value, lifted.value):
        return Verdict(VerdictKind.DISAGREE, "lifted value differs", original, lifted)
    if compare_store and original.store != lifted.store:
        return Verdict(VerdictKind.DISAGREE, "lifted store differs", original, lifted)
    return Verdict(VerdictKind.AGREE, "", original, lifted)


def diff_theorem1(t: Term, x: str, g: str, hset, fuel: int = DEFAULT_FUEL) -> Verdict:
    """Lifting a liftable parameter preserves the value under the naive rules."""
    return _lifting_verdict(t, x, g, hset, fuel, eval_naive, compare_store=False)


def diff_theorem3(t: Term, x: str, g: str, hset, fuel: int = DEFAULT_FUEL) -> Verdict:
    """Lifting a liftable parameter preserves value and final store under the optimised rules."""
    return _lifting_verdict(t, x, g, hset, fuel, eval_opt, compare_store=True)


@dataclass
class SemanticsReport:
    seed: int
    count: int
    fuel: int
    profile: str
    equivalence: Counter = field(default_factory=Counter)
    lifting_naive: Counter = field(default_factory=Counter)
    lifting_optimised: Counter = field(default_factory=Counter)
    outcomes: Counter = field(default_factory=Counter)
    failures: List[str] = field(default_factory=list)

    @property
    def disagreements(self) -> int:
        return (self.equivalence[VerdictKind.DISAGREE.value]
                + self.lifting_naive[VerdictKind.DISAGREE.value]
                + self.lifting_optimised[VerdictKind.DISAGREE.value])

    @property
    def ok(self) -> bool:
        return self.disagreements == 0

    @property
    def first_disagreement(self) -> Optional[str]:
        return self.failures[0] if self.failures else None

    def summary(self) -> str:
        def row(name: str, c: Counter) -> str:
            return (f"{name:<22} agree {c['agree']:>6}  disagree {c['disagree']:>4}  "
                    f"inapplicable {c['inapplicable']:>6}")
        lines = [
            f"terms {self.count} (seeds {self.seed}..{self.seed + self.count - 1}, "
            f"fuel {self.fuel}, profile {self.profile})",
            f"outcomes: done {self.outcomes['done']}, stuck {self.outcomes['stuck']}, "
            f"out of fuel {self.outcomes['out-of-fuel']}",
            row("naive vs optimised", self.equivalence),
            row("lifting (naive)", self.lifting_naive),
            row("lifting (optimised)", self.lifting_optimised),
        ]
        return "\n".join(lines)


def _failure_text(seed: int, t: Term, harness: str, verdict: Verdict, extra: str = "",
                  derivations: Tuple[List[str], List[str]] = ([], [])) -> str:
    lines = [f"seed {seed}: {harness} disagreement{extra}: {verdict.detail}", dump(t)]
    if verdict.left is not None:
        lines.append(f"  left:  {describe(verdict.left)}")
    if verdict.right is not None:
        lines.append(f"  right: {describe(verdict.right)}")
    for side, rules in zip(("left", "right"), derivations):
        if rules:
            lines.append(f"  {side} derivation:")
            lines.extend(f"    {rule}" for rule in rules)
    return "\n".join(lines)


def term_size(seed: int) -> int:
    return 6 + seed % 30


def check_semantics(seed: int = 0, count: int = 1000, fuel: int = DEFAULT_FUEL,
                    profile: Union[Profile, str] = Profile.ANY) -> SemanticsReport:
    """Run every differential harness over ``count`` generated terms."""
    profile = Profile(profile)
    report = SemanticsReport(seed, count, fuel, profile.value)
    for s in range(seed, seed + count):
        t = gen_term(s, term_size(s), profile)
        verdict = diff_theorem2(t, fuel)
        report.equivalence[verdict.kind.value] += 1
        if verdict.left is not None:
            report.outcomes[verdict.left.kind] += 1
        if not verdict.agrees:
            traces = (derivation(eval_naive, t, fuel), derivation(eval_opt, t, fuel))
            report.failures.append(_failure_text(s, t, "naive/optimised", verdict, "", traces))
        for g, x, hset in liftable_candidates(t):
            for counter, harness, evaluate in ((report.lifting_naive, diff_theorem1, eval_naive),
                                               (report.lifting_optimised, diff_theorem3, eval_opt)):
                v = harness(t, x, g, hset, fuel)
                counter[v.kind.value] += 1
                if v.kind is VerdictKind.DISAGREE:
                    traces = (derivation(evaluate, t, fuel),
                              derivation(evaluate, lift_core(t, x, hset), fuel * 4))
                    report.failures.append(
                        _failure_text(s, t, harness.__name__, v, f" lifting {x} of {g}", traces))
    logger.info("semantics check: %d terms, %d disagreements", count, report.disagreements)
    return report
