"""
Native Builtins

Direct-style builtins shared by the reference interpreters and the runtime.
Every builtin receives a ``NativeContext`` that supplies the effects it needs
(output, heap cells, condition variables, I/O keys).

Version: 1.0.0
"""

import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

from .values import UNIT, Ref, Value, format_value

# Scheduler handles returned by ``link`` and accepted by it.
EVENT_LOOP = 0
THREAD_POOL = 1

IO_READ = 1
IO_WRITE = 2


class NativeFault(Exception):
    """A builtin was applied to values it does not accept."""


class NativeContext(ABC):
    """Effects available to native builtins."""

    @abstractmethod
    def emit(self, text: str) -> None:
        ...

    @abstractmethod
    def alloc(self, value: Value) -> Ref:
        ...

    @abstractmethod
    def free(self, ref: Ref) -> None:
        ...

    def cond_new(self) -> int:
        raise NativeFault("condition variables are not available here")

    def signal(self, cv: int, broadcast: bool) -> None:
        raise NativeFault("condition variables are not available here")

    def accept(self, key: int) -> int:
        raise NativeFault("no event source attached")

    def recv(self, key: int) -> int:
        raise NativeFault("no event source attached")

    def send(self, key: int, value: Value) -> None:
        raise NativeFault("no event source attached")

    def nap(self, millis: int) -> None:
        time.sleep(millis / 1000.0)


@dataclass(frozen=True)
class NativeSpec:
    """Description of one builtin."""
    name: str
    arity: Optional[int]
    fn: Callable[[NativeContext, List], Value]
    returns_value: bool = True
    operator: Optional[str] = None


def _int(name: str, v) -> int:
    if type(v) is not int:
        raise NativeFault(f"{name}: expected int, got {format_value(v)}")
    return v


def _bool(name: str, v) -> bool:
    if type(v) is not bool:
        raise NativeFault(f"{name}: expected bool, got {format_value(v)}")
    return v


def _ref(name: str, v) -> Ref:
    if not isinstance(v, Ref):
        raise NativeFault(f"{name}: expected ref, got {format_value(v)}")
    return v


def c_div(a: int, b: int) -> int:
    """Integer division truncating toward zero, as in C."""
    if b == 0:
        raise NativeFault("div: division by zero")
    q = abs(a) // abs(b)
    return q if (a >= 0) == (b >= 0) else -q


def c_mod(a: int, b: int) -> int:
    if b == 0:
        raise NativeFault("mod: division by zero")
    return a - b * c_div(a, b)


def _arith(name: str, op: Callable[[int, int], int]) -> Callable:
    def apply(ctx, args):
        return op(_int(name, args[0]), _int(name, args[1]))
    return apply


def _compare(name: str, op: Callable[[int, int], bool]) -> Callable:
    def apply(ctx, args):
        return op(_int(name, args[0]), _int(name, args[1]))
    return apply


def _equal(negate: bool) -> Callable:
    def apply(ctx, args):
        a, b = args
        if type(a) is not type(b):
            raise NativeFault(f"{'ne' if negate else 'eq'}: cannot compare "
                              f"{format_value(a)} and {format_value(b)}")
        return (a != b) if negate else (a == b)
    return apply


def _print(ctx, args):
    ctx.emit(" ".join(a if isinstance(a, str) else format_value(a) for a in args))
    return UNIT


def _alloc(ctx, args):
    return ctx.alloc(args[0])


def _free(ctx, args):
    ctx.free(_ref("free", args[0]))
    return UNIT


def _signal(broadcast: bool) -> Callable:
    def apply(ctx, args):
        ctx.signal(_int("signal", args[0]), broadcast)
        return UNIT
    return apply


def _send(ctx, args):
    ctx.send(_int("send", args[0]), args[1])
    return UNIT


def _nap(ctx, args):
    ctx.nap(_int("nap", args[0]))
    return UNIT


BUILTINS: Dict[str, NativeSpec] = {spec.name: spec for spec in (
    NativeSpec("add", 2, _arith("add", lambda a, b: a + b), operator="+"),
    NativeSpec("sub", 2, _arith("sub", lambda a, b: a - b), operator="-"),
    NativeSpec("mul", 2, _arith("mul", lambda a, b: a * b), operator="*"),
    NativeSpec("div", 2, _arith("div", c_div), operator="/"),
    NativeSpec("mod", 2, _arith("mod", c_mod), operator="%"),
    NativeSpec("neg", 1, lambda ctx, a: -_int("neg", a[0]), operator="-"),
    NativeSpec("lt", 2, _compare("lt", lambda a, b: a < b), operator="<"),
    NativeSpec("le", 2, _compare("le", lambda a, b: a <= b), operator="<="),
    NativeSpec("gt", 2, _compare("gt", lambda a, b: a > b), operator=">"),
    NativeSpec("ge", 2, _compare("ge", lambda a, b: a >= b), operator=">="),
    NativeSpec("eq", 2, _equal(False), operator="=="),
    NativeSpec("ne", 2, _equal(True), operator="!="),
    NativeSpec("and", 2, lambda ctx, a: _bool("and", a[0]) and _bool("and", a[1]), operator="&&"),
    NativeSpec("or", 2, lambda ctx, a: _bool("or", a[0]) or _bool("or", a[1]), operator="||"),
    NativeSpec("not", 1, lambda ctx, a: not _bool("not", a[0]), operator="!"),
    NativeSpec("print", None, _print, returns_value=False),
    NativeSpec("alloc", 1, _alloc),
    NativeSpec("free", 1, _free, returns_value=False),
    NativeSpec("cond_new", 0, lambda ctx, a: ctx.cond_new()),
    NativeSpec("signal", 1, _signal(False), returns_value=False),
    NativeSpec("signal_all", 1, _signal(True), returns_value=False),
    NativeSpec("accept", 1, lambda ctx, a: ctx.accept(_int("accept", a[0]))),
    NativeSpec("recv", 1, lambda ctx, a: ctx.recv(_int("recv", a[0]))),
    NativeSpec("send", 2, _send, returns_value=False),
    NativeSpec("nap", 1, _nap, returns_value=False),
    NativeSpec("threadpool", 0, lambda ctx, a: THREAD_POOL),
    NativeSpec("eventloop", 0, lambda ctx, a: EVENT_LOOP),
)}

BINARY_OPERATORS: Dict[str, str] = {
    spec.operator: spec.name for spec in BUILTINS.values()
    if spec.operator and spec.arity == 2
}
UNARY_OPERATORS: Dict[str, str] = {"-": "neg", "!": "not"}

# cps primitives: name -> (min arity, max arity, returns a value)
PRIMITIVES: Dict[str, tuple] = {
    "yield": (0, 0, False),
    "sleep": (1, 2, True),
    "io_wait": (2, 3, True),
    "cond_wait": (1, 1, False),
    "link": (1, 1, True),
}


def apply_builtin(name: str, ctx: NativeContext, args: Sequence) -> Value:
    spec = BUILTINS.get(name)
    if spec is None:
        raise NativeFault(f"unknown builtin {name}")
    if spec.arity is not None and len(args) != spec.arity:
        raise NativeFault(f"{name}: expected {spec.arity} arguments, got {len(args)}")
    return spec.fn(ctx, list(args))


class HeapContext(NativeContext):
    """Context with a private heap and captured output; used by the interpreters."""

    def __init__(self):
        self.heap: Dict[int, Value] = {}
        self.output: List[str] = []
        self._next_cell = 0
        self._next_cond = 0

    def emit(self, text: str) -> None:
        self.output.append(text)

    def alloc(self, value: Value) -> Ref:
        self._next_cell += 1
        self.heap[self._next_cell] = value
        return Ref(self._next_cell)

    def free(self, ref: Ref) -> None:
        if ref.cell not in self.heap:
            raise NativeFault(f"free: dangling {format_value(ref)}")
        del self.heap[ref.cell]

    def load(self, ref: Ref) -> Value:
        try:
            return self.heap[ref.cell]
        except KeyError:
            raise NativeFault(f"deref: dangling {format_value(ref)}") from None

    def store(self, ref: Ref, value: Value) -> None:
        if ref.cell not in self.heap:
            raise NativeFault(f"store: dangling {format_value(ref)}")
        self.heap[ref.cell] = value

    def cond_new(self) -> int:
        self._next_cond += 1
        return self._next_cond

    def signal(self, cv: int, broadcast: bool) -> None:
        # single-threaded evaluation: nobody can be waiting
        return None

    def nap(self, millis: int) -> None:
        return None
