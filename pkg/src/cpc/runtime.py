"""
Continuation Runtime

Executes continuation IR on a trampolined, cooperative scheduler:

- linear continuations with two operations, ``push`` and ``invoke``
- a single-threaded event loop (ready queue, timer heap, condition variables,
  readiness waits against an ``EventSource``)
- a bounded worker pool for detached threads; continuations move between the
  loop and the pool through a message queue, never shared
- deterministic virtual time for tests, wall-clock time for the OS-backed source

Version: 1.0.0
"""

import heapq
import itertools
import logging
import os
import queue
import selectors
import socket
import sys
import threading
import time
from abc import ABC, abstractmethod
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Deque, Dict, List, Optional, Sequence, Set, Tuple

from .cps import CpsFunction, CpsProgram, Frame, InvokeValue, PushInvoke, PushPushInvoke
from .errors import (
    InvokeEmpty, LinearityViolation, ParseError, RuntimeTrap, SchedulerClosed, SourceSpan,
)
from .lang import (
    Assign, Break, Call, Const, Deref, FunDecl, If, NativeCall, Return, Seq, SetRef, Spawn,
    Str, Term, Var, While,
)
from .natives import (
    BUILTINS, EVENT_LOOP, IO_READ, IO_WRITE, THREAD_POOL, HeapContext, NativeFault, c_div, c_mod,
)
from .values import UNIT, Ref, format_value

logger = logging.getLogger(__name__)

_BREAK = object()
_SUSPEND = object()


class ThreadState(Enum):
    READY = "ready"
    RUNNING = "running"
    SLEEPING = "sleeping"
    WAITING_IO = "waiting-io"
    WAITING_COND = "waiting-cond"
    DETACHED = "detached"
    DONE = "done"


class ExitStatus(Enum):
    COMPLETED = "completed"
    DEADLOCK = "deadlock"
    FUEL_EXHAUSTED = "fuel-exhausted"
    FAULT = "fault"


_EXIT_CODES = {
    ExitStatus.COMPLETED: 0,
    ExitStatus.DEADLOCK: 2,
    ExitStatus.FUEL_EXHAUSTED: 4,
    ExitStatus.FAULT: 4,
}


class _FuelExhausted(Exception):
    pass


class _Stopped(Exception):
    pass


# --------------------------------------------------------------------------
# Continuations

class FunctionEntry:
    """Runtime view of a function descriptor."""
    __slots__ = ("id", "name", "arity", "receive", "run", "primitive")

    def __init__(self, id: int, name: str, arity: Optional[int], receive: Tuple[int, ...] = (),
                 run: Optional[Callable] = None, primitive: Optional[Callable] = None):
        self.id = id
        self.name = name
        self.arity = arity
        self.receive = receive
        self.run = run
        self.primitive = primitive

    def __repr__(self) -> str:
        return f"FunctionEntry({self.id}, {self.name!r}, receive={self.receive})"


class Continuation:
    """Growable stack of frames ``(entry, saved arguments)``.

    Capacity grows by ``growth`` when full and never shrinks. A continuation is
    consumed when its thread exits; any later use is a linearity violation.
    """
    __slots__ = ("frames", "top", "growth", "pushes", "pops", "owner")

    def __init__(self, capacity: int = 4, growth: int = 2, owner: int = 0):
        self.frames: Optional[List[Any]] = [None] * max(capacity, 1)
        self.top = 0
        self.growth = max(growth, 2)
        self.pushes = 0
        self.pops = 0
        self.owner = owner

    @property
    def capacity(self) -> int:
        return len(self.frames) if self.frames is not None else 0

    @property
    def consumed(self) -> bool:
        return self.frames is None

    def __len__(self) -> int:
        return self.top

    def push(self, entry: FunctionEntry, args: Sequence) -> "Continuation":
        frames = self.frames
        if frames is None:
            raise LinearityViolation(f"push onto the consumed continuation of t{self.owner}")
        if self.top == len(frames):
            frames.extend([None] * (len(frames) * (self.growth - 1)))
        frames[self.top] = (entry, args)
        self.top += 1
        self.pushes += 1
        return self

    def invoke(self, value=None) -> Tuple[FunctionEntry, Sequence]:
        """Pop the top frame; ``value`` fills its receive slots."""
        frames = self.frames
        if frames is None:
            raise LinearityViolation(f"invoke of the consumed continuation of t{self.owner}")
        if self.top == 0:
            raise InvokeEmpty(f"invoke of an empty continuation (t{self.owner})")
        self.top -= 1
        frame = frames[self.top]
        if frame is None:
            raise LinearityViolation(f"frame {self.top} of t{self.owner} invoked twice")
        frames[self.top] = None
        self.pops += 1
        entry, args = frame
        if entry.receive and value is not None:
            full = list(args)
            for i in entry.receive:
                full.insert(i, value)
            args = full
        return entry, args

    def consume(self, check: bool = True) -> None:
        if check and (self.top != 0 or self.pushes != self.pops):
            raise LinearityViolation(
                f"t{self.owner} exited with {self.top} live frames "
                f"({self.pushes} pushed, {self.pops} invoked)")
        self.frames = None


def push(k: Continuation, entry: FunctionEntry, args: Sequence) -> Continuation:
    if entry.arity is not None and len(args) + len(entry.receive) != entry.arity:
        raise RuntimeTrap(f"{entry.name} expects {entry.arity} arguments, frame has {len(args)}")
    return k.push(entry, args)


def invoke(k: Continuation, value=None) -> Tuple[FunctionEntry, Sequence]:
    return k.invoke(value)


class ThreadRecord:
    __slots__ = ("id", "k", "state", "affinity", "value", "token", "detail", "waits")

    def __init__(self, id: int, k: Continuation):
        self.id = id
        self.k = k
        self.state = ThreadState.READY
        self.affinity = EVENT_LOOP
        self.value = None
        self.token = 0
        self.detail = ""
        self.waits: Tuple[Tuple[str, Any], ...] = ()

    def describe(self) -> str:
        where = "pool" if self.affinity == THREAD_POOL else "loop"
        detail = f" {self.detail}" if self.detail else ""
        return f"t{self.id} {self.state.value}{detail} ({where})"


# --------------------------------------------------------------------------
# Event sources

@dataclass(frozen=True)
class ScriptEvent:
    tick: int
    key: int
    direction: int
    payload: int = 0


def _direction(text: str, span: SourceSpan) -> int:
    mapping = {"read": IO_READ, "r": IO_READ, "1": IO_READ,
               "write": IO_WRITE, "w": IO_WRITE, "2": IO_WRITE}
    if text not in mapping:
        raise ParseError(f"unknown direction {text!r}", span, expected=["read", "write"])
    return mapping[text]


def parse_event_script(text: str, filename: str = "<script>") -> List[ScriptEvent]:
    """Parse ``at <tick> ready <key> <dir> [payload]`` lines; ``#`` starts a comment."""
    events: List[ScriptEvent] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        span = SourceSpan(filename, lineno, 1, len(line))
        words = line.split()
        if len(words) not in (5, 6) or words[0] != "at" or words[2] != "ready":
            raise ParseError("malformed event line", span,
                             expected=["at <tick> ready <key> <dir> [payload]"])
        try:
            tick, key = int(words[1]), int(words[3])
            payload = int(words[5]) if len(words) == 6 else 0
        except ValueError:
            raise ParseError("tick, key and payload must be integers", span) from None
        if tick < 0:
            raise ParseError("negative tick", span)
        events.append(ScriptEvent(tick, key, _direction(words[4], span), payload))
    return sorted(events, key=lambda e: e.tick)


class EventSource(ABC):
    """Readiness of integer keys plus the clock the scheduler runs on."""

    realtime = False

    def __init__(self):
        self.transcript: List[Tuple[int, Any]] = []

    @abstractmethod
    def now(self) -> int:
        ...

    @abstractmethod
    def known(self, key: int) -> bool:
        ...

    @abstractmethod
    def ready(self, key: int, direction: int) -> bool:
        ...

    @abstractmethod
    def wait(self, deadline: Optional[int], waiting: Set[Tuple[int, int]]) -> bool:
        """Advance until ``deadline`` or some awaited readiness.

        Returns False when nothing can ever happen (no deadline and no
        future events).
        """

    def accept(self, key: int) -> int:
        return -1

    def recv(self, key: int) -> int:
        return -1

    def send(self, key: int, value) -> None:
        self.transcript.append((key, value))

    def close(self) -> None:
        return None


class VirtualEventSource(EventSource):
    """Deterministic source driven by a scripted schedule on a virtual clock.

    A read event on a key queues one item (a connection for a listening key,
    a payload for a connection). Readiness stays pending until consumed by
    ``accept`` or ``recv``; write readiness never expires.
    """

    first_connection_key = 100

    def __init__(self, events: Sequence[ScriptEvent] = ()):
        super().__init__()
        self._events: Deque[ScriptEvent] = deque(sorted(events, key=lambda e: e.tick))
        self._clock = 0
        self._keys: Set[int] = {e.key for e in self._events}
        self._pending: Dict[int, Deque[int]] = {}
        self._writable: Set[int] = set()
        self._next_key = itertools.count(self.first_connection_key)

    @classmethod
    def from_text(cls, text: str, filename: str = "<script>") -> "VirtualEventSource":
        return cls(parse_event_script(text, filename))

    def now(self) -> int:
        return self._clock

    def known(self, key: int) -> bool:
        return key in self._keys

    def ready(self, key: int, direction: int) -> bool:
        if direction == IO_WRITE:
            return key in self._writable
        return bool(self._pending.get(key))

    def next_event_tick(self) -> Optional[int]:
        return self._events[0].tick if self._events else None

    def wait(self, deadline: Optional[int], waiting: Set[Tuple[int, int]]) -> bool:
        candidates = [t for t in (deadline, self.next_event_tick()) if t is not None]
        if not candidates:
            return False
        self._clock = max(self._clock, min(candidates))
        while self._events and self._events[0].tick <= self._clock:
            event = self._events.popleft()
            if event.direction == IO_WRITE:
                self._writable.add(event.key)
            else:
                self._pending.setdefault(event.key, deque()).append(event.payload)
        return True

    def accept(self, key: int) -> int:
        pending = self._pending.get(key)
        if not pending:
            return -1
        pending.popleft()
        conn = next(self._next_key)
        self._keys.add(conn)
        return conn

    def recv(self, key: int) -> int:
        pending = self._pending.get(key)
        if not pending:
            return 0 if key in self._keys else -1
        return pending.popleft()


class SelectorEventSource(EventSource):
    """OS readiness through ``selectors``; key 1 is a listening TCP socket.

    ``recv`` reads once and returns the integer on the first line received
    (0 at end of stream, -1 when it does not parse); ``send`` writes the
    value followed by a newline. Ticks are milliseconds.
    """

    realtime = True
    listen_key = 1

    def __init__(self, port: int, host: str = "127.0.0.1"):
        super().__init__()
        self._start = time.monotonic()
        server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        server.bind((host, port))
        server.listen()
        server.setblocking(False)
        self._sockets: Dict[int, socket.socket] = {self.listen_key: server}
        self._next_key = itertools.count(VirtualEventSource.first_connection_key)
        logger.info("listening on %s:%d", host, port)

    def now(self) -> int:
        return int((time.monotonic() - self._start) * 1000)

    def known(self, key: int) -> bool:
        return key in self._sockets

    def _select(self, pairs: Set[Tuple[int, int]], timeout: Optional[float]):
        sel = selectors.DefaultSelector()
        try:
            masks: Dict[int, int] = {}
            for key, direction in pairs:
                if key in self._sockets:
                    bit = selectors.EVENT_READ if direction == IO_READ else selectors.EVENT_WRITE
                    masks[key] = masks.get(key, 0) | bit
            for key, mask in masks.items():
                sel.register(self._sockets[key], mask, key)
            if not masks:
                if timeout:
                    time.sleep(timeout)
                return []
            return [(sk.data, mask) for sk, mask in sel.select(timeout)]
        finally:
            sel.close()

    def ready(self, key: int, direction: int) -> bool:
        bit = selectors.EVENT_READ if direction == IO_READ else selectors.EVENT_WRITE
        return any(k == key and mask & bit for k, mask in self._select({(key, direction)}, 0))

    def wait(self, deadline: Optional[int], waiting: Set[Tuple[int, int]]) -> bool:
        if deadline is None and not waiting:
            return False
        timeout = None if deadline is None else max(deadline - self.now(), 0) / 1000.0
        self._select(waiting, timeout)
        return True

    def accept(self, key: int) -> int:
        try:
            conn, _ = self._sockets[key].accept()
        except (BlockingIOError, KeyError):
            return -1
        conn.setblocking(False)
        new_key = next(self._next_key)
        self._sockets[new_key] = conn
        return new_key

    def recv(self, key: int) -> int:
        sock = self._sockets.get(key)
        if sock is None:
            return -1
        try:
            data = sock.recv(4096)
        except BlockingIOError:
            return -1
        if not data:
            return 0
        try:
            return int(data.split(b"\n", 1)[0].strip())
        except ValueError:
            return -1

    def send(self, key: int, value) -> None:
        super().send(key, value)
        sock = self._sockets.get(key)
        if sock is not None:
            sock.sendall(f"{format_value(value)}\n".encode())

    def close(self) -> None:
        for sock in self._sockets.values():
            sock.close()
        self._sockets.clear()


# --------------------------------------------------------------------------
# Exit report

@dataclass
class ExitReport:
    status: ExitStatus
    steps: int = 0
    result: Any = None
    output: List[str] = field(default_factory=list)
    trace: List[str] = field(default_factory=list)
    threads: List[str] = field(default_factory=list)
    transcript: List[Tuple[int, Any]] = field(default_factory=list)
    spawned: int = 0
    max_live_threads: int = 0
    max_continuation_capacity: int = 0
    max_host_depth: int = 0
    fault: Optional[str] = None

    @property
    def exit_code(self) -> int:
        return _EXIT_CODES[self.status]

    def transcript_lines(self) -> List[str]:
        return [f"sent {key} {format_value(value)}" for key, value in self.transcript]

    def summary(self) -> str:
        lines = [f"status: {self.status.value}", f"steps: {self.steps}"]
        if self.result is not None:
            lines.append(f"result: {format_value(self.result)}")
        if self.fault:
            lines.append(f"fault: {self.fault}")
        lines.append(f"threads spawned: {self.spawned} (max live {self.max_live_threads})")
        lines.append(f"max continuation capacity: {self.max_continuation_capacity}")
        lines.append(f"max host depth: {self.max_host_depth}")
        lines.extend(f"  {t}" for t in self.threads)
        return "\n".join(lines)


# --------------------------------------------------------------------------
# Native effects

class RuntimeContext(HeapContext):
    """Heap, output and scheduler effects of native builtins at runtime."""

    def __init__(self, runtime: "Runtime", on_output: Optional[Callable[[str], None]] = None):
        super().__init__()
        self.runtime = runtime
        self.on_output = on_output
        self._cells = itertools.count(1)
        self._conds = itertools.count(1)

    def emit(self, text: str) -> None:
        self.output.append(text)
        if self.on_output is not None:
            self.on_output(text)

    def alloc(self, value) -> Ref:
        cell = next(self._cells)
        self.heap[cell] = value
        return Ref(cell)

    def cond_new(self) -> int:
        return next(self._conds)

    def signal(self, cv: int, broadcast: bool) -> None:
        self.runtime.signal(cv, broadcast)

    def accept(self, key: int) -> int:
        return self.runtime.source.accept(key)

    def recv(self, key: int) -> int:
        return self.runtime.source.recv(key)

    def send(self, key: int, value) -> None:
        self.runtime.source.send(key, value)

    def nap(self, millis: int) -> None:
        time.sleep(max(millis, 0) / 1000.0)


# --------------------------------------------------------------------------
# Compilation of IR to closures

_INT_OPERATORS: Dict[str, Callable[[int, int], Any]] = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": c_div,
    "mod": c_mod,
    "lt": lambda a, b: a < b,
    "le": lambda a, b: a <= b,
    "gt": lambda a, b: a > b,
    "ge": lambda a, b: a >= b,
}


class _Compiler:
    """Turns IR bodies into Python closures over a list environment."""

    def __init__(self, runtime: "Runtime", ir: CpsProgram):
        self.rt = runtime
        self.ctx = runtime.ctx
        self.globals = runtime.globals
        self.entries = runtime.entries
        self.natives: Dict[str, Callable] = runtime.natives
        self.slots: Dict[str, int] = {}

    # expressions ---------------------------------------------------------

    def expr(self, t: Term) -> Callable:
        if isinstance(t, Const):
            value = t.value
            return lambda env: value
        if isinstance(t, Str):
            text = t.text
            return lambda env: text
        if isinstance(t, Var):
            if t.name in self.slots:
                i = self.slots[t.name]
                return lambda env: env[i]
            name, globals_ = t.name, self.globals
            return lambda env: globals_[name]
        if isinstance(t, Deref):
            ref, load = self.expr(t.expr), self._load
            return lambda env: load(ref(env))
        if isinstance(t, NativeCall):
            return self.builtin(t)
        if isinstance(t, Call) and t.fname in self.natives:
            return self.native_call(t)
        raise RuntimeTrap(f"cannot compile {type(t).__name__} as an expression")

    def _load(self, ref):
        if not isinstance(ref, Ref):
            raise NativeFault(f"deref: expected ref, got {format_value(ref)}")
        return self.ctx.load(ref)

    def builtin(self, t: NativeCall) -> Callable:
        spec = BUILTINS[t.builtin]
        args = [self.expr(a) for a in t.args]
        ctx = self.ctx
        if t.builtin in _INT_OPERATORS:
            op, fallback = _INT_OPERATORS[t.builtin], spec.fn
            a, b = args

            def int_op(env):
                x = a(env)
                y = b(env)
                if type(x) is int and type(y) is int:
                    return op(x, y)
                return fallback(ctx, [x, y])
            return int_op
        fn = spec.fn
        if len(args) == 1:
            only = args[0]
            return lambda env: fn(ctx, [only(env)])
        return lambda env: fn(ctx, [a(env) for a in args])

    def native_call(self, t: Call) -> Callable:
        args = [self.expr(a) for a in t.args]
        natives, name = self.natives, t.fname
        return lambda env: natives[name]([a(env) for a in args])

    def arguments(self, terms: Sequence[Term]) -> Callable:
        fns = [self.expr(a) for a in terms]
        if not fns:
            return lambda env: ()
        if len(fns) == 1:
            a0 = fns[0]
            return lambda env: (a0(env),)
        if len(fns) == 2:
            a0, a1 = fns
            return lambda env: (a0(env), a1(env))
        return lambda env: tuple([f(env) for f in fns])

    # statements ----------------------------------------------------------

    def stmt(self, t: Term) -> Callable:
        if isinstance(t, Seq):
            return self.block(t)
        if isinstance(t, Assign):
            value = self.expr(t.expr)
            if t.name in self.slots:
                i = self.slots[t.name]

                def assign_local(env):
                    env[i] = value(env)
                return assign_local
            name, globals_ = t.name, self.globals

            def assign_global(env):
                globals_[name] = value(env)
            return assign_global
        if isinstance(t, SetRef):
            target, value, store = self.expr(t.target), self.expr(t.value), self._store

            def set_ref(env):
                store(target(env), value(env))
            return set_ref
        if isinstance(t, (NativeCall, Call)):
            call = self.expr(t)

            def discard(env):
                call(env)
            return discard
        if isinstance(t, If):
            return self.branch(t)
        if isinstance(t, While):
            return self.loop(t)
        if isinstance(t, Break):
            return lambda env: _BREAK
        if isinstance(t, (Return, InvokeValue)):
            value = self.expr(t.expr)
            return value
        if isinstance(t, PushInvoke):
            return self.push_invoke(t.frame)
        if isinstance(t, PushPushInvoke):
            return self.push_push_invoke(t.second, t.first)
        if isinstance(t, Spawn):
            return self.spawn(t)
        raise RuntimeTrap(f"cannot compile {type(t).__name__} as a statement")

    def _store(self, ref, value):
        if not isinstance(ref, Ref):
            raise NativeFault(f"store: expected ref, got {format_value(ref)}")
        self.ctx.store(ref, value)

    def block(self, t: Seq) -> Callable:
        stmts = [self.stmt(s) for s in t.items]
        if len(stmts) == 1:
            return stmts[0]

        def run_block(env):
            for s in stmts:
                r = s(env)
                if r is not None:
                    return r
            return None
        return run_block

    def condition(self, t: Term) -> Callable:
        cond = self.expr(t)

        def check(env):
            c = cond(env)
            if c is True or c is False:
                return c
            raise NativeFault(f"condition is not a boolean: {format_value(c)}")
        return check

    def branch(self, t: If) -> Callable:
        cond, then, else_ = self.condition(t.cond), self.stmt(t.then), self.stmt(t.else_)
        return lambda env: then(env) if cond(env) else else_(env)

    def loop(self, t: While) -> Callable:
        cond, body = self.condition(t.cond), self.stmt(t.body)

        def run_loop(env):
            while cond(env):
                r = body(env)
                if r is _BREAK:
                    break
                if r is not None:
                    return r
            return None
        return run_loop

    def push_invoke(self, frame: Frame) -> Callable:
        entry, args, rt = self.entries[frame.descriptor], self.arguments(frame.args), self.rt

        def tail_call(env):
            rt.countdown -= 1
            if rt.countdown <= 0:
                rt.sample_depth()
            return (entry, args(env))
        return tail_call

    def push_push_invoke(self, second: Frame, first: Frame) -> Callable:
        second_entry, second_args = self.entries[second.descriptor], self.arguments(second.args)
        first_entry, first_args = self.entries[first.descriptor], self.arguments(first.args)

        def call_then(env):
            saved = second_args(env)
            return (second_entry, saved, first_entry, first_args(env))
        return call_then

    def spawn(self, t: Spawn) -> Callable:
        args, rt = self.arguments(t.args), self.rt
        entry = self.entries[self.rt.base_ids[t.fname]]

        def spawn_thread(env):
            rt.spawn(entry, args(env))
        return spawn_thread

    # functions -----------------------------------------------------------

    def function(self, name: str, params: Sequence[str], locals_: Sequence[Tuple[str, str]],
                 body: Term) -> Callable:
        self.slots = {n: i for i, n in enumerate(list(params) + [n for n, _ in locals_])}
        run_body = self.stmt(body)
        padding = [UNIT] * len(locals_)
        arity = len(params)

        def enter(args):
            if len(args) != arity:
                raise RuntimeTrap(f"{name} expects {arity} arguments, got {len(args)}")
            env = list(args)
            env.extend(padding)
            r = run_body(env)
            return UNIT if r is None or r is _BREAK else r
        enter.__name__ = name
        return enter

    def cps_function(self, f: CpsFunction) -> Callable:
        return self.function(f.name, f.params, f.locals, f.body)

    def native_function(self, f: FunDecl) -> Callable:
        return self.function(f.name, f.params, f.locals, f.body)


def _host_depth() -> int:
    depth = 0
    frame = sys._getframe(1)
    while frame is not None:
        depth += 1
        frame = frame.f_back
    return depth


# --------------------------------------------------------------------------
# Scheduler

class Runtime:
    """Event loop plus worker pool executing one continuation-IR program."""

    depth_sample_interval = 1024

    def __init__(self, ir: CpsProgram, source: Optional[EventSource] = None,
                 fuel: Optional[int] = None, capacity: int = 4, growth: int = 2,
                 pool_workers: Optional[int] = None, tick_seconds: float = 0.0,
                 debug_linearity: bool = True, trace: bool = False,
                 on_output: Optional[Callable[[str], None]] = None):
        self.ir = ir
        self.source = source if source is not None else VirtualEventSource()
        self.fuel = fuel
        self.capacity = capacity
        self.growth = growth
        self.pool_workers = pool_workers or os.cpu_count() or 1
        self.tick_seconds = tick_seconds
        self.debug_linearity = debug_linearity
        self.tracing = trace
        self.ctx = RuntimeContext(self, on_output)
        self.globals: Dict[str, Any] = {g.name: g.value for g in ir.globals}

        self.ready: Deque[ThreadRecord] = deque()
        self.threads: Dict[int, ThreadRecord] = {}
        self.timers: List[Tuple[int, int, ThreadRecord, int]] = []
        self.conds: Dict[int, Deque[Tuple[ThreadRecord, int, Any]]] = {}
        self.io_waiters: Dict[Tuple[int, int], List[Tuple[ThreadRecord, int]]] = {}
        # stale entries per wait queue, compacted once they make up half of it
        self._stale: Dict[Tuple[str, Any], int] = {}
        self.inbox: "queue.Queue[tuple]" = queue.Queue()
        self.trace_lines: List[str] = []

        self.steps = 0
        self.spawned = 0
        self.max_live = 0
        self.max_capacity = 0
        self.max_depth = 0
        self.countdown = 1
        self.result = None
        self.pool_active = 0
        self._ids = itertools.count(1)
        self._seq = itertools.count()
        self._lock = threading.Lock()
        self._pool: Optional[ThreadPoolExecutor] = None
        self._closed = False
        self._stopping = False
        self._loop_ident = threading.get_ident()
        self._pool_failure: Optional[BaseException] = None

        self.entries: List[FunctionEntry] = []
        self.natives: Dict[str, Callable] = {}
        self.base_ids: Dict[str, int] = {}
        self._link()

    @classmethod
    def from_settings(cls, ir: CpsProgram, settings, **overrides) -> "Runtime":
        options = dict(
            fuel=settings.fuel, capacity=settings.continuation_capacity,
            growth=settings.growth_factor, pool_workers=settings.pool_workers,
            tick_seconds=settings.tick_seconds, debug_linearity=settings.debug_linearity,
        )
        options.update(overrides)
        return cls(ir, **options)

    def _link(self):
        primitives = {
            "yield": self._p_yield, "sleep": self._p_sleep, "io_wait": self._p_io_wait,
            "cond_wait": self._p_cond_wait, "link": self._p_link,
        }
        for d in self.ir.funtable:
            self.entries.append(FunctionEntry(d.id, d.name, d.arity, d.receive,
                                              primitive=primitives.get(d.name)))
            if not d.receive:
                self.base_ids[d.name] = d.id
        compiler = _Compiler(self, self.ir)
        for f in self.ir.natives:
            self.natives[f.name] = compiler.native_function(f)
        runs = {f.name: compiler.cps_function(f) for f in self.ir.functions}
        for entry in self.entries:
            if entry.primitive is None:
                entry.run = runs[entry.name]

    # tracing -------------------------------------------------------------

    def trace(self, event: str, t: ThreadRecord, *extra) -> None:
        if self.tracing:
            words = " ".join(str(x) for x in extra)
            self.trace_lines.append(f"trace: {self.source.now()} {event} t{t.id}"
                                    + (f" {words}" if words else ""))

    def sample_depth(self) -> None:
        self.countdown = self.depth_sample_interval
        depth = _host_depth()
        if depth > self.max_depth:
            self.max_depth = depth

    # thread lifecycle ----------------------------------------------------

    def _on_loop(self) -> bool:
        return threading.get_ident() == self._loop_ident

    def spawn(self, entry: FunctionEntry, args: Sequence) -> Optional[ThreadRecord]:
        if not self._on_loop():
            self.inbox.put(("spawn", entry, tuple(args)))
            return None
        tid = next(self._ids)
        k = Continuation(self.capacity, self.growth, tid)
        push(k, entry, tuple(args))
        t = ThreadRecord(tid, k)
        self.threads[tid] = t
        self.ready.append(t)
        self.spawned += 1
        self.max_live = max(self.max_live, len(self.threads))
        self.trace("spawn", t, entry.name)
        logger.debug("spawned t%d running %s", tid, entry.name)
        return t

    def _finish(self, t: ThreadRecord, value) -> None:
        self.max_capacity = max(self.max_capacity, t.k.capacity)
        t.k.consume(self.debug_linearity)
        t.state = ThreadState.DONE
        self.threads.pop(t.id, None)
        if t.id == 1:
            self.result = value
        self.trace("exit", t, format_value(value) if value is not None else "()")
        logger.debug("t%d exited", t.id)

    def _wake(self, t: ThreadRecord, value, via: Optional[Tuple[str, Any]] = None) -> None:
        t.token += 1
        for registration in t.waits:
            if registration != via:
                self._forget(registration)
        t.waits = ()
        t.value = value
        t.detail = ""
        self.trace("wake", t, format_value(value))
        if t.affinity == THREAD_POOL:
            self._submit(t)
        else:
            t.state = ThreadState.READY
            self.ready.append(t)

    def _forget(self, registration: Tuple[str, Any]) -> None:
        """Count one stale entry in a wait queue; drop the stale entries once they are half of it."""
        kind, key = registration
        table = self.conds if kind == "cond" else self.io_waiters
        entries = table.get(key)
        if not entries:
            self._stale.pop(registration, None)
            return
        stale = self._stale.get(registration, 0) + 1
        if 2 * stale < len(entries):
            self._stale[registration] = stale
            return
        live = [entry for entry in entries if entry[1] == entry[0].token]
        self._stale.pop(registration, None)
        if live:
            table[key] = deque(live) if kind == "cond" else live
        else:
            del table[key]

    def _park(self, t: ThreadRecord, state: ThreadState, detail: str) -> None:
        t.state = state
        t.detail = detail
        self.max_capacity = max(self.max_capacity, t.k.capacity)

    def _submit(self, t: ThreadRecord) -> None:
        if self._closed:
            raise SchedulerClosed(f"thread pool closed while detaching t{t.id}")
        if self._pool is None:
            self._pool = ThreadPoolExecutor(max_workers=self.pool_workers,
                                            thread_name_prefix="cpc-pool")
        t.state = ThreadState.DETACHED
        self.pool_active += 1
        self._pool.submit(self._pool_slice, t)

    # condition variables -------------------------------------------------

    def signal(self, cv: int, broadcast: bool) -> None:
        if not self._on_loop():
            self.inbox.put(("signal", cv, broadcast))
            return
        waiters = self.conds.get(cv)
        registration = ("cond", cv)
        while waiters:
            t, token, value = waiters.popleft()
            if token != t.token:
                if self._stale.get(registration):
                    self._stale[registration] -= 1
                continue
            self._wake(t, value, via=registration)
            if not broadcast:
                break
        if waiters is not None and not waiters:
            del self.conds[cv]
            self._stale.pop(registration, None)

    def _wait_cond(self, t: ThreadRecord, cv, value) -> None:
        if type(cv) is not int:
            raise NativeFault(f"expected a condition variable, got {format_value(cv)}")
        self.conds.setdefault(cv, deque()).append((t, t.token, value))
        t.waits += (("cond", cv),)

    # primitives ------------------------------------------------------------

    def _p_yield(self, t: ThreadRecord, args, detached: bool):
        if detached:
            return UNIT
        self.trace("yield", t)
        t.value = UNIT
        t.state = ThreadState.READY
        self.ready.append(t)
        return _SUSPEND

    def _p_sleep(self, t: ThreadRecord, args, detached: bool):
        ticks = args[0]
        if type(ticks) is not int:
            raise NativeFault(f"sleep: expected int, got {format_value(ticks)}")
        if detached:
            if len(args) == 1:
                time.sleep(max(ticks, 0) * self.tick_seconds)
                return 1
            self.inbox.put(("wait", t, "sleep", tuple(args)))
            return _SUSPEND
        until = self.source.now() + max(ticks, 0)
        heapq.heappush(self.timers, (until, next(self._seq), t, t.token))
        if len(args) == 2:
            self._wait_cond(t, args[1], 0)
        self._park(t, ThreadState.SLEEPING, f"until {until}")
        self.trace("sleep", t, until)
        return _SUSPEND

    def _p_io_wait(self, t: ThreadRecord, args, detached: bool):
        key, direction = args[0], args[1]
        if not self.source.known(key):
            return -1
        if detached:
            self.inbox.put(("wait", t, "io_wait", tuple(args)))
            return _SUSPEND
        if self.source.ready(key, direction):
            self.trace("io-ready", t, key, direction)
            self._wake(t, 1)
            return _SUSPEND
        self.io_waiters.setdefault((key, direction), []).append((t, t.token))
        t.waits += (("io", (key, direction)),)
        if len(args) == 3:
            self._wait_cond(t, args[2], 0)
        self._park(t, ThreadState.WAITING_IO, f"key {key} dir {direction}")
        self.trace("io-wait", t, key, direction)
        return _SUSPEND

    def _p_cond_wait(self, t: ThreadRecord, args, detached: bool):
        if detached:
            self.inbox.put(("wait", t, "cond_wait", tuple(args)))
            return _SUSPEND
        self._wait_cond(t, args[0], UNIT)
        self._park(t, ThreadState.WAITING_COND, f"cv {args[0]}")
        self.trace("cond-wait", t, args[0])
        return _SUSPEND

    def _p_link(self, t: ThreadRecord, args, detached: bool):
        target = args[0]
        if target not in (EVENT_LOOP, THREAD_POOL) or type(target) is not int:
            raise NativeFault(f"link: not a scheduler: {format_value(target)}")
        previous = t.affinity
        if target == previous:
            return previous
        t.affinity = target
        t.value = previous
        if detached:
            self.inbox.put(("attach", t))
        else:
            self.trace("detach", t)
            self._park(t, ThreadState.DETACHED, "")
            self._submit(t)
        return _SUSPEND

    # trampoline ----------------------------------------------------------

    def _slice(self, t: ThreadRecord, detached: bool) -> bool:
        """Run ``t`` until it suspends (False) or exits (True)."""
        k = t.k
        value = t.value
        t.value = None
        steps = 0
        budget = None if self.fuel is None else max(self.fuel - self.steps, 0)
        try:
            while True:
                if k.top == 0:
                    t.value = value
                    return True
                if budget is not None and steps >= budget:
                    raise _FuelExhausted()
                if detached and steps & 1023 == 0 and self._stopping:
                    raise _Stopped()
                entry, args = k.invoke(value)
                steps += 1
                if entry.primitive is not None:
                    value = entry.primitive(t, args, detached)
                    if value is _SUSPEND:
                        return False
                    continue
                r = entry.run(args)
                if type(r) is tuple:
                    k.push(r[0], r[1])
                    if len(r) == 4:
                        k.push(r[2], r[3])
                    value = None
                else:
                    value = r
        finally:
            with self._lock:
                self.steps += steps

    def _run_attached(self, t: ThreadRecord) -> None:
        t.state = ThreadState.RUNNING
        self.trace("run", t)
        if self._slice(t, detached=False):
            self._finish(t, t.value)

    def _pool_slice(self, t: ThreadRecord) -> None:
        try:
            if self._slice(t, detached=True):
                self.inbox.put(("done", t))
        except _FuelExhausted:
            self.inbox.put(("fuel", t))
        except _Stopped:
            self.inbox.put(("stopped", t))
        except BaseException as exc:  # handed to the loop thread
            self.inbox.put(("fault", t, exc))

    # loop ----------------------------------------------------------------

    _CLOSING = frozenset({"done", "attach", "wait", "fuel", "stopped", "fault"})

    def _handle(self, message: tuple) -> None:
        kind = message[0]
        if kind in self._CLOSING:
            self.pool_active -= 1
        if kind == "spawn":
            self.spawn(message[1], message[2])
        elif kind == "signal":
            self.signal(message[1], message[2])
        elif kind == "done":
            self._finish(message[1], message[1].value)
        elif kind == "attach":
            t = message[1]
            self.trace("attach", t)
            t.state = ThreadState.READY
            self.ready.append(t)
        elif kind == "wait":
            _, t, name, args = message
            handler = {"sleep": self._p_sleep, "io_wait": self._p_io_wait,
                       "cond_wait": self._p_cond_wait}[name]
            outcome = handler(t, args, False)
            if outcome is not _SUSPEND:
                self._wake(t, outcome)
        elif kind == "fuel":
            raise _FuelExhausted()
        elif kind == "fault":
            self._pool_failure = message[2]
            raise message[2]

    def _drain(self, block: bool) -> None:
        if block:
            timeout = 0.05 if self.source.realtime else None
            try:
                self._handle(self.inbox.get(timeout=timeout))
            except queue.Empty:
                return
        while True:
            try:
                message = self.inbox.get_nowait()
            except queue.Empty:
                return
            self._handle(message)

    def _next_deadline(self) -> Optional[int]:
        while self.timers and self.timers[0][3] != self.timers[0][2].token:
            heapq.heappop(self.timers)
        return self.timers[0][0] if self.timers else None

    def _fire_timers(self) -> None:
        now = self.source.now()
        while self.timers and self.timers[0][0] <= now:
            _, _, t, token = heapq.heappop(self.timers)
            if token == t.token:
                self._wake(t, 1)

    def _poll_io(self) -> None:
        for pair in list(self.io_waiters):
            if not self.source.ready(*pair):
                continue
            self._stale.pop(("io", pair), None)
            for t, token in self.io_waiters.pop(pair, ()):
                if token == t.token:
                    self._wake(t, 1, via=("io", pair))

    def run(self, entry: Optional[str] = None, args: Sequence = ()) -> ExitReport:
        """Spawn the entry function and run the loop until no thread remains."""
        name = entry or self.ir.entry
        target = self.ir.function(name)
        if not args:
            args = tuple(0 for _ in target.params)
        self._loop_ident = threading.get_ident()
        self.spawn(self.entries[self.base_ids[name]], args)
        status, fault = ExitStatus.COMPLETED, None
        try:
            while True:
                self._drain(block=False)
                if self.ready:
                    self._run_attached(self.ready.popleft())
                    continue
                if self.pool_active:
                    self._drain(block=True)
                    continue
                if not self.threads:
                    break
                self._fire_timers()
                self._poll_io()
                if self.ready:
                    continue
                if not self.source.wait(self._next_deadline(), set(self.io_waiters)):
                    status = ExitStatus.DEADLOCK
                    logger.warning("deadlock: %d threads waiting", len(self.threads))
                    break
                self._fire_timers()
                self._poll_io()
        except _FuelExhausted:
            status = ExitStatus.FUEL_EXHAUSTED
        except NativeFault as exc:
            status, fault = ExitStatus.FAULT, str(exc)
        finally:
            self._shutdown()
        return self._report(status, fault)

    def _shutdown(self) -> None:
        self._stopping = True
        self._closed = True
        if self._pool is not None:
            self._pool.shutdown(wait=True)
        while True:
            try:
                message = self.inbox.get_nowait()
            except queue.Empty:
                break
            if message[0] == "fault" and self._pool_failure is None:
                logger.error("late failure in detached t%d: %s", message[1].id, message[2])
        self.source.close()

    def _report(self, status: ExitStatus, fault: Optional[str]) -> ExitReport:
        for t in self.threads.values():
            self.max_capacity = max(self.max_capacity, t.k.capacity)
        return ExitReport(
            status=status,
            steps=self.steps,
            result=self.result,
            output=list(self.ctx.output),
            trace=list(self.trace_lines),
            threads=[t.describe() for t in sorted(self.threads.values(), key=lambda t: t.id)],
            transcript=list(self.source.transcript),
            spawned=self.spawned,
            max_live_threads=self.max_live,
            max_continuation_capacity=self.max_capacity,
            max_host_depth=self.max_depth,
            fault=fault,
        )


def run_loop(ir: CpsProgram, source: Optional[EventSource] = None, fuel: Optional[int] = None,
             settings=None, trace: bool = False, entry: Optional[str] = None,
             args: Sequence = (), **options) -> ExitReport:
    """Run ``ir`` from ``entry`` (default: its entry point) and return the exit report."""
    if settings is not None:
        runtime = Runtime.from_settings(ir, settings, source=source, trace=trace, **options)
        if fuel is not None:
            runtime.fuel = fuel
    else:
        runtime = Runtime(ir, source=source, fuel=fuel, trace=trace, **options)
    report = runtime.run(entry, args)
    logger.info("run finished: %s after %d steps", report.status.value, report.steps)
    return report
