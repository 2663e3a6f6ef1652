"""
Error Hierarchy

Exceptions shared by the compiler passes, the runtime and the configuration layer.
Interpreter failures are returned as values (see ``semantics``), not raised.

Version: 1.0.0
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple


@dataclass(frozen=True)
class SourceSpan:
    """Position of a construct in a source file."""
    file: str
    line: int
    column: int
    length: int = 0

    def __post_init__(self):
        if self.line < 0 or self.column < 0 or self.length < 0:
            raise ValueError(f"negative span component in {self!r}")

    def __str__(self) -> str:
        return f"{self.file}:{self.line}:{self.column}"


class CpcError(Exception):
    """Base class for every error raised by the package."""


class CompileError(CpcError):
    """A pass rejected its input."""

    def __init__(self, message: str, span: Optional[SourceSpan] = None):
        super().__init__(message)
        self.message = message
        self.span = span

    def render(self) -> str:
        where = str(self.span) if self.span else "<unknown>"
        return f"{where}: error: {self.message}"

    def __str__(self) -> str:
        return self.render()


class ParseError(CompileError):
    def __init__(self, message: str, span: Optional[SourceSpan] = None,
                 expected: Sequence[str] = ()):
        self.expected = tuple(sorted(set(expected)))
        if self.expected:
            message = f"{message} (expected {', '.join(self.expected)})"
        super().__init__(message, span)


class ValidationError(CompileError):
    """The program is syntactically fine but breaks a language rule."""


class BoxingUnsupported(CompileError):
    pass


class NotConvertible(CompileError):
    def __init__(self, sites: List[Tuple[str, Optional[SourceSpan], str]]):
        self.sites = list(sites)
        fn, span, reason = self.sites[0]
        extra = f" (+{len(self.sites) - 1} more)" if len(self.sites) > 1 else ""
        super().__init__(f"not CPS-convertible in {fn}: {reason}{extra}", span)


class NotLiftable(CompileError):
    def __init__(self, parameter: str, function: str, witness: Optional[SourceSpan],
                 callee: str = "", reason: str = ""):
        self.parameter = parameter
        self.function = function
        self.witness = witness
        self.callee = callee
        self.reason = reason
        detail = f": {reason}" if reason else f" at non-tail call to {callee}" if callee else ""
        super().__init__(f"parameter {parameter} of {function} is not liftable{detail}", witness)


class InnerNotClosed(CompileError):
    def __init__(self, function: str, names: Sequence[str], span: Optional[SourceSpan] = None):
        self.function = function
        self.names = tuple(sorted(names))
        super().__init__(f"inner function {function} is not closed: {', '.join(self.names)}", span)


class RuntimeTrap(CpcError):
    """A runtime invariant was broken; always a bug in the compiler or runtime."""


class InvokeEmpty(RuntimeTrap):
    pass


class LinearityViolation(RuntimeTrap):
    pass


class SchedulerClosed(RuntimeTrap):
    pass


class ConfigError(CpcError):
    def __init__(self, key: str, message: str):
        super().__init__(f"invalid setting {key}: {message}")
        self.key = key
