"""Runtime values: unit, booleans, integers and heap references."""

from dataclasses import dataclass
from typing import Union


class Unit:
    """The value of functions returning void."""
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "UNIT"

    def __reduce__(self):
        return (Unit, ())


UNIT = Unit()


@dataclass(frozen=True)
class Ref:
    """Opaque heap-cell reference."""
    cell: int


Value = Union[Unit, bool, int, Ref]


def is_value(v) -> bool:
    return v is UNIT or type(v) in (bool, int) or isinstance(v, Ref)


def same_value(a, b) -> bool:
    """Type-strict equality (``True`` and ``1`` differ)."""
    return type(a) is type(b) and a == b


def format_value(v) -> str:
    if v is UNIT:
        return "()"
    if v is True:
        return "true"
    if v is False:
        return "false"
    if isinstance(v, Ref):
        return f"ref#{v.cell}"
    return str(v)
