"""
cpc

Compiler from a small C-like language with cooperative threads into
continuation passing style, plus the runtime that executes the result and
reference interpreters for the language's core.

Version: 1.0.0
"""

from .errors import CompileError, CpcError, RuntimeTrap
from .frontend import parse, print_program
from .pipeline import Compilation, Stage, compile_file, compile_program
from .runtime import ExitReport, ExitStatus, run_loop

__version__ = "1.0.0"

__all__ = [
    "CompileError", "CpcError", "RuntimeTrap", "parse", "print_program", "Compilation",
    "Stage", "compile_file", "compile_program", "ExitReport", "ExitStatus", "run_loop",
]
