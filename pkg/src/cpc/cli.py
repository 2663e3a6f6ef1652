"""
Command-Line Driver

Subcommands:

    compile FILE [--emit STAGE] [--stats] [--alpha]   dump an intermediate form
    run FILE [--script S] [--fuel N] [--trace]        compile and execute
    check-semantics [--seed S] [--count N] [--fuel F] differential interpreter checks
    bench [--scale X] [--repeats N]                   thread primitive timings
    stats [DIR]                                       boxing/lifting statistics

Exit codes: 0 ok, 1 compile error, 2 deadlock, 3 differential disagreement,
4 fault or fuel exhaustion.

Version: 1.0.0
"""

import logging
import sys
from pathlib import Path
from typing import List, Optional

from .config import Settings, load_settings
from .errors import CompileError, ConfigError, CpcError
from .runtime import EventSource, SelectorEventSource, VirtualEventSource, run_loop

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_COMPILE_ERROR = 1
EXIT_DEADLOCK = 2
EXIT_DISAGREEMENT = 3

CORPUS_DIR = Path(__file__).resolve().parents[2] / "corpus"


def _configure_logging(settings: Settings, verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else getattr(logging, settings.log_level),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        stream=sys.stderr,
    )


def _compile_options(settings: Settings) -> dict:
    return dict(smart_extrusion=settings.smart_extrusion, liveness_lite=settings.liveness_lite)


def cmd_compile(args, settings: Settings) -> int:
    from .pipeline import Stage, compile_file

    stage = Stage(args.emit)
    until = Stage.CPS if stage is Stage.FUNTABLE else stage
    result = compile_file(args.file, until=until, **_compile_options(settings))
    sys.stdout.write(result.emit(stage, alpha=args.alpha, canonical=args.canonical))
    if args.stats:
        report = result.report
        print(report.boxing.table())
        if until.order >= Stage.LIFTED.order:
            print(report.lifting.table())
        if until.order >= Stage.SPLIT.order:
            print(f"split: {report.splitting.generated_count} inner functions generated")
    return EXIT_OK


def _event_source(args) -> EventSource:
    if args.listen is not None:
        return SelectorEventSource(args.listen)
    if args.script:
        path = Path(args.script)
        return VirtualEventSource.from_text(path.read_text(), str(path))
    default_script = Path(args.file).with_suffix(".script")
    if default_script.exists() and not args.no_script:
        return VirtualEventSource.from_text(default_script.read_text(), str(default_script))
    return VirtualEventSource()


def cmd_run(args, settings: Settings) -> int:
    from .pipeline import compile_file

    result = compile_file(args.file, **_compile_options(settings))
    source = _event_source(args)
    stream = print if source.realtime else None
    report = run_loop(result.ir, source, settings=settings, trace=args.trace,
                      entry=args.entry, args=tuple(args.args), on_output=stream)
    if stream is None:
        for line in report.output:
            print(line)
    for line in report.transcript_lines():
        print(line)
    for line in report.trace:
        print(line)
    if args.stats:
        print(report.summary(), file=sys.stderr)
    if report.fault:
        print(f"{args.file}: fault: {report.fault}", file=sys.stderr)
    return report.exit_code


def cmd_check_semantics(args, settings: Settings) -> int:
    from .semantics import check_semantics

    report = check_semantics(args.seed, args.count, settings.fuel, args.profile)
    for failure in report.failures[:args.show]:
        print(failure)
    print(report.summary())
    return EXIT_OK if report.ok else EXIT_DISAGREEMENT


def cmd_bench(args, settings: Settings) -> int:
    from .bench import machine_info, run_bench

    print(machine_info())
    print(f"{'primitive':<10}{'time':>15}{'iterations':>12}")
    repeats = args.repeats or settings.bench_repeats
    run_bench(scale=args.scale, repeats=repeats, only=args.only,
              progress=lambda row: print(row.render(), flush=True))
    return EXIT_OK


def cmd_stats(args, settings: Settings) -> int:
    from .pipeline import collect_stats, corpus_files

    target = Path(args.path)
    paths = [target] if target.is_file() else corpus_files(target)
    stats = collect_stats(paths, **_compile_options(settings))
    print(stats.render())
    return EXIT_OK


def build_parser():
    import argparse

    parser = argparse.ArgumentParser(prog="cpc", description="Continuation passing compiler and runtime")
    parser.add_argument('--config', help='Configuration file (default config/cpc.yaml)')
    parser.add_argument('--verbose', '-v', action='store_true', help='Enable debug logging')
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compile", help="Compile a file and dump an intermediate form")
    p.add_argument("file")
    p.add_argument("--emit", default="cps", choices=["ast", "boxed", "split", "lifted", "cps", "funtable"])
    p.add_argument("--stats", action="store_true", help="Print boxing and lifting statistics")
    p.add_argument("--alpha", action="store_true", help="Rename variables shared by lifted functions")
    p.add_argument("--canonical", action="store_true", help="Canonical tree dump instead of source text")
    p.set_defaults(handler=cmd_compile)

    p = sub.add_parser("run", help="Compile and execute a file")
    p.add_argument("file")
    p.add_argument("args", nargs="*", type=int, help="Integer arguments of the entry function")
    p.add_argument("--entry", help="Entry function (default main or the first cps function)")
    p.add_argument("--script", help="Virtual event script (default FILE.script when present)")
    p.add_argument("--no-script", action="store_true", help="Ignore FILE.script")
    p.add_argument("--listen", type=int, metavar="PORT", help="Serve OS sockets on PORT")
    p.add_argument("--fuel", type=int, help="Trampoline step budget")
    p.add_argument("--workers", type=int, help="Thread pool size")
    p.add_argument("--trace", action="store_true", help="Print scheduler decisions")
    p.add_argument("--stats", action="store_true", help="Print the exit report on stderr")
    p.set_defaults(handler=cmd_run)

    p = sub.add_parser("check-semantics", help="Differential checks of the reference interpreters")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--fuel", type=int)
    p.add_argument("--profile", choices=["liftable", "any"], default="any")
    p.add_argument("--show", type=int, default=5, help="Disagreements to print")
    p.set_defaults(handler=cmd_check_semantics)

    p = sub.add_parser("bench", help="Time the thread primitives")
    p.add_argument("--scale", type=float, default=1.0, help="Multiplier for the iteration counts")
    p.add_argument("--repeats", type=int)
    p.add_argument("--only", nargs="*", help="Rows to run")
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser("stats", help="Boxing and lifting statistics of a corpus")
    p.add_argument("path", nargs="?", default=str(CORPUS_DIR))
    p.set_defaults(handler=cmd_stats)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = {"fuel": getattr(args, "fuel", None), "pool_workers": getattr(args, "workers", None)}
    try:
        settings = load_settings(args.config, overrides)
    except ConfigError as e:
        print(f"cpc: {e}", file=sys.stderr)
        return EXIT_COMPILE_ERROR
    _configure_logging(settings, args.verbose)
    try:
        return args.handler(args, settings)
    except CompileError as e:
        print(e.render(), file=sys.stderr)
        return EXIT_COMPILE_ERROR
    except CpcError as e:
        logger.error("%s", e)
        return EXIT_COMPILE_ERROR
    except OSError as e:
        print(f"cpc: {e}", file=sys.stderr)
        return EXIT_COMPILE_ERROR


if __name__ == "__main__":
    sys.exit(main())
