"""Command-line front end.

Exit codes: 0 clean, 1 violations or denials found, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import compiler, lang, monitor, validator
from .compiler import CompiledPolicy, TableFormatError
from .lang import PolicySyntaxError
from .monitor import Report, StaleTableError, TraceError

EXIT_OK, EXIT_FOUND, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    pass


def _read(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None


def _first_line(text: str) -> str:
    for line in text.splitlines():
        if line.strip():
            return line.strip()
    return ""


def _load_model(path: str, text: str | None = None):
    text = _read(path) if text is None else text
    try:
        return lang.parse(text)
    except PolicySyntaxError as exc:
        raise InputError("\n".join(f"{path}:{d}" for d in exc.diagnostics)) from None


def _load_compiled(path: str, version: int = 1) -> CompiledPolicy:
    """A policy file is compiled on the fly; a table file is imported."""
    text = _read(path)
    if _first_line(text) == compiler.HEADER:
        try:
            return compiler.import_table(text)
        except TableFormatError as exc:
            raise InputError(f"{path}: {exc}") from None
    return compiler.compile(_load_model(path, text), version)


def _load_trace(path: str):
    try:
        return monitor.parse_trace(_read(path))
    except TraceError as exc:
        raise InputError(f"{path}: {exc}") from None


def _parse_update(spec: str) -> tuple[int, str]:
    seq, sep, path = spec.partition(":")
    if not sep or not seq.lstrip("-").isdigit() or not path:
        raise argparse.ArgumentTypeError(f"expected SEQ:TABLE, got {spec!r}")
    return int(seq), path


def _validation(model) -> tuple[list, list]:
    violations = validator.validate(model)
    leaks = validator.analyze_leaks(model)
    return violations, leaks


# -- commands ----------------------------------------------------------------


def cmd_validate(args) -> int:
    model = _load_model(args.policy)
    violations, leaks = _validation(model)
    for v in violations:
        print(f"violation: {v}")
    for lk in leaks:
        print(f"{'info' if lk.guarded else 'error'}: {lk}")
    unguarded = sum(not lk.guarded for lk in leaks)
    print(f"{len(violations)} violations, {unguarded} unguarded leaks, {len(leaks) - unguarded} guarded leaks")
    if args.smtlib:
        try:
            Path(args.smtlib).write_text(validator.emit_smtlib(model), encoding="utf-8")
        except OSError as exc:
            raise InputError(f"{args.smtlib}: {exc.strerror}") from None
    return EXIT_FOUND if violations or unguarded else EXIT_OK


def cmd_compile(args) -> int:
    model = _load_model(args.policy)
    violations, leaks = _validation(model)
    unguarded = [lk for lk in leaks if not lk.guarded]
    banner = None
    if violations or unguarded:
        for v in violations:
            print(f"violation: {v}", file=sys.stderr)
        for lk in unguarded:
            print(f"error: {lk}", file=sys.stderr)
        if not args.force:
            print("refusing to compile a policy that fails validation (use --force)", file=sys.stderr)
            return EXIT_FOUND
        banner = (
            f"WARNING: compiled with --force despite {len(violations)} violation(s)"
            f" and {len(unguarded)} unguarded leak(s)"
        )
    compiled = compiler.compile(model, args.version)
    try:
        Path(args.out).write_text(compiler.export_table(compiled, banner), encoding="utf-8")
    except OSError as exc:
        raise InputError(f"{args.out}: {exc.strerror}") from None
    print(f"wrote {args.out}: " + ", ".join(f"{s.value} {len(t.rules())} rules" for s, t in compiled.tables.items()))
    return EXIT_OK


def _run_replay(args) -> Report:
    compiled = _load_compiled(args.input)
    trace = _load_trace(args.trace)
    mon = monitor.Monitor(compiled)
    for i, (seq, path) in enumerate(args.update or ()):
        # policy files get successive versions; table files carry their own
        update = _load_compiled(path, version=i + 2)
        for scope, table in update.tables.items():
            try:
                mon.update_rules(scope, table, seq)
            except StaleTableError as exc:
                raise InputError(f"{path}: {exc}") from None
    return mon.replay(trace)


def cmd_replay(args) -> int:
    report = _run_replay(args)
    text = report.render_tagged() if args.format == "tagged" else report.render_text()
    sys.stdout.write(text)
    if args.report:
        try:
            Path(args.report).write_text(report.render_tagged(), encoding="utf-8")
        except OSError as exc:
            raise InputError(f"{args.report}: {exc.strerror}") from None
    return EXIT_OK if report.clean else EXIT_FOUND


def cmd_explain(args) -> int:
    text = _read(args.input)
    if _first_line(text) == "report v1":
        try:
            report = Report.from_tagged(text)
        except ValueError as exc:
            raise InputError(f"{args.input}: {exc}") from None
    else:
        if not args.trace:
            raise InputError("explain needs --trace unless INPUT is a saved report")
        report = _run_replay(args)
    try:
        chain = monitor.explain(report, args.seq)
    except KeyError as exc:
        raise InputError(exc.args[0]) from None
    print("\n".join(chain))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scopeguard", description="agent confinement policy toolchain")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a policy against its builtin, static and leak rules")
    p.add_argument("policy")
    p.add_argument("--smtlib", metavar="OUT", help="also write the SMT-LIB2 validation query")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("compile", help="compile a policy into a clawtable v1 file")
    p.add_argument("policy")
    p.add_argument("out")
    p.add_argument("--force", action="store_true", help="compile even if validation fails")
    p.add_argument("--version", type=int, default=1, help="version number stamped on every scope table")
    p.set_defaults(func=cmd_compile)

    for name, func, help_text in (
        ("replay", cmd_replay, "replay a syscall trace against a policy or compiled table"),
        ("explain", cmd_explain, "explain the verdict for one event"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument(
            "input", help="policy (.claw), table (clawtable v1)" + (", or saved report" if name == "explain" else "")
        )
        if name == "replay":
            p.add_argument("trace")
            p.add_argument("--format", choices=("text", "tagged"), default="text")
            p.add_argument("--report", metavar="OUT", help="also save the tagged report")
        else:
            p.add_argument("seq", type=int)
            p.add_argument("--trace")
        p.add_argument(
            "--update",
            type=_parse_update,
            action="append",
            metavar="SEQ:TABLE",
            help="swap in the tables from TABLE starting at event SEQ",
        )
        p.set_defaults(func=func)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        return args.func(args)
    except InputError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
