"""Lower a security model into per-scope syscall rule tables.

Each trace event is judged as a conjunction of *checks*.  A check is a key
naming a syscall in a particular role (``sendfile(in)``, ``mmap(PROT_WRITE)``,
``open(O_APPEND)``...) applied to one entity.  Tables hold one rule per
(key, subject) that the scope may perform; anything without a rule is
denied.  ``execve``/``fork``/``clone`` are inverted: holding NoExec produces
an explicit deny.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .lang import (
    AttrTarget,
    Builtin,
    Modality,
    Policy,
    PolicySyntaxError,
    TemporalRule,
    parse,
    render_pattern,
    render_policy,
)
from .model import (
    DEFAULT_SUBJECT,
    PATH_KINDS,
    SCOPES,
    EntityKind,
    EntityPattern,
    Permission,
    Scope,
    SecurityModel,
    format_perms,
)

F, D, P, S, V = (
    EntityKind.FILE,
    EntityKind.DIRECTORY,
    EntityKind.PROCESS,
    EntityKind.SOCKET,
    EntityKind.DEVICE,
)
R, W, A, NX, VIS = (
    Permission.READ,
    Permission.WRITE,
    Permission.APPEND,
    Permission.NOEXEC,
    Permission.VISIBLE,
)
ALL_KINDS = frozenset(EntityKind)

# The model-to-syscall mapping, one cell per (kind, permission).  Cells the
# mapping leaves empty ("/") are absent.  Device read/write/append and
# process read/write are merged cells; they are realized under Write.
SYSCALL_TABLE: dict[tuple[EntityKind, Permission], frozenset[str]] = {
    (F, R): frozenset({"read", "pread", "readv", "mmap(PROT_READ)", "sendfile(in)"}),
    (F, W): frozenset({"write", "pwrite", "writev", "mmap(PROT_WRITE)", "sendfile(out)"}),
    (F, A): frozenset({"lseek", "open(O_APPEND)"}),
    (F, NX): frozenset({"execve"}),
    (D, R): frozenset({"getdents"}),
    (D, W): frozenset({"mkdir", "rmdir", "creat", "unlink"}),
    (D, A): frozenset({"mkdir", "creat"}),
    (S, R): frozenset({"recvfrom", "recvmsg"}),
    (S, W): frozenset({"sendto", "sendmsg"}),
    (V, W): frozenset({"ioctl"}),
    (P, W): frozenset({"semget", "semop", "semctl"}),
    (P, NX): frozenset({"clone", "fork"}),
}
_STAT = frozenset({"stat", "fstat"})
_PROCFS = frozenset({"open(procfs)", "read(procfs)", "pread(procfs)", "readv(procfs)"})
for _kind in EntityKind:
    SYSCALL_TABLE[(_kind, VIS)] = _STAT | (_PROCFS if _kind is P else frozenset())


def syscalls_for(kind: EntityKind, perm: Permission) -> frozenset[str]:
    """Syscalls governed by ``perm`` on entities of ``kind``."""
    return SYSCALL_TABLE.get((kind, perm), frozenset())


@dataclass(frozen=True)
class Requirement:
    """What a check key demands of its entity.

    ``perms`` is any-of: holding one of them satisfies the check.  For
    inverted keys the check passes when the subject has some capability
    beyond Visible but not NoExec.
    """

    syscall: str
    kinds: frozenset[EntityKind]
    perms: frozenset
    inverted: bool = False


def _req(key: str, syscall: str, kinds: Iterable[EntityKind], *perms: Permission, inverted: bool = False):
    return key, Requirement(syscall, frozenset(kinds), frozenset(perms), inverted)


REQUIREMENTS: dict[str, Requirement] = dict(
    [
        _req("open(O_RDONLY)", "open", PATH_KINDS, R),
        _req("open(O_WRONLY)", "open", (F, V), W),
        _req("open(O_APPEND)", "open", (F,), W, A),
        _req("open(O_CREAT)", "open", (D,), W, A),
        _req("open(procfs)", "open", (P,), VIS),
        _req("read", "read", (F,), R),
        _req("pread", "pread", (F,), R),
        _req("readv", "readv", (F,), R),
        _req("read(procfs)", "read", (P,), VIS),
        _req("pread(procfs)", "pread", (P,), VIS),
        _req("readv(procfs)", "readv", (P,), VIS),
        _req("mmap(PROT_READ)", "mmap", (F,), R),
        _req("sendfile(in)", "sendfile", (F,), R),
        _req("write", "write", (F,), W),
        _req("pwrite", "pwrite", (F,), W),
        _req("writev", "writev", (F,), W),
        _req("write(O_APPEND)", "write", (F,), W, A),
        _req("pwrite(O_APPEND)", "pwrite", (F,), W, A),
        _req("writev(O_APPEND)", "writev", (F,), W, A),
        _req("mmap(PROT_WRITE)", "mmap", (F,), W),
        _req("sendfile(out)", "sendfile", (F, S), W),
        # seeking an append-mode fd has no rule and is always denied
        _req("lseek", "lseek", (F,), R, W),
        _req("getdents", "getdents", (D,), R),
        _req("mkdir", "mkdir", (D,), W, A),
        _req("creat", "creat", (D,), W, A),
        _req("rmdir", "rmdir", (D,), W),
        _req("unlink", "unlink", (D,), W),
        _req("recvfrom", "recvfrom", (S,), R),
        _req("recvmsg", "recvmsg", (S,), R),
        _req("sendto", "sendto", (S,), W),
        _req("sendmsg", "sendmsg", (S,), W),
        _req("ioctl", "ioctl", (V,), W),
        _req("semget", "ipc", (P,), W),
        _req("semop", "ipc", (P,), W),
        _req("semctl", "ipc", (P,), W),
        _req("stat", "stat", ALL_KINDS, VIS),
        _req("fstat", "fstat", ALL_KINDS, VIS),
        _req("execve", "execve", (F,), NX, inverted=True),
        _req("fork", "fork", (P,), NX, inverted=True),
        _req("clone", "clone", (P,), NX, inverted=True),
    ]
)

# Every syscall a trace may contain; ones without checks are always allowed.
TRACE_SYSCALLS = (
    "open", "close", "dup", "read", "write", "pread", "pwrite", "readv", "writev",
    "mmap", "sendfile", "lseek", "getdents", "mkdir", "rmdir", "creat", "unlink",
    "socket", "connect", "sendto", "sendmsg", "recvfrom", "recvmsg", "execve",
    "fork", "clone", "stat", "fstat", "ioctl", "ipc",
)  # fmt: skip

# Append-mode writes still count as writes for temporal predicates.
PREDICATE_ALIASES = {"write(O_APPEND)": "write", "pwrite(O_APPEND)": "pwrite", "writev(O_APPEND)": "writev"}

ALLOW = "allow"
DENY = "deny"


@dataclass(frozen=True, slots=True)
class Rule:
    syscall: str  # check key
    subject: str  # pattern name or "default"
    perms: frozenset
    decision: str
    provenance: tuple[str, ...]
    _line: str = field(default="", init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        text = (
            f"{self.syscall} {self.subject} {format_perms(self.perms, ',')} {self.decision}"
            f" # {'; '.join(self.provenance)}"
        )
        object.__setattr__(self, "_line", text)

    def line(self) -> str:
        return self._line


@dataclass(frozen=True)
class RuleTable:
    scope: Scope
    dispatch: Mapping[str, tuple[Rule, ...]]
    version: int = 1
    _index: dict = field(default=None, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self) -> None:
        full = {name: () for name in TRACE_SYSCALLS}
        full.update(self.dispatch)
        object.__setattr__(self, "dispatch", full)
        index = {}
        for rules in full.values():
            for rule in rules:
                index.setdefault((rule.syscall, rule.subject), rule)
        object.__setattr__(self, "_index", index)

    def lookup(self, key: str, subject: str) -> Rule | None:
        return self._index.get((key, subject))

    def rules(self) -> list[Rule]:
        return [r for name in TRACE_SYSCALLS for r in self.dispatch[name]]

    def successor(self, dispatch: Mapping[str, tuple[Rule, ...]] | None = None) -> "RuleTable":
        """A replacement snapshot with the next version number."""
        return RuleTable(self.scope, self.dispatch if dispatch is None else dispatch, self.version + 1)


@dataclass(frozen=True)
class EventPredicate:
    scope: Scope
    keys: frozenset[str]
    target: str | AttrTarget


@dataclass(frozen=True)
class MonitorSpec:
    name: str
    trigger: EventPredicate
    modality: Modality
    body: EventPredicate


@dataclass(frozen=True)
class CompiledPolicy:
    """Everything replay needs: patterns for resolution, tables and temporal specs."""

    patterns: tuple[EntityPattern, ...]
    tables: Mapping[Scope, RuleTable]
    specs: tuple[MonitorSpec, ...] = ()
    temporal: tuple[Policy, ...] = ()


# -- compile -----------------------------------------------------------------


def _provenance(model: SecurityModel, subject: str, scope: Scope, perms: frozenset) -> tuple[str, ...]:
    if subject == DEFAULT_SUBJECT:
        return (f"default {scope.value}",)
    out = []
    for g in model.grants_for(subject, scope):
        if g.perms & perms:
            out.append(f"grant {scope.value} on {subject} {{{format_perms(g.perms, ',')}}}")
    return tuple(dict.fromkeys(out))


def _rules_for(model: SecurityModel, scope: Scope, subject: str, kind: EntityKind | None) -> Iterable[Rule]:
    held = model.subject_perms(subject, scope)
    if not held:
        return
    noexec_policies = tuple(
        f"policy {p.name} builtin no_exec_agent"
        for p in model.policies
        if isinstance(p.body, Builtin) and p.body.builtin_id == "no_exec_agent" and scope is Scope.AGENT
    )
    for key, req in REQUIREMENTS.items():
        if kind is not None and kind not in req.kinds:
            continue
        if req.inverted:
            if NX in held:
                nx = frozenset({NX})
                yield Rule(key, subject, nx, DENY, _provenance(model, subject, scope, nx) + noexec_policies)
            elif held - {VIS}:
                # reference-only (Visible) entities are never runnable
                usable = held - {VIS}
                yield Rule(key, subject, usable, ALLOW, _provenance(model, subject, scope, usable))
            continue
        granted = held & req.perms
        if granted:
            yield Rule(key, subject, granted, ALLOW, _provenance(model, subject, scope, granted))


def compile_tables(model: SecurityModel, version: int = 1) -> dict[Scope, RuleTable]:
    """Per-scope rule tables.  Assumes the model was validated by the caller."""
    tables = {}
    for scope in SCOPES:
        dispatch: dict[str, list[Rule]] = {name: [] for name in TRACE_SYSCALLS}
        subjects = [(p.name, p.kind) for p in model.patterns] + [(DEFAULT_SUBJECT, None)]
        for subject, kind in subjects:
            for rule in _rules_for(model, scope, subject, kind):
                dispatch[REQUIREMENTS[rule.syscall].syscall].append(rule)
        tables[scope] = RuleTable(scope, {k: tuple(v) for k, v in dispatch.items()}, version)
    return tables


def _predicate(event, model: SecurityModel) -> EventPredicate:
    target = event.target
    if isinstance(target, AttrTarget):
        kind = target.kind
    else:
        pattern = model.pattern(target)
        if pattern is None:
            raise ValueError(f"unknown pattern {target!r}")
        kind = pattern.kind
    return EventPredicate(event.scope, syscalls_for(kind, event.action.permission), target)


def compile_temporal(rule: TemporalRule, model: SecurityModel, name: str = "temporal") -> MonitorSpec:
    return MonitorSpec(name, _predicate(rule.trigger, model), rule.modality, _predicate(rule.body, model))


def compile(model: SecurityModel, version: int = 1) -> CompiledPolicy:
    temporal = tuple(p for p in model.policies if isinstance(p.body, TemporalRule))
    specs = tuple(compile_temporal(p.body, model, p.name) for p in temporal)
    return CompiledPolicy(model.patterns, compile_tables(model, version), specs, temporal)


# -- clawtable v1 ------------------------------------------------------------

HEADER = "clawtable v1"


class TableFormatError(ValueError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


def export_table(compiled: CompiledPolicy, banner: str | None = None) -> str:
    lines = [HEADER]
    if banner:
        lines.extend(f"# {b}" for b in banner.splitlines())
    lines.extend(render_pattern(p) for p in compiled.patterns)
    for scope in SCOPES:
        table = compiled.tables[scope]
        lines.append(f"scope {scope.value} version {table.version}")
        lines.extend(rule.line() for rule in table.rules())
    lines.extend(render_policy(p) for p in compiled.temporal)
    return "\n".join(lines) + "\n"


def _parse_rule(lineno: int, text: str, subjects: set[str]) -> Rule:
    body, _, prov = text.partition("#")
    fields = body.split()
    if len(fields) != 4:
        raise TableFormatError(lineno, "expected '<syscall> <subject> <perms> <allow|deny> # provenance'")
    key, subject, perms_text, decision = fields
    if key not in REQUIREMENTS:
        raise TableFormatError(lineno, f"unknown syscall {key!r}")
    if subject not in subjects:
        raise TableFormatError(lineno, f"unknown subject {subject!r}")
    if decision not in (ALLOW, DENY):
        raise TableFormatError(lineno, f"bad decision {decision!r}")
    try:
        perms = frozenset(Permission.parse(p) for p in perms_text.split(","))
    except ValueError as exc:
        raise TableFormatError(lineno, str(exc)) from None
    provenance = tuple(p.strip() for p in prov.split(";") if p.strip())
    if not provenance:
        raise TableFormatError(lineno, "rule without provenance")
    return Rule(key, subject, perms, decision, provenance)


def import_table(text: str) -> CompiledPolicy:
    lines = text.splitlines()
    if not lines or lines[0].strip() != HEADER:
        raise TableFormatError(1, f"missing {HEADER!r} header")
    decl_lines: list[tuple[int, str]] = []
    sections: dict[Scope, tuple[int, list[tuple[int, str]]]] = {}
    current: list[tuple[int, str]] | None = None
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        word = line.split(None, 1)[0]
        if word in ("entity", "policy"):
            decl_lines.append((lineno, line))
        elif word == "scope":
            parts = line.split()
            if len(parts) not in (2, 4) or (len(parts) == 4 and parts[2] != "version"):
                raise TableFormatError(lineno, "expected 'scope <Scope> [version <n>]'")
            try:
                scope = Scope.parse(parts[1])
                version = int(parts[3]) if len(parts) == 4 else 1
            except ValueError as exc:
                raise TableFormatError(lineno, str(exc)) from None
            if scope in sections:
                raise TableFormatError(lineno, f"duplicate scope {scope.value}")
            current = []
            sections[scope] = (version, current)
        elif current is None:
            raise TableFormatError(lineno, "rule before any scope header")
        else:
            current.append((lineno, line))

    # declarations reuse the policy grammar; keep line numbers aligned
    padded = [""] * len(lines)
    for lineno, line in decl_lines:
        padded[lineno - 1] = line
    try:
        decls = parse("\n".join(padded))
    except PolicySyntaxError as exc:
        first = exc.diagnostics[0]
        raise TableFormatError(first.line, first.message) from None
    if any(not isinstance(p.body, TemporalRule) for p in decls.policies):
        raise TableFormatError(1, "only temporal policies may appear in a table")

    subjects = {p.name for p in decls.patterns} | {DEFAULT_SUBJECT}
    tables = {}
    for scope in SCOPES:
        version, rows = sections.get(scope, (1, []))
        dispatch: dict[str, list[Rule]] = {name: [] for name in TRACE_SYSCALLS}
        for lineno, row in rows:
            rule = _parse_rule(lineno, row, subjects)
            dispatch[REQUIREMENTS[rule.syscall].syscall].append(rule)
        tables[scope] = RuleTable(scope, {k: tuple(v) for k, v in dispatch.items()}, version)
    temporal = decls.policies
    specs = tuple(compile_temporal(p.body, decls, p.name) for p in temporal)
    return CompiledPolicy(decls.patterns, tables, specs, temporal)


def empty_table(scope: Scope, version: int = 1) -> RuleTable:
    return RuleTable(scope, {}, version)
