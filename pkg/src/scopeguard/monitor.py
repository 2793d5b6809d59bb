"""Trace-replay enforcement.

A :class:`Monitor` plays the role of the syscall interception layer: every
event is dispatched to its syscall's rules in the caller's scope table, the
per-process fd tables are kept up to date for allowed calls, and temporal
rules plus the agent context / leak bookkeeping are advanced.  Rule tables
can be swapped mid-trace; each event is judged by exactly one snapshot.
"""

from __future__ import annotations

import gc
import json
import posixpath
import re
import threading
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .compiler import (
    DENY,
    PREDICATE_ALIASES,
    TRACE_SYSCALLS,
    CompiledPolicy,
    EventPredicate,
    MonitorSpec,
    Rule,
    RuleTable,
)
from .lang import AttrTarget, Modality
from .model import (
    LABEL_KEYS,
    PATH_KINDS,
    SCOPES,
    EntityKind,
    EntityPattern,
    Scope,
    first_match,
)

# -- trace format ------------------------------------------------------------


class TraceError(ValueError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


@dataclass(frozen=True, slots=True)
class TraceEvent:
    seq: int
    pid: int
    syscall: str
    args: tuple
    ret: int | None = None
    line: int = 0
    raw: str = field(default="", compare=False, repr=False)  # source text, when parsed

    def text(self) -> str:
        if self.raw:
            return self.raw
        parts = [str(self.seq), str(self.pid), self.syscall, *(_fmt_arg(a) for a in self.args)]
        if self.ret is not None:
            parts += ["->", str(self.ret)]
        return " ".join(parts)


@dataclass(frozen=True, slots=True)
class ScopeDirective:
    pid: int
    scope: Scope
    line: int = 0


def _fmt_arg(a: object) -> str:
    if isinstance(a, frozenset):
        return ",".join(sorted(a, key="RWAC".index))
    return str(a)


_OPEN_FLAGS = frozenset("RWAC")
_IPC_OPS = frozenset({"semget", "semop", "semctl"})
_PROTS = {
    "R": frozenset("R"),
    "W": frozenset("W"),
    "RW": frozenset("RW"),
    "R,W": frozenset("RW"),
    "W,R": frozenset("RW"),
}

# syscall -> (argument kinds, meaning of the return value)
ARG_SPECS: dict[str, tuple[tuple[str, ...], str | None]] = {
    "open": (("path", "flags"), "fd"),
    "close": (("fd",), None),
    "dup": (("fd",), "fd"),
    "read": (("fd", "int"), None),
    "write": (("fd", "int"), None),
    "pread": (("fd", "int"), None),
    "pwrite": (("fd", "int"), None),
    "readv": (("fd", "int"), None),
    "writev": (("fd", "int"), None),
    "mmap": (("fd", "prot"), None),
    "sendfile": (("fd", "fd", "int"), None),
    "lseek": (("fd", "int"), None),
    "getdents": (("fd",), None),
    "mkdir": (("path",), None),
    "rmdir": (("path",), None),
    "creat": (("path",), "fd"),
    "unlink": (("path",), None),
    "socket": ((), "fd"),
    "connect": (("fd", "word"), None),
    "sendto": (("fd", "int"), None),
    "sendmsg": (("fd", "int"), None),
    "recvfrom": (("fd", "int"), None),
    "recvmsg": (("fd", "int"), None),
    "execve": (("path",), None),
    "fork": ((), "pid"),
    "clone": ((), "pid"),
    "stat": (("path",), None),
    "fstat": (("fd",), None),
    "ioctl": (("fd", "word"), None),
    "ipc": (("ipcop", "int"), None),
}
assert set(ARG_SPECS) == set(TRACE_SYSCALLS)

_INT_RE = re.compile(r"-?\d+$")


def _parse_arg(kind: str, text: str, lineno: int) -> object:
    if kind in ("fd", "int"):
        if not _INT_RE.match(text):
            raise TraceError(lineno, f"expected integer, found {text!r}")
        return int(text)
    if kind == "flags":
        flags = text.split(",")
        if not flags or any(f not in _OPEN_FLAGS for f in flags):
            raise TraceError(lineno, f"bad open flags {text!r} (comma-separated subset of R,W,A,C)")
        return frozenset(flags)
    if kind == "prot":
        if text not in _PROTS:
            raise TraceError(lineno, f"bad mmap protection {text!r} (R, W or RW)")
        return "RW" if len(_PROTS[text]) == 2 else text
    if kind == "ipcop":
        if text not in _IPC_OPS:
            raise TraceError(lineno, f"bad ipc op {text!r} (semget, semop or semctl)")
        return text
    return text


def parse_trace(text: str) -> list[TraceEvent | ScopeDirective]:
    """Parse trace text into events and ``!scope`` directives, in file order."""
    items: list[TraceEvent | ScopeDirective] = []
    last_seq: int | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("!"):
            parts = line.split()
            if parts[0] != "!scope" or len(parts) != 3 or not _INT_RE.match(parts[1]):
                raise TraceError(lineno, "expected '!scope <pid> <Scope>'")
            try:
                scope = Scope.parse(parts[2])
            except ValueError as exc:
                raise TraceError(lineno, str(exc)) from None
            items.append(ScopeDirective(int(parts[1]), scope, lineno))
            continue
        body, arrow, ret_text = line.partition("->")
        ret = None
        if arrow:
            ret_text = ret_text.strip()
            if not _INT_RE.match(ret_text):
                raise TraceError(lineno, f"bad return value {ret_text!r}")
            ret = int(ret_text)
        parts = body.split()
        if len(parts) < 3 or not _INT_RE.match(parts[0]) or not _INT_RE.match(parts[1]):
            raise TraceError(lineno, "expected '<seq> <pid> <syscall> <args...> [-> <ret>]'")
        seq, pid, name = int(parts[0]), int(parts[1]), parts[2]
        if name not in ARG_SPECS:
            raise TraceError(lineno, f"unknown syscall {name!r}")
        kinds, _ = ARG_SPECS[name]
        raw_args = parts[3:]
        if len(raw_args) != len(kinds):
            raise TraceError(lineno, f"{name} takes {len(kinds)} argument(s), got {len(raw_args)}")
        if last_seq is not None and seq <= last_seq:
            raise TraceError(lineno, f"sequence number {seq} does not increase (previous {last_seq})")
        last_seq = seq
        args = tuple(_parse_arg(k, a, lineno) for k, a in zip(kinds, raw_args))
        items.append(TraceEvent(seq, pid, name, args, ret, lineno, line))
    return items


def render_trace(items: Iterable[TraceEvent | ScopeDirective]) -> str:
    out = []
    for item in items:
        if isinstance(item, ScopeDirective):
            out.append(f"!scope {item.pid} {item.scope.value}")
        else:
            out.append(item.text())
    return "\n".join(out) + "\n"


# -- runtime entities --------------------------------------------------------


@dataclass(frozen=True, slots=True)
class Entity:
    """A concrete object an event touches.

    ``domain`` selects which pattern kinds it may resolve to: ``path``
    (file, directory or device), ``dir`` (a parent directory), ``socket``
    or ``proc``.
    """

    domain: str
    ident: str
    attrs: tuple[tuple[str, object], ...]


_DOMAIN_KINDS = {
    "path": PATH_KINDS,
    "dir": frozenset({EntityKind.DIRECTORY}),
    "socket": frozenset({EntityKind.SOCKET}),
    "proc": frozenset({EntityKind.PROCESS}),
}
NATURAL_KIND = {
    "path": EntityKind.FILE,
    "dir": EntityKind.DIRECTORY,
    "socket": EntityKind.SOCKET,
    "proc": EntityKind.PROCESS,
}
_PROC_RE = re.compile(r"^/proc/(\d+|self)(?:/|$)")


@dataclass(slots=True)
class FdBinding:
    entity: Entity | None  # None for a socket that is not connected yet
    append: bool = False
    socket: bool = False


@dataclass
class ProcState:
    pid: int
    scope: Scope
    fds: dict[int, FdBinding] = field(default_factory=dict)

    def fork(self, child: int) -> "ProcState":
        return ProcState(child, self.scope, {fd: FdBinding(b.entity, b.append, b.socket) for fd, b in self.fds.items()})


class Resolver:
    """Binds concrete entities to pattern names, memoized."""

    def __init__(self, patterns: Sequence[EntityPattern]):
        self.patterns = tuple(patterns)
        self._cache: dict[Entity, EntityPattern | None] = {}
        self._subjects: dict[Entity, str] = {}

    def pattern(self, entity: Entity) -> EntityPattern | None:
        try:
            return self._cache[entity]
        except KeyError:
            found = first_match(self.patterns, _DOMAIN_KINDS[entity.domain], dict(entity.attrs))
            self._cache[entity] = found
            return found

    def subject(self, entity: Entity) -> str:
        try:
            return self._subjects[entity]
        except KeyError:
            p = self.pattern(entity)
            name = self._subjects[entity] = "default" if p is None else p.name
            return name


# -- report ------------------------------------------------------------------

ALLOW, DENY_V, ERROR = "ALLOW", "DENY", "ERROR"


@dataclass(slots=True)
class CheckResult:
    key: str
    entity: str
    subject: str
    rule: str | None  # the rule line, None for the implicit deny
    decision: str
    provenance: tuple[str, ...] = ()


@dataclass(slots=True)
class Verdict:
    seq: int
    pid: int
    scope: str | None
    syscall: str
    outcome: str
    detail: str
    checks: tuple[CheckResult, ...] = ()
    version: int | None = None
    event: str = ""


@dataclass(frozen=True)
class TemporalViolation:
    rule: str
    trigger_seq: int
    seq: int


@dataclass(frozen=True)
class Obligation:
    rule: str
    trigger_seq: int


@dataclass(frozen=True)
class AttemptWarning:
    rule: str
    trigger_seq: int
    seq: int


@dataclass(frozen=True)
class LeakEvent:
    seq: int
    entity: str
    sink: str


@dataclass
class Report:
    verdicts: list[Verdict] = field(default_factory=list)
    violations: list[TemporalViolation] = field(default_factory=list)
    unfulfilled: list[Obligation] = field(default_factory=list)
    leaks: list[LeakEvent] = field(default_factory=list)
    warnings: list[AttemptWarning] = field(default_factory=list)

    def counts(self) -> dict[str, int]:
        out = {"events": len(self.verdicts), "allow": 0, "deny": 0, "error": 0}
        for v in self.verdicts:
            out[v.outcome.lower()] += 1
        out["temporal"] = len(self.violations)
        out["unfulfilled"] = len(self.unfulfilled)
        out["leaks"] = len(self.leaks)
        out["warnings"] = len(self.warnings)
        return out

    @property
    def clean(self) -> bool:
        c = self.counts()
        return not (c["deny"] or c["error"] or c["temporal"] or c["leaks"])

    def verdict(self, seq: int) -> Verdict:
        for v in self.verdicts:
            if v.seq == seq:
                return v
        raise KeyError(seq)

    def render_text(self) -> str:
        lines = [f"{v.seq} {v.outcome} {v.syscall} {v.detail}" for v in self.verdicts]
        lines += [f"temporal-violation {t.rule} trigger={t.trigger_seq} seq={t.seq}" for t in self.violations]
        lines += [f"attempted {w.rule} trigger={w.trigger_seq} seq={w.seq} (denied)" for w in self.warnings]
        lines += [f"leak {lk.entity} via {lk.sink} seq={lk.seq}" for lk in self.leaks]
        lines += [f"unfulfilled {o.rule} trigger={o.trigger_seq}" for o in self.unfulfilled]
        lines.append("-- summary")
        lines.append(" ".join(f"{k}={v}" for k, v in self.counts().items()))
        return "\n".join(lines) + "\n"

    def render_tagged(self) -> str:
        def dump(tag: str, obj) -> str:
            return f"{tag} {json.dumps(_jsonable(obj), sort_keys=True, separators=(',', ':'))}"

        lines = ["report v1"]
        lines += [dump("event", v) for v in self.verdicts]
        lines += [dump("temporal", t) for t in self.violations]
        lines += [dump("attempted", w) for w in self.warnings]
        lines += [dump("leak", lk) for lk in self.leaks]
        lines += [dump("unfulfilled", o) for o in self.unfulfilled]
        lines.append(dump("summary", self.counts()))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_tagged(cls, text: str) -> "Report":
        lines = text.splitlines()
        if not lines or lines[0].strip() != "report v1":
            raise ValueError("not a tagged report (missing 'report v1' header)")
        report = cls()
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            tag, _, payload = line.partition(" ")
            try:
                data = json.loads(payload)
            except json.JSONDecodeError as exc:
                raise ValueError(f"line {lineno}: {exc}") from None
            if tag == "event":
                data["checks"] = tuple(
                    CheckResult(**{**c, "provenance": tuple(c["provenance"])}) for c in data["checks"]
                )
                report.verdicts.append(Verdict(**data))
            elif tag == "temporal":
                report.violations.append(TemporalViolation(**data))
            elif tag == "attempted":
                report.warnings.append(AttemptWarning(**data))
            elif tag == "leak":
                report.leaks.append(LeakEvent(**data))
            elif tag == "unfulfilled":
                report.unfulfilled.append(Obligation(**data))
            elif tag != "summary":
                raise ValueError(f"line {lineno}: unknown tag {tag!r}")
        return report


def _jsonable(obj):
    if hasattr(obj, "__dataclass_fields__"):
        return {k: _jsonable(getattr(obj, k)) for k in obj.__dataclass_fields__}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(x) for x in obj]
    return obj


def explain(report: Report, seq: int) -> list[str]:
    """Provenance chain from the syscall at ``seq`` back to grants and policies."""
    try:
        v = report.verdict(seq)
    except KeyError:
        raise KeyError(f"no event with seq {seq} in report") from None
    scope = v.scope or "?"
    out = [f"seq {v.seq}: {v.event or v.syscall} (pid {v.pid}, scope {scope}) -> {v.outcome}"]
    if v.outcome == ERROR:
        out.append(f"  error: {v.detail}")
    if v.version is not None:
        out.append(f"  judged by {scope} table version {v.version}")
    if not v.checks and v.outcome == ALLOW:
        out.append(f"  {v.syscall} needs no permission check")
    for c in v.checks:
        out.append(f"  check {c.key} on {c.entity} (subject {c.subject}) -> {c.decision}")
        if c.rule is None:
            out.append(f"    no rule for {c.key} on {c.subject}: implicit deny")
        else:
            out.append(f"    rule: {c.rule}")
            for p in c.provenance:
                out.append(f"    from: {p}")
    for t in report.violations:
        if t.seq == seq:
            out.append(f"  temporal violation of {t.rule}: triggered at seq {t.trigger_seq}")
    for w in report.warnings:
        if w.seq == seq:
            out.append(f"  attempted body of {w.rule} (triggered at seq {w.trigger_seq}) was denied")
    for lk in report.leaks:
        if lk.seq == seq:
            out.append(f"  leaked {lk.entity} via {lk.sink}")
    return out


# -- monitor -----------------------------------------------------------------


class StaleTableError(ValueError):
    pass


class TableSlot:
    """Single-writer snapshot holder: readers always see one whole table."""

    def __init__(self, table: RuleTable):
        self._table = table
        self._lock = threading.Lock()

    @property
    def table(self) -> RuleTable:
        return self._table

    def swap(self, new: RuleTable) -> RuleTable:
        with self._lock:
            old = self._table
            if new.version <= old.version:
                raise StaleTableError(f"{new.scope.value} table version {new.version} is not newer than {old.version}")
            self._table = new
            return old


class _EventError(Exception):
    pass


_SCOPE_NAMES = {s: s.value for s in SCOPES}
_READ_CLASS = frozenset({"read", "pread", "readv", "mmap(PROT_READ)", "sendfile(in)", "getdents"})
_SOCKET_WRITES = frozenset({"sendto", "sendmsg", "sendfile(out)"})


class _SpecState:
    __slots__ = ("spec", "trigger_seq", "pending")

    def __init__(self, spec: MonitorSpec):
        self.spec = spec
        self.trigger_seq: int | None = None
        self.pending: list[int] = []


class Monitor:
    """Replays events against live rule tables.

    >>> mon = Monitor(compiled)
    >>> mon.update_rules(Scope.AGENT, newer_table, at_seq=10)
    >>> report = mon.replay(parse_trace(text))
    """

    def __init__(self, compiled: CompiledPolicy):
        self.compiled = compiled
        self.resolver = Resolver(compiled.patterns)
        self.slots = {s: TableSlot(compiled.tables[s]) for s in SCOPES}
        self.procs: dict[int, ProcState] = {}
        self.scopes: dict[int, Scope] = {}
        self.context: set[str] = set()
        self.leaked: set[str] = set()
        self.specs = [_SpecState(s) for s in compiled.specs]
        self.report = Report()
        self._scheduled: list[tuple[int, int, Scope, RuleTable]] = []
        self._latest = {s: compiled.tables[s].version for s in SCOPES}
        self._target_cache: dict[tuple[int, Entity], bool] = {}
        self._handlers = self._handler_table()

    # hot update

    def update_rules(self, scope: Scope, new_table: RuleTable, at_seq: int) -> None:
        """Swap ``scope``'s table so events with ``seq >= at_seq`` use ``new_table``."""
        if new_table.scope is not scope:
            raise ValueError(f"table is for {new_table.scope.value}, not {scope.value}")
        if new_table.version <= self._latest[scope]:
            raise StaleTableError(
                f"{scope.value} table version {new_table.version} is not newer than {self._latest[scope]}"
            )
        self._latest[scope] = new_table.version
        self._scheduled.append((at_seq, len(self._scheduled), scope, new_table))
        self._scheduled.sort(key=lambda x: (x[0], x[1]))

    def _apply_updates(self, seq: int) -> None:
        while self._scheduled and self._scheduled[0][0] <= seq:
            _, _, scope, table = self._scheduled.pop(0)
            self.slots[scope].swap(table)

    # entity helpers

    def _path_entity(self, path: str, caller: ProcState) -> Entity:
        m = _PROC_RE.match(path)
        if m:
            pid = caller.pid if m.group(1) == "self" else int(m.group(1))
            return self._proc_entity(pid)
        return Entity("path", path, (("path", path),))

    def _dir_entity(self, path: str) -> Entity:
        parent = posixpath.dirname(path.rstrip("/")) or "/"
        return Entity("dir", parent, (("path", parent),))

    def _proc_entity(self, pid: int) -> Entity:
        scope = self.scopes.get(pid)
        attrs: tuple = (("pid", pid),) if scope is None else (("pid", pid), ("scope", scope.value))
        return Entity("proc", f"pid:{pid}", attrs)

    @staticmethod
    def _binding(proc: ProcState, fd: int) -> FdBinding:
        b = proc.fds.get(fd)
        if b is None:
            raise _EventError(f"unknown fd {fd}")
        return b

    def _fd_entity(self, proc: ProcState, fd: int) -> tuple[Entity, FdBinding]:
        b = self._binding(proc, fd)
        if b.entity is None:
            raise _EventError(f"socket fd {fd} is not connected")
        return b.entity, b

    # event semantics

    def checks(self, proc: ProcState, ev: TraceEvent) -> list[tuple[str, Entity]]:
        """The (check key, entity) pairs an event must satisfy."""
        handler = self._handlers.get(ev.syscall)
        if handler is None:
            raise _EventError(f"unsupported syscall {ev.syscall}")
        return handler(proc, ev.syscall, ev.args)

    def _c_open(self, proc, name, args):
        path, flags = args
        ent = self._path_entity(path, proc)
        out = []
        if ent.domain == "proc":
            if "R" in flags:
                out.append(("open(procfs)", ent))
        elif "R" in flags:
            out.append(("open(O_RDONLY)", ent))
        if "A" in flags:
            out.append(("open(O_APPEND)", ent))
        elif "W" in flags:
            out.append(("open(O_WRONLY)", ent))
        if "C" in flags:
            out.append(("open(O_CREAT)", self._dir_entity(path)))
        if not out:
            out.append(("open(O_WRONLY)", ent))
        return out

    def _c_read(self, proc, name, args):
        ent, _ = self._fd_entity(proc, args[0])
        return [(f"{name}(procfs)" if ent.domain == "proc" else name, ent)]

    def _c_write(self, proc, name, args):
        ent, b = self._fd_entity(proc, args[0])
        return [(f"{name}(O_APPEND)" if b.append else name, ent)]

    def _c_mmap(self, proc, name, args):
        ent, _ = self._fd_entity(proc, args[0])
        out = []
        if "R" in args[1]:
            out.append(("mmap(PROT_READ)", ent))
        if "W" in args[1]:
            out.append(("mmap(PROT_WRITE)", ent))
        return out

    def _c_sendfile(self, proc, name, args):
        out_ent, _ = self._fd_entity(proc, args[0])
        in_ent, _ = self._fd_entity(proc, args[1])
        return [("sendfile(out)", out_ent), ("sendfile(in)", in_ent)]

    def _c_lseek(self, proc, name, args):
        ent, b = self._fd_entity(proc, args[0])
        return [("lseek(O_APPEND)" if b.append else "lseek", ent)]

    def _c_fd(self, proc, name, args):
        return [(name, self._fd_entity(proc, args[0])[0])]

    def _c_parent(self, proc, name, args):
        return [(name, self._dir_entity(args[0]))]

    def _c_path(self, proc, name, args):
        return [(name, self._path_entity(args[0], proc))]

    def _c_self(self, proc, name, args):
        return [(name, self._proc_entity(proc.pid))]

    def _c_ipc(self, proc, name, args):
        return [(args[0], self._proc_entity(args[1]))]

    def _c_fd_only(self, proc, name, args):
        self._binding(proc, args[0])
        return []

    def _c_connect(self, proc, name, args):
        if not self._binding(proc, args[0]).socket:
            raise _EventError(f"fd {args[0]} is not a socket")
        return []

    def _c_none(self, proc, name, args):
        return []

    def _handler_table(self) -> dict:
        table = {
            "open": self._c_open,
            "mmap": self._c_mmap,
            "sendfile": self._c_sendfile,
            "lseek": self._c_lseek,
            "ipc": self._c_ipc,
            "connect": self._c_connect,
            "socket": self._c_none,
        }
        groups = (
            (("read", "pread", "readv"), self._c_read),
            (("write", "pwrite", "writev"), self._c_write),
            (("getdents", "fstat", "ioctl", "sendto", "sendmsg", "recvfrom", "recvmsg"), self._c_fd),
            (("mkdir", "rmdir", "unlink", "creat"), self._c_parent),
            (("execve", "stat"), self._c_path),
            (("fork", "clone"), self._c_self),
            (("close", "dup"), self._c_fd_only),
        )
        for names, handler in groups:
            table.update(dict.fromkeys(names, handler))
        return table

    def _effects(self, proc: ProcState, ev: TraceEvent, checks: list[tuple[str, Entity]]) -> None:
        name, args, ret = ev.syscall, ev.args, ev.ret
        if name == "open" or name == "creat":
            if ret is not None and ret >= 0:
                ent = self._path_entity(args[0], proc)
                append = name == "open" and "A" in args[1]
                proc.fds[ret] = FdBinding(ent, append)
        elif name == "close":
            del proc.fds[args[0]]
        elif name == "dup":
            if ret is not None and ret >= 0:
                proc.fds[ret] = proc.fds[args[0]]
        elif name == "socket":
            if ret is not None and ret >= 0:
                proc.fds[ret] = FdBinding(None, socket=True)
        elif name == "connect":
            addr = args[1]
            b = proc.fds[args[0]]
            b.entity = Entity("socket", addr, (("addr", addr),))
        elif name in ("fork", "clone"):
            if ret is not None and ret > 0:
                scope = self.scopes.setdefault(ret, proc.scope)
                child = proc.fork(ret)
                child.scope = scope
                self.procs[ret] = child

    def _judge(self, table: RuleTable, checks: list[tuple[str, Entity]]) -> tuple[bool, list[CheckResult]]:
        results = []
        ok = True
        subject_of = self.resolver.subject
        lookup = table.lookup
        for key, ent in checks:
            subject = subject_of(ent)
            rule: Rule | None = lookup(key, subject)
            if rule is None:
                ok = False
                results.append(CheckResult(key, ent.ident, subject, None, "deny"))
            else:
                if rule.decision == DENY:
                    ok = False
                results.append(CheckResult(key, ent.ident, subject, rule._line, rule.decision, rule.provenance))
        return ok, results

    def _matches(self, pred: EventPredicate, scope: Scope, checks: list[tuple[str, Entity]]) -> bool:
        if pred.scope is not scope:
            return False
        for key, ent in checks:
            if PREDICATE_ALIASES.get(key, key) in pred.keys and self._target(pred, ent):
                return True
        return False

    def _target(self, pred: EventPredicate, ent: Entity) -> bool:
        cache_key = (id(pred), ent)
        hit = self._target_cache.get(cache_key)
        if hit is not None:
            return hit
        pattern = self.resolver.pattern(ent)
        target = pred.target
        if isinstance(target, AttrTarget):
            kind = pattern.kind if pattern is not None else NATURAL_KIND[ent.domain]
            attrs = dict(ent.attrs)
            for key in LABEL_KEYS:
                attrs[key] = pattern is not None and pattern.label(key)
            result = kind is target.kind and all(m.accepts(attrs) for m in target.attrs)
        else:
            result = pattern is not None and pattern.name == target
        self._target_cache[cache_key] = result
        return result

    def _temporal(self, ev: TraceEvent, scope: Scope, checks, allowed: bool) -> None:
        for st in self.specs:
            spec = st.spec
            body = self._matches(spec.body, scope, checks)
            if spec.modality is Modality.ALWAYS_FORBID:
                if body and st.trigger_seq is not None:
                    if allowed:
                        self.report.violations.append(TemporalViolation(spec.name, st.trigger_seq, ev.seq))
                    else:
                        self.report.warnings.append(AttemptWarning(spec.name, st.trigger_seq, ev.seq))
                if allowed and st.trigger_seq is None and self._matches(spec.trigger, scope, checks):
                    st.trigger_seq = ev.seq
            elif allowed:
                if body:
                    st.pending.clear()
                if self._matches(spec.trigger, scope, checks):
                    st.pending.append(ev.seq)

    def _flow(self, ev: TraceEvent, checks: list[tuple[str, Entity]]) -> None:
        for key, ent in checks:
            if key in _READ_CLASS and ent.domain == "path":
                self.context.add(ent.ident)
        for key, ent in checks:
            if key in _SOCKET_WRITES and ent.domain == "socket":
                for item in sorted(self.context - self.leaked):
                    self.leaked.add(item)
                    self.report.leaks.append(LeakEvent(ev.seq, item, ent.ident))

    def directive(self, d: ScopeDirective) -> None:
        self.scopes[d.pid] = d.scope
        proc = self.procs.get(d.pid)
        if proc is None:
            self.procs[d.pid] = ProcState(d.pid, d.scope)
        else:
            proc.scope = d.scope

    def step(self, ev: TraceEvent) -> Verdict:
        """Judge one event and apply its effects if allowed."""
        if self._scheduled and self._scheduled[0][0] <= ev.seq:
            self._apply_updates(ev.seq)
        proc = self.procs.get(ev.pid)
        if proc is None:
            v = Verdict(ev.seq, ev.pid, None, ev.syscall, ERROR, f"no scope known for pid {ev.pid}", event=ev.text())
            self.report.verdicts.append(v)
            return v
        scope = proc.scope
        scope_name = _SCOPE_NAMES[scope]
        table = self.slots[scope].table
        try:
            checks = self.checks(proc, ev)
        except _EventError as exc:
            v = Verdict(ev.seq, ev.pid, scope_name, ev.syscall, ERROR, str(exc), (), table.version, ev.text())
            self.report.verdicts.append(v)
            return v
        allowed, results = self._judge(table, checks)
        if allowed:
            self._effects(proc, ev, checks)
            if scope is Scope.AGENT:
                self._flow(ev, checks)
            detail = " ".join([f"{r.entity}[{r.subject}]" for r in results]) if results else "unchecked"
        else:
            failed = next(r for r in results if r.decision != "allow")
            why = "; ".join(failed.provenance) if failed.rule else "implicit deny"
            detail = f"{failed.key} on {failed.entity}[{failed.subject}]: {why}"
        if self.specs:
            self._temporal(ev, scope, checks, allowed)
        v = Verdict(
            ev.seq,
            ev.pid,
            scope_name,
            ev.syscall,
            ALLOW if allowed else DENY_V,
            detail,
            tuple(results),
            table.version,
            ev.text(),
        )
        self.report.verdicts.append(v)
        return v

    def finish(self) -> Report:
        for st in self.specs:
            for t in st.pending:
                self.report.unfulfilled.append(Obligation(st.spec.name, t))
            st.pending = []
        return self.report

    def replay(self, items: Iterable[TraceEvent | ScopeDirective]) -> Report:
        # The report only grows and holds no cycles; letting the cyclic
        # collector rescan it every few thousand allocations costs ~30%.
        paused = gc.isenabled()
        gc.disable()
        try:
            for item in items:
                if isinstance(item, ScopeDirective):
                    self.directive(item)
                else:
                    self.step(item)
        finally:
            if paused:
                gc.enable()
        return self.finish()


def replay(
    compiled: CompiledPolicy,
    trace: Iterable[TraceEvent | ScopeDirective],
    updates: Iterable[tuple[int, RuleTable]] = (),
) -> Report:
    """Replay ``trace``; ``updates`` are ``(at_seq, table)`` hot swaps."""
    mon = Monitor(compiled)
    for at_seq, table in updates:
        mon.update_rules(table.scope, table, at_seq)
    return mon.replay(trace)
