"""Reference implementations the package is checked against.

These are deliberately naive and share no code with the package beyond
the plain data types (and the literal model-to-syscall mapping, which is
pinned cell by cell in test_compiler).
"""

from __future__ import annotations

from scopeguard.lang import AttrTarget, Modality
from scopeguard.model import (
    BoolExact,
    EntityKind,
    GlobPattern,
    IntExact,
    IntRange,
    Permission,
    Scope,
)

R, W, A, NX, VIS = (
    Permission.READ,
    Permission.WRITE,
    Permission.APPEND,
    Permission.NOEXEC,
    Permission.VISIBLE,
)
F, D, P, S, V = (
    EntityKind.FILE,
    EntityKind.DIRECTORY,
    EntityKind.PROCESS,
    EntityKind.SOCKET,
    EntityKind.DEVICE,
)
ANY_KIND = frozenset(EntityKind)

# -- glob ----------------------------------------------------------------------


def nfa_glob(pattern: str, value: str) -> bool:
    """Thompson-style simulation: states are positions in the pattern."""

    def close(states: set[int]) -> set[int]:
        out = set(states)
        for s in states:
            while s < len(pattern) and pattern[s] == "*":
                s += 1
                out.add(s)
        return out

    states = close({0})
    for ch in value:
        nxt = set()
        for s in states:
            if s < len(pattern):
                if pattern[s] == "*":
                    nxt.add(s)
                elif pattern[s] == ch:
                    nxt.add(s + 1)
        states = close(nxt)
        if not states:
            return False
    return len(pattern) in states


# -- resolution ------------------------------------------------------------------


def _value_ok(matcher, value) -> bool:
    if isinstance(matcher, GlobPattern):
        return isinstance(value, str) and nfa_glob(matcher.pattern, value)
    if isinstance(matcher, BoolExact):
        return value is matcher.value
    if isinstance(value, bool) or not isinstance(value, int):
        return False
    if isinstance(matcher, IntExact):
        return value == matcher.value
    if isinstance(matcher, IntRange):
        return matcher.lo <= value <= matcher.hi
    return False


def oracle_pattern(model, kinds, attrs):
    for pat in model.patterns:
        if pat.kind not in kinds:
            continue
        ok = True
        for m in pat.attrs:
            if m.key in attrs:
                ok = _value_ok(m.matcher, attrs[m.key])
            else:
                ok = m.key in ("credential", "sensitive")
            if not ok:
                break
        if ok:
            return pat
    return None


def oracle_perms(model, pat, scope) -> frozenset:
    if pat is None:
        return frozenset(model.defaults.get(scope, frozenset()))
    out = frozenset()
    for g in model.grants:
        if g.pattern == pat.name and g.scope is scope:
            out |= g.perms
    return out


# -- single events -----------------------------------------------------------------


class _Err(Exception):
    pass


def _parent(path: str) -> str:
    head = path.rstrip("/").rsplit("/", 1)[0]
    return head or "/"


def _proc_attrs(pid: int, scopes: dict) -> dict:
    attrs = {"pid": pid}
    if pid in scopes:
        attrs["scope"] = scopes[pid].value
    return attrs


def path_entity(path: str, caller: int, scopes: dict) -> tuple[str, dict]:
    parts = path.split("/")
    if len(parts) >= 3 and parts[0] == "" and parts[1] == "proc" and (parts[2] == "self" or parts[2].isdigit()):
        pid = caller if parts[2] == "self" else int(parts[2])
        return "proc", _proc_attrs(pid, scopes)
    return "path", {"path": path}


_DOMAIN_KINDS = {"path": frozenset({F, D, V}), "dir": frozenset({D}), "socket": frozenset({S}), "proc": frozenset({P})}


class EventOracle:
    """Direct model-level judgement of one event in a known process state.

    ``fds`` maps fd -> ("path", path, append) | ("socket", addr | None).
    """

    def __init__(self, model):
        self.model = model

    def _lookup(self, entity, scope):
        domain, attrs = entity
        pat = oracle_pattern(self.model, _DOMAIN_KINDS[domain], attrs)
        return pat, oracle_perms(self.model, pat, scope)

    def _need(self, entity, scope, kinds, any_of) -> bool:
        pat, perms = self._lookup(entity, scope)
        if pat is not None and pat.kind not in kinds:
            return False
        return bool(perms & any_of)

    def _exec_ok(self, entity, scope, kinds) -> bool:
        pat, perms = self._lookup(entity, scope)
        if pat is not None and pat.kind not in kinds:
            return False
        return bool(perms - {VIS}) and NX not in perms

    def _fd(self, fds, fd, scopes, caller):
        if fd not in fds:
            raise _Err
        b = fds[fd]
        if b[0] == "socket":
            if b[1] is None:
                raise _Err
            return ("socket", {"addr": b[1]}), False
        domain, attrs = path_entity(b[1], caller, scopes)
        return (domain, attrs), b[2]

    def decide(self, scope: Scope, pid: int, fds: dict, scopes: dict, ev) -> str:
        try:
            return "ALLOW" if self._decide(scope, pid, fds, scopes, ev) else "DENY"
        except _Err:
            return "ERROR"

    def _decide(self, scope, pid, fds, scopes, ev) -> bool:
        name, args = ev.syscall, ev.args
        need = self._need
        if name == "open":
            path, flags = args
            ent = path_entity(path, pid, scopes)
            ok = True
            if "R" in flags:
                ok &= need(ent, scope, {P}, {VIS}) if ent[0] == "proc" else need(ent, scope, {F, D, V}, {R})
            if "A" in flags:
                ok &= need(ent, scope, {F}, {W, A})
            elif "W" in flags:
                ok &= need(ent, scope, {F, V}, {W})
            if "C" in flags:
                ok &= need(("dir", {"path": _parent(path)}), scope, {D}, {W, A})
            return ok
        if name in ("read", "pread", "readv"):
            ent, _ = self._fd(fds, args[0], scopes, pid)
            if ent[0] == "proc":
                return need(ent, scope, {P}, {VIS})
            return need(ent, scope, {F}, {R})
        if name in ("write", "pwrite", "writev"):
            ent, append = self._fd(fds, args[0], scopes, pid)
            return need(ent, scope, {F}, {W, A} if append else {W})
        if name == "mmap":
            ent, _ = self._fd(fds, args[0], scopes, pid)
            ok = True
            if "R" in args[1]:
                ok &= need(ent, scope, {F}, {R})
            if "W" in args[1]:
                ok &= need(ent, scope, {F}, {W})
            return ok
        if name == "sendfile":
            out_ent, _ = self._fd(fds, args[0], scopes, pid)
            in_ent, _ = self._fd(fds, args[1], scopes, pid)
            return need(out_ent, scope, {F, S}, {W}) and need(in_ent, scope, {F}, {R})
        if name == "lseek":
            ent, append = self._fd(fds, args[0], scopes, pid)
            return not append and need(ent, scope, {F}, {R, W})
        if name == "getdents":
            return need(self._fd(fds, args[0], scopes, pid)[0], scope, {D}, {R})
        if name == "fstat":
            return need(self._fd(fds, args[0], scopes, pid)[0], scope, ANY_KIND, {VIS})
        if name == "ioctl":
            return need(self._fd(fds, args[0], scopes, pid)[0], scope, {V}, {W})
        if name in ("sendto", "sendmsg"):
            return need(self._fd(fds, args[0], scopes, pid)[0], scope, {S}, {W})
        if name in ("recvfrom", "recvmsg"):
            return need(self._fd(fds, args[0], scopes, pid)[0], scope, {S}, {R})
        if name in ("mkdir", "creat"):
            return need(("dir", {"path": _parent(args[0])}), scope, {D}, {W, A})
        if name in ("rmdir", "unlink"):
            return need(("dir", {"path": _parent(args[0])}), scope, {D}, {W})
        if name == "stat":
            return need(path_entity(args[0], pid, scopes), scope, ANY_KIND, {VIS})
        if name == "execve":
            return self._exec_ok(path_entity(args[0], pid, scopes), scope, {F})
        if name in ("fork", "clone"):
            return self._exec_ok(("proc", _proc_attrs(pid, scopes)), scope, {P})
        if name == "ipc":
            return need(("proc", _proc_attrs(args[1], scopes)), scope, {P}, {W})
        if name in ("close", "dup"):
            if args[0] not in fds:
                raise _Err
            return True
        if name == "connect":
            if args[0] not in fds or fds[args[0]][0] != "socket":
                raise _Err
            return True
        if name == "socket":
            return True
        raise AssertionError(name)


# -- scope hierarchy -----------------------------------------------------------------


def hierarchy_oracle(model) -> set[tuple[str, str, str]]:
    """(subject, lower, upper) for every adjacent pair where lower ⊄ upper."""
    order = [Scope.SANDBOX, Scope.AGENT, Scope.MONITOR]
    subjects = [(p.name, p) for p in model.patterns] + [("default", None)]
    out = set()
    for name, pat in subjects:
        perms = [oracle_perms(model, pat, s) for s in order]
        for i in range(2):
            if not perms[i].issubset(perms[i + 1]):
                out.add((name, order[i].value, order[i + 1].value))
    return out


# -- temporal ------------------------------------------------------------------------

_DIR_KEYS = {"mkdir", "rmdir", "creat", "unlink", "open(O_CREAT)"}
_ALIASES = {"write(O_APPEND)": "write", "pwrite(O_APPEND)": "pwrite", "writev(O_APPEND)": "writev"}


def _check_kind(model, check) -> EntityKind:
    if check.subject != "default":
        return model.pattern(check.subject).kind
    if check.entity.startswith("pid:"):
        return P
    if check.key in _DIR_KEYS:
        return D
    if not check.entity.startswith("/"):
        return S
    return F


def _attr_target_ok(model, target: AttrTarget, check) -> bool:
    if _check_kind(model, check) is not target.kind:
        return False
    pat = model.pattern(check.subject) if check.subject != "default" else None
    for m in target.attrs:
        if m.key in ("credential", "sensitive"):
            held = pat is not None and any(
                a.key == m.key and isinstance(a.matcher, BoolExact) and a.matcher.value for a in pat.attrs
            )
            if held is not m.matcher.value:
                return False
        elif m.key in ("path", "addr"):
            if not nfa_glob(m.matcher.pattern, check.entity):
                return False
        else:
            return False  # generators only use labels and path/addr globs
    return True


def event_matches(model, matcher, keys, verdict) -> bool:
    """Does a judged event fall under (scope, action, target)?"""
    if verdict.scope != matcher.scope.value:
        return False
    for c in verdict.checks:
        if _ALIASES.get(c.key, c.key) not in keys:
            continue
        if isinstance(matcher.target, AttrTarget):
            if _attr_target_ok(model, matcher.target, c):
                return True
        elif c.subject == matcher.target:
            return True
    return False


def temporal_oracle(model, policies, key_sets, verdicts):
    """Pairwise scan over judged events.

    Returns (violations, warnings, unfulfilled) as sets of
    (rule, trigger seq, body seq) / (rule, trigger seq).
    """
    violations, warnings, unfulfilled = set(), set(), set()
    for pol in policies:
        rule = pol.body
        tkeys, bkeys = key_sets[pol.name]
        trig = [v.seq for v in verdicts if v.outcome == "ALLOW" and event_matches(model, rule.trigger, tkeys, v)]
        body_allowed = [v.seq for v in verdicts if v.outcome == "ALLOW" and event_matches(model, rule.body, bkeys, v)]
        body_denied = [v.seq for v in verdicts if v.outcome == "DENY" and event_matches(model, rule.body, bkeys, v)]
        if rule.modality is Modality.ALWAYS_FORBID:
            pairs = {(t, b) for t in trig for b in body_allowed if b > t}
            for b in {b for _, b in pairs}:
                violations.add((pol.name, min(t for t, bb in pairs if bb == b), b))
            attempts = {(t, b) for t in trig for b in body_denied if b > t}
            for b in {b for _, b in attempts}:
                warnings.add((pol.name, min(t for t, bb in attempts if bb == b), b))
        else:
            for t in trig:
                if not any(b > t for b in body_allowed):
                    unfulfilled.add((pol.name, t))
    return violations, warnings, unfulfilled
