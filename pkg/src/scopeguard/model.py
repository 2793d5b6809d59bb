"""Core domain types: scopes, permissions, entity patterns and resolution.

A :class:`SecurityModel` is the static part of an agent confinement policy.
It declares entity patterns (globs and literal attributes over files,
directories, processes, sockets and devices), grants permission sets to
trust scopes, and supplies a per-scope default for anything no pattern
matches.  Everything here is immutable and side-effect free.
"""

from __future__ import annotations

import enum
import functools
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Union


class Scope(enum.Enum):
    SANDBOX = "Sandbox"
    AGENT = "Agent"
    MONITOR = "Monitor"

    # members are singletons, so identity hashing is consistent with ==
    # and keeps the monitor's per-event dict lookups out of Python code
    __hash__ = object.__hash__

    @property
    def rank(self) -> int:
        return _SCOPE_RANK[self]

    def __lt__(self, other: "Scope") -> bool:
        if not isinstance(other, Scope):
            return NotImplemented
        return self.rank < other.rank

    @classmethod
    def parse(cls, text: str) -> "Scope":
        try:
            return cls(text)
        except ValueError:
            raise ValueError(f"unknown scope {text!r}") from None


_SCOPE_RANK = {Scope.SANDBOX: 0, Scope.AGENT: 1, Scope.MONITOR: 2}
SCOPES = (Scope.SANDBOX, Scope.AGENT, Scope.MONITOR)


class Permission(enum.Enum):
    READ = "Read"
    WRITE = "Write"
    APPEND = "Append"
    NOEXEC = "NoExec"
    VISIBLE = "Visible"

    __hash__ = object.__hash__

    @classmethod
    def parse(cls, text: str) -> "Permission":
        try:
            return cls(text)
        except ValueError:
            raise ValueError(f"unknown permission {text!r}") from None


PERMISSIONS = tuple(Permission)
_PERM_ORDER = {p: i for i, p in enumerate(PERMISSIONS)}

PermSet = frozenset
EMPTY: frozenset = frozenset()


def permset(*perms: Permission | str) -> frozenset:
    return frozenset(p if isinstance(p, Permission) else Permission.parse(p) for p in perms)


def sorted_perms(perms: Iterable[Permission]) -> list[Permission]:
    """Canonical order: Read, Write, Append, NoExec, Visible."""
    return sorted(perms, key=_PERM_ORDER.__getitem__)


def format_perms(perms: Iterable[Permission], sep: str = ", ") -> str:
    return sep.join(p.value for p in sorted_perms(perms))


class EntityKind(enum.Enum):
    FILE = "file"
    DIRECTORY = "dir"
    PROCESS = "proc"
    SOCKET = "socket"
    DEVICE = "dev"

    __hash__ = object.__hash__


PATH_KINDS = frozenset({EntityKind.FILE, EntityKind.DIRECTORY, EntityKind.DEVICE})

# Attribute vocabulary.  Label keys describe a pattern rather than select
# concrete objects, so a concrete entity that does not carry them is not
# rejected on their account.
LABEL_KEYS = frozenset({"credential", "sensitive"})
GLOB_KEYS = frozenset({"path", "addr", "scope"})
INT_KEYS = frozenset({"pid"})
ATTR_KEYS: dict[EntityKind, frozenset[str]] = {
    EntityKind.FILE: frozenset({"path"}) | LABEL_KEYS,
    EntityKind.DIRECTORY: frozenset({"path"}) | LABEL_KEYS,
    EntityKind.DEVICE: frozenset({"path"}) | LABEL_KEYS,
    EntityKind.SOCKET: frozenset({"addr"}) | LABEL_KEYS,
    EntityKind.PROCESS: frozenset({"pid", "scope"}) | LABEL_KEYS,
}


# -- glob --------------------------------------------------------------------


@functools.lru_cache(maxsize=4096)
def _split_glob(pattern: str) -> tuple[str, ...]:
    return tuple(pattern.split("*"))


def glob_match(pattern: str, value: str) -> bool:
    """Anchored, case-sensitive match where ``*`` is the only wildcard.

    ``*`` matches any run of characters, path separators included, so
    ``/secure/*`` accepts ``/secure/a/b.txt``.
    """
    parts = _split_glob(pattern)
    if len(parts) == 1:
        return pattern == value
    head, *middle, tail = parts
    if len(value) < len(head) + len(tail):
        return False
    if not value.startswith(head) or not value.endswith(tail):
        return False
    pos = len(head)
    end = len(value) - len(tail)
    # Leftmost placement of each middle segment is optimal for star-only globs.
    for seg in middle:
        if not seg:
            continue
        idx = value.find(seg, pos, end)
        if idx < 0:
            return False
        pos = idx + len(seg)
    return True


def glob_prefix(pattern: str) -> str:
    """Literal text before the first ``*`` (the whole pattern if there is none)."""
    return pattern.split("*", 1)[0]


# -- attribute matchers ------------------------------------------------------


@dataclass(frozen=True, slots=True)
class GlobPattern:
    pattern: str

    def accepts(self, value: object) -> bool:
        return isinstance(value, str) and glob_match(self.pattern, value)


@dataclass(frozen=True, slots=True)
class IntExact:
    value: int

    def accepts(self, value: object) -> bool:
        return isinstance(value, int) and not isinstance(value, bool) and value == self.value


@dataclass(frozen=True, slots=True)
class IntRange:
    lo: int
    hi: int

    def accepts(self, value: object) -> bool:
        return isinstance(value, int) and not isinstance(value, bool) and self.lo <= value <= self.hi


@dataclass(frozen=True, slots=True)
class BoolExact:
    value: bool

    def accepts(self, value: object) -> bool:
        return isinstance(value, bool) and value is self.value


Matcher = Union[GlobPattern, IntExact, IntRange, BoolExact]


@dataclass(frozen=True, slots=True)
class AttributeMatcher:
    key: str
    matcher: Matcher

    def accepts(self, attrs: Mapping[str, object]) -> bool:
        if self.key not in attrs:
            return self.key in LABEL_KEYS
        return self.matcher.accepts(attrs[self.key])


def matcher_type_ok(key: str, matcher: Matcher) -> bool:
    if key in GLOB_KEYS:
        return isinstance(matcher, GlobPattern)
    if key in INT_KEYS:
        return isinstance(matcher, (IntExact, IntRange))
    if key in LABEL_KEYS:
        return isinstance(matcher, BoolExact)
    return False


# -- model -------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class EntityPattern:
    name: str
    kind: EntityKind
    attrs: tuple[AttributeMatcher, ...] = ()

    def accepts(self, attrs: Mapping[str, object]) -> bool:
        return all(m.accepts(attrs) for m in self.attrs)

    def attr(self, key: str) -> Matcher | None:
        for m in self.attrs:
            if m.key == key:
                return m.matcher
        return None

    def label(self, key: str) -> bool:
        m = self.attr(key)
        return isinstance(m, BoolExact) and m.value

    @property
    def credential(self) -> bool:
        return self.label("credential")

    @property
    def sensitive(self) -> bool:
        return self.label("sensitive")


@dataclass(frozen=True, slots=True)
class Grant:
    scope: Scope
    pattern: str
    perms: frozenset


def _empty_defaults() -> dict[Scope, frozenset]:
    return {s: EMPTY for s in SCOPES}


@dataclass(frozen=True)
class SecurityModel:
    """The agent system: patterns, grants, per-scope defaults and policies.

    Defaults always cover all three scopes; an omitted scope is the empty
    set, which denies everything.
    """

    patterns: tuple[EntityPattern, ...] = ()
    grants: tuple[Grant, ...] = ()
    defaults: Mapping[Scope, frozenset] = field(default_factory=_empty_defaults)
    policies: tuple = ()

    def __post_init__(self) -> None:
        full = _empty_defaults()
        full.update(self.defaults)
        object.__setattr__(self, "defaults", full)
        object.__setattr__(self, "_by_name", {p.name: p for p in self.patterns})
        table: dict[tuple[str, Scope], frozenset] = {}
        sources: dict[tuple[str, Scope], list[Grant]] = {}
        for g in self.grants:
            key = (g.pattern, g.scope)
            table[key] = table.get(key, EMPTY) | g.perms
            sources.setdefault(key, []).append(g)
        object.__setattr__(self, "_grant_table", table)
        object.__setattr__(self, "_grant_sources", sources)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SecurityModel):
            return NotImplemented
        return (
            self.patterns == other.patterns
            and self.grants == other.grants
            and dict(self.defaults) == dict(other.defaults)
            and self.policies == other.policies
        )

    def __hash__(self) -> int:
        return hash((self.patterns, self.grants, self.policies))

    def pattern(self, name: str) -> EntityPattern | None:
        return self._by_name.get(name)

    def granted(self, pattern: str, scope: Scope) -> frozenset:
        """Union of every grant to ``scope`` on ``pattern``."""
        return self._grant_table.get((pattern, scope), EMPTY)

    def grants_for(self, pattern: str, scope: Scope) -> list[Grant]:
        return list(self._grant_sources.get((pattern, scope), ()))

    def subject_perms(self, subject: str, scope: Scope) -> frozenset:
        """Permissions of a pattern name, or of the ``default`` element."""
        if subject == DEFAULT_SUBJECT:
            return self.defaults[scope]
        return self.granted(subject, scope)


DEFAULT_SUBJECT = "default"


def first_match(
    patterns: Iterable[EntityPattern],
    kinds: frozenset[EntityKind] | EntityKind,
    attrs: Mapping[str, object],
) -> EntityPattern | None:
    if isinstance(kinds, EntityKind):
        kinds = frozenset({kinds})
    for p in patterns:
        if p.kind in kinds and p.accepts(attrs):
            return p
    return None


def resolve(kind: EntityKind, concrete_attrs: Mapping[str, object], model: SecurityModel) -> EntityPattern | None:
    """First declared pattern of ``kind`` accepting ``concrete_attrs``, else None."""
    return first_match(model.patterns, kind, concrete_attrs)


def perms_of(
    kind: EntityKind,
    concrete_attrs: Mapping[str, object],
    scope: Scope,
    model: SecurityModel,
) -> frozenset:
    pattern = resolve(kind, concrete_attrs, model)
    if pattern is None:
        return model.defaults[scope]
    return model.granted(pattern.name, scope)
