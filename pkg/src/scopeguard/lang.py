"""Policy DSL: parsing, well-formedness checks and canonical rendering.

Grammar sketch::

    entity file SecretKeys { path: "/secure/*", credential: true }
    grant Agent on SecretKeys { Visible }
    default Sandbox { Read }
    policy hier builtin scope_hierarchy
    policy iso static { forall e : path: "/secure/*" => perms(e, Agent) == {} }
    policy exfil temporal {
        when Agent Reads SecretKeys always forbid Agent Writes Outbound
    }

``#`` starts a comment.  The parser keeps going after an error and raises a
single :class:`PolicySyntaxError` listing every problem found.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Iterator, Union

from .model import (
    ATTR_KEYS,
    EMPTY,
    SCOPES,
    AttributeMatcher,
    BoolExact,
    EntityKind,
    EntityPattern,
    GlobPattern,
    Grant,
    IntExact,
    IntRange,
    Matcher,
    Permission,
    Scope,
    SecurityModel,
    format_perms,
    matcher_type_ok,
)

BUILTINS = ("scope_hierarchy", "no_exec_agent", "credential_visibility")


class Relation(enum.Enum):
    EQUALS = "=="
    SUBSET_OF = "<="
    CONTAINS = "contains"
    EXCLUDES = "excludes"

    def holds(self, actual: frozenset, expected: frozenset) -> bool:
        if self is Relation.EQUALS:
            return actual == expected
        if self is Relation.SUBSET_OF:
            return actual <= expected
        if self is Relation.CONTAINS:
            return actual >= expected
        return not (actual & expected)


class Modality(enum.Enum):
    ALWAYS_FORBID = "always forbid"
    EVENTUALLY_REQUIRE = "eventually require"


class Action(enum.Enum):
    READS = "Reads"
    WRITES = "Writes"
    APPENDS = "Appends"
    EXECS = "Execs"
    STATS = "Stats"

    @property
    def permission(self) -> Permission:
        return _ACTION_PERM[self]


_ACTION_PERM = {
    Action.READS: Permission.READ,
    Action.WRITES: Permission.WRITE,
    Action.APPENDS: Permission.APPEND,
    Action.EXECS: Permission.NOEXEC,
    Action.STATS: Permission.VISIBLE,
}


@dataclass(frozen=True)
class Builtin:
    builtin_id: str


@dataclass(frozen=True)
class StaticFormula:
    var: str
    guard_kind: EntityKind | None
    guard: tuple[AttributeMatcher, ...]
    scope: Scope
    relation: Relation
    perms: frozenset


@dataclass(frozen=True)
class AttrTarget:
    kind: EntityKind
    attrs: tuple[AttributeMatcher, ...]


Target = Union[str, AttrTarget]


@dataclass(frozen=True)
class EventMatcher:
    scope: Scope
    action: Action
    target: Target


@dataclass(frozen=True)
class TemporalRule:
    trigger: EventMatcher
    modality: Modality
    body: EventMatcher


@dataclass(frozen=True)
class Policy:
    name: str
    body: Builtin | StaticFormula | TemporalRule


# -- diagnostics -------------------------------------------------------------


@dataclass(frozen=True)
class Diagnostic:
    line: int
    column: int
    message: str

    def __str__(self) -> str:
        return f"{self.line}:{self.column}: {self.message}"


class PolicySyntaxError(ValueError):
    def __init__(self, diagnostics: list[Diagnostic]):
        self.diagnostics = diagnostics
        super().__init__("\n".join(str(d) for d in diagnostics))


# -- lexer -------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class Token:
    kind: str  # IDENT, STRING, INT, RANGE, PUNCT, EOF
    text: str
    value: object
    line: int
    column: int


_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<nl>\n)
  | (?P<comment>\#[^\n]*)
  | (?P<string>"(?:[^"\\\n]|\\.)*")
  | (?P<range>\d+\.\.\d+)
  | (?P<int>\d+)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_\-]*)
  | (?P<punct>=>|==|<=|[{}(),:])
    """,
    re.VERBOSE,
)

_ESCAPES = {'"': '"', "\\": "\\", "n": "\n", "t": "\t"}


def _unescape(body: str) -> str:
    return re.sub(r"\\(.)", lambda m: _ESCAPES.get(m.group(1), m.group(1)), body)


def _escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n").replace("\t", "\\t")


def tokenize(text: str) -> tuple[list[Token], list[Diagnostic]]:
    tokens: list[Token] = []
    errors: list[Diagnostic] = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        col = pos - line_start + 1
        if m is None:
            errors.append(Diagnostic(line, col, f"unexpected character {text[pos]!r}"))
            pos += 1
            continue
        kind = m.lastgroup
        raw = m.group()
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind == "string":
            tokens.append(Token("STRING", raw, _unescape(raw[1:-1]), line, col))
        elif kind == "range":
            lo, hi = raw.split("..")
            tokens.append(Token("RANGE", raw, (int(lo), int(hi)), line, col))
        elif kind == "int":
            tokens.append(Token("INT", raw, int(raw), line, col))
        elif kind == "ident":
            tokens.append(Token("IDENT", raw, raw, line, col))
        elif kind == "punct":
            tokens.append(Token("PUNCT", raw, raw, line, col))
        pos = m.end()
    tokens.append(Token("EOF", "", None, line, pos - line_start + 1))
    return tokens, errors


# -- parser ------------------------------------------------------------------

_KINDS = {k.value: k for k in EntityKind}
_SCOPES = {s.value: s for s in Scope}
_PERMS = {p.value: p for p in Permission}
_ACTIONS = {a.value: a for a in Action}
_RELATIONS = {r.value: r for r in Relation}
_ITEM_KEYWORDS = {"entity", "grant", "default", "policy"}


class _Abort(Exception):
    pass


@dataclass
class _Pending:
    """A name reference checked once every pattern is known."""

    name: str
    token: Token


@dataclass
class _Parser:
    tokens: list[Token]
    errors: list[Diagnostic] = field(default_factory=list)
    pos: int = 0

    # token helpers

    @property
    def tok(self) -> Token:
        return self.tokens[self.pos]

    def advance(self) -> Token:
        t = self.tokens[self.pos]
        if t.kind != "EOF":
            self.pos += 1
        return t

    def fail(self, expected: str, tok: Token | None = None) -> None:
        tok = tok or self.tok
        found = "end of input" if tok.kind == "EOF" else repr(tok.text)
        self.errors.append(Diagnostic(tok.line, tok.column, f"expected {expected}, found {found}"))
        raise _Abort

    def at(self, text: str) -> bool:
        return self.tok.kind in ("IDENT", "PUNCT") and self.tok.text == text

    def expect(self, text: str) -> Token:
        if not self.at(text):
            self.fail(repr(text))
        return self.advance()

    def ident(self, what: str = "identifier") -> Token:
        if self.tok.kind != "IDENT":
            self.fail(what)
        return self.advance()

    def choice(self, table: dict, what: str):
        tok = self.tok
        if tok.kind != "IDENT" or tok.text not in table:
            self.fail(f"{what} ({' | '.join(table)})")
        self.advance()
        return table[tok.text]

    def sync(self) -> None:
        """Skip to the next top-level item keyword."""
        depth = 0
        while self.tok.kind != "EOF":
            if self.tok.kind == "PUNCT" and self.tok.text == "{":
                depth += 1
            elif self.tok.kind == "PUNCT" and self.tok.text == "}":
                depth = max(0, depth - 1)
                if depth == 0:
                    self.advance()
                    return
            elif depth == 0 and self.tok.kind == "IDENT" and self.tok.text in _ITEM_KEYWORDS:
                return
            self.advance()

    # grammar

    def attr(self) -> tuple[AttributeMatcher, Token]:
        key = self.ident("attribute name")
        self.expect(":")
        tok = self.tok
        matcher: Matcher
        if tok.kind == "STRING":
            matcher = GlobPattern(tok.value)
        elif tok.kind == "INT":
            matcher = IntExact(tok.value)
        elif tok.kind == "RANGE":
            lo, hi = tok.value
            if lo > hi:
                self.errors.append(Diagnostic(tok.line, tok.column, f"empty range {tok.text}"))
            matcher = IntRange(lo, hi)
        elif tok.kind == "IDENT" and tok.text in ("true", "false"):
            matcher = BoolExact(tok.text == "true")
        else:
            self.fail("attribute value (string, int, range, true, false)")
        self.advance()
        if not matcher_type_ok(key.text, matcher) and key.text in _all_attr_keys():
            self.errors.append(Diagnostic(tok.line, tok.column, f"bad value type for attribute {key.text}"))
        return AttributeMatcher(key.text, matcher), key

    def attr_block(self, kind: EntityKind, allow_empty: bool = False) -> tuple[AttributeMatcher, ...]:
        self.expect("{")
        attrs = []
        seen: set[str] = set()
        if allow_empty and self.at("}"):
            self.advance()
            return ()
        while True:
            matcher, key = self.attr()
            self.check_key(kind, key)
            if key.text in seen:
                self.errors.append(Diagnostic(key.line, key.column, f"duplicate attribute {key.text}"))
            seen.add(key.text)
            attrs.append(matcher)
            if self.at(","):
                self.advance()
                continue
            break
        self.expect("}")
        return tuple(attrs)

    def check_key(self, kind: EntityKind | None, key: Token) -> None:
        allowed = _all_attr_keys() if kind is None else ATTR_KEYS[kind]
        if key.text not in allowed:
            where = "" if kind is None else f" for {kind.value}"
            self.errors.append(Diagnostic(key.line, key.column, f"unknown attribute key {key.text}{where}"))

    def perm_list(self, allow_empty: bool) -> frozenset:
        self.expect("{")
        perms: set[Permission] = set()
        if self.at("}"):
            if not allow_empty:
                self.fail("permission")
        else:
            while True:
                perms.add(self.choice(_PERMS, "permission"))
                if self.at(","):
                    self.advance()
                    continue
                break
        self.expect("}")
        return frozenset(perms)

    def event(self, refs: list[_Pending]) -> EventMatcher:
        scope = self.choice(_SCOPES, "scope")
        action = self.choice(_ACTIONS, "action")
        tok = self.tok
        if tok.kind == "IDENT" and tok.text in _KINDS and self.tokens[self.pos + 1].text == "{":
            self.advance()
            kind = _KINDS[tok.text]
            target: Target = AttrTarget(kind, self.attr_block(kind, allow_empty=True))
        else:
            name = self.ident("pattern name or kind")
            refs.append(_Pending(name.text, name))
            target = name.text
        return EventMatcher(scope, action, target)

    def static(self) -> StaticFormula:
        self.expect("{")
        self.expect("forall")
        var = self.ident("variable")
        self.expect(":")
        guard_kind = None
        guard: list[AttributeMatcher] = []
        if self.at("any"):
            self.advance()
        else:
            while True:
                tok = self.tok
                if tok.kind == "IDENT" and tok.text in _KINDS and self.tokens[self.pos + 1].text != ":":
                    self.advance()
                    if guard_kind is not None:
                        self.errors.append(Diagnostic(tok.line, tok.column, "guard names more than one kind"))
                    guard_kind = _KINDS[tok.text]
                else:
                    matcher, key = self.attr()
                    self.check_key(guard_kind, key)
                    guard.append(matcher)
                if self.at(","):
                    self.advance()
                    continue
                break
        self.expect("=>")
        self.expect("perms")
        self.expect("(")
        ref = self.ident("variable")
        if ref.text != var.text:
            self.errors.append(Diagnostic(ref.line, ref.column, f"unbound variable {ref.text}"))
        self.expect(",")
        scope = self.choice(_SCOPES, "scope")
        self.expect(")")
        tok = self.tok
        if tok.text not in _RELATIONS or tok.kind == "STRING":
            self.fail("relation (== | <= | contains | excludes)")
        self.advance()
        relation = _RELATIONS[tok.text]
        perms = self.perm_list(allow_empty=True)
        self.expect("}")
        return StaticFormula(var.text, guard_kind, tuple(guard), scope, relation, perms)

    def temporal(self, refs: list[_Pending]) -> TemporalRule:
        self.expect("{")
        self.expect("when")
        trigger = self.event(refs)
        if self.at("always"):
            self.advance()
            self.expect("forbid")
            modality = Modality.ALWAYS_FORBID
        elif self.at("eventually"):
            self.advance()
            self.expect("require")
            modality = Modality.EVENTUALLY_REQUIRE
        else:
            self.fail("'always forbid' or 'eventually require'")
        body = self.event(refs)
        self.expect("}")
        return TemporalRule(trigger, modality, body)


def _all_attr_keys() -> frozenset[str]:
    return frozenset().union(*ATTR_KEYS.values())


def parse(text: str) -> SecurityModel:
    """Parse policy text into a :class:`SecurityModel`.

    Raises :class:`PolicySyntaxError` carrying every diagnostic collected.
    """
    tokens, errors = tokenize(text)
    p = _Parser(tokens, errors)
    patterns: list[EntityPattern] = []
    grants: list[Grant] = []
    defaults: dict[Scope, frozenset] = {s: EMPTY for s in SCOPES}
    default_seen: set[Scope] = set()
    policies: list[Policy] = []
    names: dict[str, Token] = {}
    policy_names: set[str] = set()
    refs: list[_Pending] = []

    while p.tok.kind != "EOF":
        start = p.tok
        try:
            if p.at("entity"):
                p.advance()
                kind = p.choice(_KINDS, "entity kind")
                name = p.ident("pattern name")
                attrs = p.attr_block(kind)
                if name.text == "default":
                    p.errors.append(Diagnostic(name.line, name.column, "pattern name 'default' is reserved"))
                elif name.text in names:
                    p.errors.append(Diagnostic(name.line, name.column, f"duplicate pattern {name.text}"))
                else:
                    names[name.text] = name
                patterns.append(EntityPattern(name.text, kind, attrs))
            elif p.at("grant"):
                p.advance()
                scope = p.choice(_SCOPES, "scope")
                p.expect("on")
                name = p.ident("pattern name")
                refs.append(_Pending(name.text, name))
                grants.append(Grant(scope, name.text, p.perm_list(allow_empty=False)))
            elif p.at("default"):
                p.advance()
                scope_tok = p.tok
                scope = p.choice(_SCOPES, "scope")
                perms = p.perm_list(allow_empty=True)
                if scope in default_seen:
                    p.errors.append(
                        Diagnostic(scope_tok.line, scope_tok.column, f"duplicate default for {scope.value}")
                    )
                default_seen.add(scope)
                defaults[scope] = perms
            elif p.at("policy"):
                p.advance()
                name = p.ident("policy name")
                if name.text in policy_names:
                    p.errors.append(Diagnostic(name.line, name.column, f"duplicate policy {name.text}"))
                policy_names.add(name.text)
                if p.at("builtin"):
                    p.advance()
                    bid = p.ident("builtin id")
                    if bid.text not in BUILTINS:
                        p.errors.append(
                            Diagnostic(
                                bid.line,
                                bid.column,
                                f"unknown builtin {bid.text} (expected {' | '.join(BUILTINS)})",
                            )
                        )
                    body: Builtin | StaticFormula | TemporalRule = Builtin(bid.text)
                elif p.at("static"):
                    p.advance()
                    body = p.static()
                elif p.at("temporal"):
                    p.advance()
                    body = p.temporal(refs)
                else:
                    p.fail("'builtin', 'static' or 'temporal'")
                policies.append(Policy(name.text, body))
            else:
                p.fail("'entity', 'grant', 'default' or 'policy'")
        except _Abort:
            if p.tok is start:
                p.advance()
            p.sync()

    for ref in refs:
        if ref.name not in names:
            p.errors.append(Diagnostic(ref.token.line, ref.token.column, f"unknown pattern {ref.name}"))

    if p.errors:
        p.errors.sort(key=lambda d: (d.line, d.column))
        raise PolicySyntaxError(p.errors)
    return SecurityModel(tuple(patterns), tuple(grants), defaults, tuple(policies))


# -- rendering ---------------------------------------------------------------


def render_matcher(m: AttributeMatcher) -> str:
    v = m.matcher
    if isinstance(v, GlobPattern):
        value = f'"{_escape(v.pattern)}"'
    elif isinstance(v, IntExact):
        value = str(v.value)
    elif isinstance(v, IntRange):
        value = f"{v.lo}..{v.hi}"
    else:
        value = "true" if v.value else "false"
    return f"{m.key}: {value}"


def render_attrs(attrs: tuple[AttributeMatcher, ...]) -> str:
    if not attrs:
        return "{}"
    return "{ " + ", ".join(render_matcher(m) for m in attrs) + " }"


def render_pattern(p: EntityPattern) -> str:
    return f"entity {p.kind.value} {p.name} {render_attrs(p.attrs)}"


def _render_permset(perms: frozenset) -> str:
    return "{ " + format_perms(perms) + " }" if perms else "{}"


def _render_event(e: EventMatcher) -> str:
    if isinstance(e.target, AttrTarget):
        target = f"{e.target.kind.value} {render_attrs(e.target.attrs)}"
    else:
        target = e.target
    return f"{e.scope.value} {e.action.value} {target}"


def render_policy(policy: Policy) -> str:
    body = policy.body
    if isinstance(body, Builtin):
        return f"policy {policy.name} builtin {body.builtin_id}"
    if isinstance(body, StaticFormula):
        guard = [body.guard_kind.value] if body.guard_kind else []
        guard += [render_matcher(m) for m in body.guard]
        return (
            f"policy {policy.name} static {{ forall {body.var} : {', '.join(guard) or 'any'}"
            f" => perms({body.var}, {body.scope.value}) {body.relation.value} {_render_permset(body.perms)} }}"
        )
    return (
        f"policy {policy.name} temporal {{ when {_render_event(body.trigger)}"
        f" {body.modality.value} {_render_event(body.body)} }}"
    )


def iter_render(model: SecurityModel) -> Iterator[str]:
    for p in model.patterns:
        yield render_pattern(p)
    for scope in SCOPES:
        perms = model.defaults[scope]
        if perms:
            yield f"default {scope.value} {_render_permset(perms)}"
    for g in model.grants:
        yield f"grant {g.scope.value} on {g.pattern} {_render_permset(g.perms)}"
    for pol in model.policies:
        yield render_policy(pol)


def render(model: SecurityModel) -> str:
    """Canonical text for ``model``; ``parse(render(m)) == m``."""
    return "".join(line + "\n" for line in iter_render(model))
