"""Static validation of a :class:`SecurityModel` against its policies.

The domain is finite: every declared pattern plus one synthetic ``default``
element standing for any entity no pattern matches.  :func:`emit_smtlib`
encodes the same question for an external solver so the two can be
cross-checked.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

from .lang import (
    BUILTINS,
    Action,
    AttrTarget,
    Builtin,
    EventMatcher,
    Modality,
    Policy,
    Relation,
    StaticFormula,
    TemporalRule,
)
from .model import (
    ATTR_KEYS,
    DEFAULT_SUBJECT,
    LABEL_KEYS,
    PERMISSIONS,
    SCOPES,
    AttributeMatcher,
    BoolExact,
    EntityKind,
    EntityPattern,
    GlobPattern,
    IntExact,
    IntRange,
    Permission,
    Scope,
    SecurityModel,
    format_perms,
    glob_match,
    glob_prefix,
)


@dataclass(frozen=True)
class Violation:
    policy: str
    subject: str
    scopes: tuple[Scope, ...]
    detail: str
    witness: tuple[frozenset, ...]

    def __str__(self) -> str:
        scopes = "/".join(s.value for s in self.scopes)
        witness = " vs ".join("{" + format_perms(w) + "}" for w in self.witness)
        return f"[{self.policy}] {self.subject} ({scopes}): {self.detail}; witness {witness}"


@dataclass(frozen=True)
class LeakFinding:
    source: str
    sink: str
    guarded: bool
    guards: tuple[str, ...] = ()

    def __str__(self) -> str:
        state = f"guarded by {', '.join(self.guards)}" if self.guarded else "UNGUARDED"
        return f"leak {self.source} -> {self.sink}: {state}"


def subjects(model: SecurityModel) -> list[str]:
    return [p.name for p in model.patterns] + [DEFAULT_SUBJECT]


# -- scope hierarchy ---------------------------------------------------------


def check_scope_hierarchy(model: SecurityModel, policy: str = "scope_hierarchy") -> list[Violation]:
    out = []
    for subject in subjects(model):
        for lower, upper in ((Scope.SANDBOX, Scope.AGENT), (Scope.AGENT, Scope.MONITOR)):
            lo = model.subject_perms(subject, lower)
            hi = model.subject_perms(subject, upper)
            if not lo <= hi:
                extra = format_perms(lo - hi)
                out.append(
                    Violation(
                        policy,
                        subject,
                        (lower, upper),
                        f"{lower.value} holds {{{extra}}} beyond {upper.value}",
                        (lo, hi),
                    )
                )
    return out


def check_builtin(model: SecurityModel, builtin_id: str, policy: str | None = None) -> list[Violation]:
    policy = policy or builtin_id
    if builtin_id == "scope_hierarchy":
        return check_scope_hierarchy(model, policy)
    if builtin_id == "no_exec_agent":
        out = []
        for subject in subjects(model):
            perms = model.subject_perms(subject, Scope.AGENT)
            if Permission.NOEXEC not in perms:
                out.append(Violation(policy, subject, (Scope.AGENT,), "Agent may execute (NoExec missing)", (perms,)))
        return out
    if builtin_id == "credential_visibility":
        out = []
        want = frozenset({Permission.VISIBLE})
        for p in model.patterns:
            if not p.credential:
                continue
            perms = model.granted(p.name, Scope.AGENT)
            if perms != want:
                out.append(
                    Violation(policy, p.name, (Scope.AGENT,), "credential must be exactly {Visible} to Agent", (perms,))
                )
        return out
    raise ValueError(f"unknown builtin {builtin_id!r} (expected one of {', '.join(BUILTINS)})")


# -- static formulas ---------------------------------------------------------


def _value_overlap(guard: AttributeMatcher, pattern: EntityPattern) -> bool:
    """Can ``pattern`` denote some value accepted by ``guard``?"""
    own = pattern.attr(guard.key)
    g = guard.matcher
    if own is None:
        # unlabelled patterns denote only unlabelled entities
        if guard.key in LABEL_KEYS:
            return isinstance(g, BoolExact) and not g.value
        # unconstrained key: any value is possible, if the kind has the key at all
        return guard.key in ATTR_KEYS[pattern.kind]
    if isinstance(g, GlobPattern) and isinstance(own, GlobPattern):
        return glob_match(g.pattern, glob_prefix(own.pattern))
    if isinstance(g, BoolExact) and isinstance(own, BoolExact):
        return g.value == own.value
    if isinstance(g, (IntExact, IntRange)) and isinstance(own, (IntExact, IntRange)):
        glo, ghi = _bounds(g)
        olo, ohi = _bounds(own)
        return glo <= ohi and olo <= ghi
    return False


def _bounds(m: IntExact | IntRange) -> tuple[int, int]:
    if isinstance(m, IntExact):
        return m.value, m.value
    return m.lo, m.hi


def in_guard(kind: EntityKind | None, guard: tuple[AttributeMatcher, ...], model: SecurityModel, subject: str) -> bool:
    if subject == DEFAULT_SUBJECT:
        # any unmatched entity: every non-label value is possible, labels are false
        return all(m.key not in LABEL_KEYS or (isinstance(m.matcher, BoolExact) and not m.matcher.value) for m in guard)
    pattern = model.pattern(subject)
    if kind is not None and pattern.kind is not kind:
        return False
    return all(_value_overlap(m, pattern) for m in guard)


def _check_guard_keys(f: StaticFormula) -> None:
    allowed = ATTR_KEYS[f.guard_kind] if f.guard_kind else frozenset().union(*ATTR_KEYS.values())
    for m in f.guard:
        if m.key not in allowed:
            raise ValueError(f"guard references unknown attribute key {m.key!r}")


def check_static(model: SecurityModel, f: StaticFormula, policy: str = "static") -> list[Violation]:
    _check_guard_keys(f)
    out = []
    for subject in subjects(model):
        if not in_guard(f.guard_kind, f.guard, model, subject):
            continue
        actual = model.subject_perms(subject, f.scope)
        if not f.relation.holds(actual, f.perms):
            out.append(
                Violation(
                    policy,
                    subject,
                    (f.scope,),
                    f"perms({subject}, {f.scope.value}) {f.relation.value} {{{format_perms(f.perms)}}} fails",
                    (actual, f.perms),
                )
            )
    return out


def check_policy(model: SecurityModel, policy: Policy) -> list[Violation]:
    body = policy.body
    if isinstance(body, Builtin):
        return check_builtin(model, body.builtin_id, policy.name)
    if isinstance(body, StaticFormula):
        return check_static(model, body, policy.name)
    return []  # temporal rules are runtime properties


def validate(model: SecurityModel) -> list[Violation]:
    """Every violation of every policy declared in the model."""
    out: list[Violation] = []
    for policy in model.policies:
        out.extend(check_policy(model, policy))
    return out


# -- leak analysis -----------------------------------------------------------


def _targets(event: EventMatcher, model: SecurityModel, pattern: EntityPattern) -> bool:
    t = event.target
    if isinstance(t, AttrTarget):
        return t.kind is pattern.kind and all(_value_overlap(m, pattern) for m in t.attrs)
    return t == pattern.name


def analyze_leaks(model: SecurityModel) -> list[LeakFinding]:
    sources = [
        p
        for p in model.patterns
        if p.kind in (EntityKind.FILE, EntityKind.DIRECTORY)
        and (p.sensitive or p.credential)
        and Permission.READ in model.granted(p.name, Scope.AGENT)
    ]
    sinks = [
        p
        for p in model.patterns
        if p.kind is EntityKind.SOCKET and Permission.WRITE in model.granted(p.name, Scope.AGENT)
    ]
    rules = [
        (pol.name, pol.body)
        for pol in model.policies
        if isinstance(pol.body, TemporalRule) and pol.body.modality is Modality.ALWAYS_FORBID
    ]
    out = []
    for src in sources:
        for sink in sinks:
            guards = tuple(
                name
                for name, rule in rules
                if rule.trigger.scope is Scope.AGENT
                and rule.trigger.action is Action.READS
                and rule.body.scope is Scope.AGENT
                and rule.body.action is Action.WRITES
                and _targets(rule.trigger, model, src)
                and _targets(rule.body, model, sink)
            )
            out.append(LeakFinding(src.name, sink.name, bool(guards), guards))
    return out


# -- SMT-LIB2 ----------------------------------------------------------------


def _sym(prefix: str, name: str) -> str:
    safe = "".join(c if c.isalnum() or c == "_" else f"_{ord(c):x}_" for c in name)
    return f"{prefix}_{safe}"


def _ent(subject: str) -> str:
    return "e__default" if subject == DEFAULT_SUBJECT else _sym("e", subject)


def _scope(s: Scope) -> str:
    return f"s_{s.value}"


def _perm(p: Permission) -> str:
    return f"p_{p.value}"


def _has(subject: str, scope: Scope, p: Permission) -> str:
    return f"(has_perm {_ent(subject)} {_scope(scope)} {_perm(p)})"


def _conj(terms: list[str]) -> str:
    if not terms:
        return "true"
    if len(terms) == 1:
        return terms[0]
    return "(and " + " ".join(terms) + ")"


def _perms_relation(subject: str, scope: Scope, rel: Relation, expected: frozenset) -> str:
    terms = []
    for p in PERMISSIONS:
        atom = _has(subject, scope, p)
        inside = p in expected
        if rel is Relation.EQUALS:
            terms.append(atom if inside else f"(not {atom})")
        elif rel is Relation.SUBSET_OF and not inside:
            terms.append(f"(not {atom})")
        elif rel is Relation.CONTAINS and inside:
            terms.append(atom)
        elif rel is Relation.EXCLUDES and inside:
            terms.append(f"(not {atom})")
    return _conj(terms)


def _policy_formula(model: SecurityModel, policy: Policy) -> Iterator[str]:
    body = policy.body
    if isinstance(body, Builtin):
        if body.builtin_id == "scope_hierarchy":
            for subject in subjects(model):
                for p in PERMISSIONS:
                    for lo, hi in ((Scope.SANDBOX, Scope.AGENT), (Scope.AGENT, Scope.MONITOR)):
                        yield f"(=> {_has(subject, lo, p)} {_has(subject, hi, p)})"
        elif body.builtin_id == "no_exec_agent":
            for subject in subjects(model):
                yield _has(subject, Scope.AGENT, Permission.NOEXEC)
        elif body.builtin_id == "credential_visibility":
            for pat in model.patterns:
                yield f"(=> (credential {_ent(pat.name)}) {_perms_relation(pat.name, Scope.AGENT, Relation.EQUALS, frozenset({Permission.VISIBLE}))})"
        else:
            raise ValueError(f"unknown builtin {body.builtin_id!r}")
    elif isinstance(body, StaticFormula):
        _check_guard_keys(body)
        for subject in subjects(model):
            if in_guard(body.guard_kind, body.guard, model, subject):
                yield _perms_relation(subject, body.scope, body.relation, body.perms)


def emit_smtlib(model: SecurityModel) -> str:
    """SMT-LIB2 script that is unsat iff every declared policy holds.

    Grants and defaults become a closed-world ``has_perm`` relation; the
    conjunction of the policies is asserted negated.
    """
    subs = subjects(model)
    lines = [
        "; policy validation query: sat means some policy is violated",
        "(set-logic QF_UFDT)",
        "(declare-datatypes ((Entity 0)) ((" + " ".join(f"({_ent(s)})" for s in subs) + ")))",
        "(declare-datatypes ((Scope 0)) ((" + " ".join(f"({_scope(s)})" for s in SCOPES) + ")))",
        "(declare-datatypes ((Perm 0)) ((" + " ".join(f"({_perm(p)})" for p in PERMISSIONS) + ")))",
        "(declare-fun has_perm (Entity Scope Perm) Bool)",
        "(declare-fun credential (Entity) Bool)",
    ]
    for subject in subs:
        for scope in SCOPES:
            held = model.subject_perms(subject, scope)
            for p in PERMISSIONS:
                atom = _has(subject, scope, p)
                lines.append(f"(assert {atom})" if p in held else f"(assert (not {atom}))")
    for subject in subs:
        cred = subject != DEFAULT_SUBJECT and model.pattern(subject).credential
        atom = f"(credential {_ent(subject)})"
        lines.append(f"(assert {atom})" if cred else f"(assert (not {atom}))")
    names = []
    for i, policy in enumerate(model.policies):
        sym = f"policy_{i}"
        names.append(sym)
        lines.append(f"; policy {policy.name}")
        lines.append(f"(define-fun {sym} () Bool {_conj(list(_policy_formula(model, policy)))})")
    lines.append(f"(assert (not {_conj(names)}))")
    lines.append("(check-sat)")
    return "\n".join(lines) + "\n"
