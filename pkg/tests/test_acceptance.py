"""Acceptance criteria, one test each.

Every test prints a single ``PASS``/``FAIL`` line with what it measured.
Run directly (``python3 tests/test_acceptance.py``) or through pytest; the
lines bypass output capture so they show up in a plain ``pytest -v`` log.
"""

from __future__ import annotations

import copy
import os
import random
import subprocess
import sys
import time
from pathlib import Path

import cells
import gen
import pytest
from oracles import EventOracle, hierarchy_oracle, temporal_oracle

from scopeguard.compiler import (
    SYSCALL_TABLE,
    compile,
    export_table,
    import_table,
    syscalls_for,
)
from scopeguard.lang import AttrTarget, Policy, parse, render
from scopeguard.model import SCOPES, Scope, SecurityModel
from scopeguard.monitor import (
    Monitor,
    ScopeDirective,
    TableSlot,
    TraceEvent,
    parse_trace,
    render_trace,
    replay,
)
from scopeguard.validator import (
    check_builtin,
    check_scope_hierarchy,
    emit_smtlib,
    validate,
)

HERE = Path(__file__).parent
CORPUS = sorted((HERE / "corpus").glob("*.claw"))
TRACES = HERE / "traces"

pytestmark = pytest.mark.acceptance


@pytest.fixture
def verdict(capsys):
    """Print one criterion line outside pytest's capture."""

    def emit(number: int, title: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} [{number}] {title}: {detail}")

    return emit


def _clock():
    start = time.perf_counter()
    return lambda: time.perf_counter() - start


# 1 --------------------------------------------------------------------------


def test_exfiltration_scenario(verdict):
    elapsed = _clock()
    compiled = compile(parse((HERE / "corpus" / "02_exfiltration_guarded.claw").read_text()))
    forward = replay(compiled, parse_trace((TRACES / "exfil.trace").read_text()))
    swapped = replay(compiled, parse_trace((TRACES / "exfil_swapped.trace").read_text()))
    secs = elapsed()
    events = sum(isinstance(i, TraceEvent) for i in parse_trace((TRACES / "exfil.trace").read_text()))
    counts = (len(forward.violations), len(forward.leaks), len(swapped.violations), len(swapped.leaks))
    ok = events == 6 and counts == (1, 1, 0, 0) and secs < 1.0
    verdict(
        1,
        "exfiltration scenario",
        ok,
        f"{events} events; forward violations={counts[0]} leaks={counts[1]}; "
        f"swapped violations={counts[2]} leaks={counts[3]}; {secs:.3f}s (< 1s)",
    )
    assert ok


# 2 --------------------------------------------------------------------------


def test_scope_hierarchy_fuzzing(verdict):
    rng = random.Random(20261016)
    elapsed = _clock()
    agree = flagged = 0
    for _ in range(1000):
        m = gen.random_model(rng, policies="none")
        got = {(v.subject, v.scopes[0].value, v.scopes[1].value) for v in check_scope_hierarchy(m)}
        want = hierarchy_oracle(m)
        agree += got == want
        flagged += bool(want)
    secs = elapsed()
    ok = agree == 1000 and secs < 10.0
    verdict(
        2,
        "scope-hierarchy fuzzing",
        ok,
        f"{agree}/1000 models agree with subset oracle ({flagged} with violations); {secs:.2f}s (< 10s)",
    )
    assert ok


# 3 --------------------------------------------------------------------------


def test_compile_interpret_equivalence(verdict):
    rng = random.Random(3)
    elapsed = _clock()
    total = agree = 0
    outcomes = {"ALLOW": 0, "DENY": 0, "ERROR": 0}
    syscalls, kinds_hit = set(), set()
    first_miss = None
    while total < 10_000:
        m = gen.random_model(rng, policies="none", density=rng.choice([0.2, 0.4, 0.6]))
        mon = Monitor(compile(m))
        oracle = EventOracle(m)
        for _ in range(50):
            scope = rng.choice(SCOPES)
            scopes = {100: scope, 200: rng.choice(SCOPES)}
            fds = gen.rand_fd_state(rng)
            ev = gen.rand_event(rng, total + 1, 100, list(fds), [100, 200, 300])
            gen.seed_monitor(mon, 100, scope, fds, scopes)
            v = mon.step(ev)
            want = oracle.decide(scope, 100, fds, scopes, ev)
            total += 1
            if v.outcome == want:
                agree += 1
            elif first_miss is None:
                first_miss = (ev.text(), scope.value, v.outcome, want)
            outcomes[v.outcome] += 1
            syscalls.add(ev.syscall)
            for c in v.checks:
                kinds_hit.add(c.subject != "default" and m.pattern(c.subject).kind.value)
    secs = elapsed()
    ok = agree == total and secs < 30.0
    detail = (
        f"{agree}/{total} events agree; allow={outcomes['ALLOW']} deny={outcomes['DENY']} "
        f"error={outcomes['ERROR']}; {len(syscalls)} syscalls, kinds {sorted(k for k in kinds_hit if k)}; "
        f"{secs:.2f}s (< 30s)"
    )
    if first_miss:
        detail += f"; first mismatch {first_miss}"
    verdict(3, "compile/interpret equivalence", ok, detail)
    assert ok


# 4 --------------------------------------------------------------------------


def test_mapping_coverage(verdict):
    every = {(k, p, s) for (k, p), names in SYSCALL_TABLE.items() for s in names}
    missing = every - cells.UNREACHABLE - cells.covered_cells()
    failures = []
    for probe in cells.PROBES + cells.CREATE_ONLY:
        got = cells.run(probe)
        if got != (probe.expected(True), probe.expected(False)):
            failures.append((probe.kind.value, probe.perm.value, probe.key, got))
    named = {
        "sendfile dual check": any(p.key == "sendfile(in)" and p.support for p in cells.PROBES),
        "directory create-only": len(cells.CREATE_ONLY) == 2,
        "process no-fork": any(p.key == "fork" for p in cells.PROBES),
        "visible->stat": any(p.key == "stat" for p in cells.PROBES),
    }
    cell_count = len({(k, p) for k, p, _ in every})
    ok = not missing and not failures and all(named.values())
    verdict(
        4,
        "mapping coverage",
        ok,
        f"{cell_count} non-empty cells, {len(every)} (cell, syscall) pairs, "
        f"{len(cells.PROBES) + len(cells.CREATE_ONLY)} probes, {len(failures)} failing, "
        f"{len(missing)} uncovered; {len(cells.UNREACHABLE)} unreachable pair (socket stat by path)",
    )
    assert ok, (missing, failures, named)


# 5 --------------------------------------------------------------------------


def test_builtin_detection(verdict):
    exec_model = parse((HERE / "corpus" / "05_agent_exec_violation.claw").read_text())
    exec_found = validate(exec_model)
    cred_text = (
        (HERE / "corpus" / "01_credential_visible.claw")
        .read_text()
        .replace("grant Agent on SecretKeys { Visible }", "grant Agent on SecretKeys { Read, Visible }")
    )
    cred_found = validate(parse(cred_text))
    ok = (
        [(v.policy, v.subject) for v in exec_found] == [("sandboxed", "Scripts")]
        and [(v.policy, v.subject) for v in cred_found] == [("creds", "SecretKeys")]
        and check_builtin(exec_model, "no_exec_agent")[0].scopes == (Scope.AGENT,)
    )
    verdict(
        5,
        "builtin policy detection",
        ok,
        f"no_exec_agent -> {[str(v) for v in exec_found]}; credential_visibility -> {[str(v) for v in cred_found]}",
    )
    assert ok


# 6 --------------------------------------------------------------------------


def _key_sets(model: SecurityModel, policies) -> dict:
    def keys(matcher):
        t = matcher.target
        kind = t.kind if isinstance(t, AttrTarget) else model.pattern(t).kind
        return syscalls_for(kind, matcher.action.permission)

    return {p.name: (keys(p.body.trigger), keys(p.body.body)) for p in policies}


def test_temporal_oracle_equivalence(verdict):
    rng = random.Random(6)
    elapsed = _clock()
    agree = 0
    found = {"violations": 0, "warnings": 0, "unfulfilled": 0}
    longest = 0
    for _ in range(500):
        base = gen.random_model(rng, policies="none", density=rng.choice([0.4, 0.6, 0.8]))
        policies = tuple(Policy(f"t{i}", gen.hot_temporal(rng, base.patterns)) for i in range(rng.randint(1, 3)))
        m = SecurityModel(base.patterns, base.grants, base.defaults, policies)
        trace = gen.random_trace(rng, rng.randint(1, 200))
        longest = max(longest, sum(isinstance(i, TraceEvent) for i in trace))
        report = replay(compile(m), trace)
        got = (
            {(t.rule, t.trigger_seq, t.seq) for t in report.violations},
            {(w.rule, w.trigger_seq, w.seq) for w in report.warnings},
            {(o.rule, o.trigger_seq) for o in report.unfulfilled},
        )
        no_dupes = (len(got[0]), len(got[1]), len(got[2])) == (
            len(report.violations),
            len(report.warnings),
            len(report.unfulfilled),
        )
        want = temporal_oracle(m, policies, _key_sets(m, policies), report.verdicts)
        agree += got == want and no_dupes
        found["violations"] += len(want[0])
        found["warnings"] += len(want[1])
        found["unfulfilled"] += len(want[2])
    secs = elapsed()
    ok = agree == 500 and longest <= 200 and secs < 60.0
    verdict(
        6,
        "temporal oracle equivalence",
        ok,
        f"{agree}/500 traces agree (max {longest} events); oracle found {found['violations']} violations, "
        f"{found['warnings']} attempts, {found['unfulfilled']} unfulfilled; {secs:.2f}s (< 60s)",
    )
    assert ok


# 7 --------------------------------------------------------------------------

_STABILITY_SCRIPT = """
import hashlib, sys
from pathlib import Path
from scopeguard.compiler import compile, export_table
from scopeguard.lang import parse, render
from scopeguard.monitor import parse_trace, replay
from scopeguard.validator import emit_smtlib, validate
h = hashlib.sha256()
here = Path(sys.argv[1])
for path in sorted((here / "corpus").glob("*.claw")):
    m = parse(path.read_text())
    h.update(render(m).encode())
    h.update(export_table(compile(m)).encode())
    h.update(emit_smtlib(m).encode())
    h.update("\\n".join(map(str, validate(m))).encode())
    for trace in sorted((here / "traces").glob("*.trace")):
        h.update(replay(compile(m), parse_trace(trace.read_text())).render_tagged().encode())
print(h.hexdigest())
"""


def _digest(seed: str) -> str:
    env = {**os.environ, "PYTHONHASHSEED": seed}
    env["PYTHONPATH"] = os.pathsep.join(filter(None, [str(HERE.parent / "src"), env.get("PYTHONPATH")]))
    proc = subprocess.run(
        [sys.executable, "-c", _STABILITY_SCRIPT, str(HERE)], capture_output=True, text=True, env=env, check=True
    )
    return proc.stdout.strip()


def test_round_trips(verdict):
    parse_ok = export_ok = 0
    for path in CORPUS:
        m = parse(path.read_text())
        parse_ok += parse(render(m)) == m and render(parse(render(m))) == render(m)
        compiled = compile(m)
        text = export_table(compiled)
        back = import_table(text)
        export_ok += back.tables == compiled.tables and back.specs == compiled.specs and export_table(back) == text
    digests = {_digest("1"), _digest("12345")}
    ok = len(CORPUS) >= 20 and parse_ok == export_ok == len(CORPUS) and len(digests) == 1
    verdict(
        7,
        "round trips",
        ok,
        f"parse/render {parse_ok}/{len(CORPUS)}, import/export {export_ok}/{len(CORPUS)}; "
        f"two runs with different hash seeds produced {len(digests)} distinct output digest(s)",
    )
    assert ok


# 8 --------------------------------------------------------------------------

_READ_KEYS = frozenset({"open(O_RDONLY)", "read", "pread", "readv", "mmap(PROT_READ)", "sendfile(in)", "getdents"})


def test_hot_update(verdict):
    model = parse((HERE / "corpus" / "25_workstation.claw").read_text())
    compiled = compile(model)
    v1 = compiled.tables[Scope.AGENT]
    v2 = v1.successor({k: tuple(r for r in rules if r.syscall not in _READ_KEYS) for k, rules in v1.dispatch.items()})

    rng = random.Random(8)
    events = [it for it in gen.random_trace(rng, 100) if isinstance(it, TraceEvent)]
    # renumber 1..100; event 1 opens a workspace file and a few reads of it
    # straddle the swap so the two tables visibly disagree
    events[0] = TraceEvent(0, 100, "open", ("/work/a", frozenset("R")), 90)
    for i in (10, 30, 60, 80):
        events[i - 1] = TraceEvent(0, 100, "read", (90, 64))
    events = [TraceEvent(i, ev.pid, ev.syscall, ev.args, ev.ret) for i, ev in enumerate(events, start=1)]
    items = [*(ScopeDirective(pid, Scope.AGENT) for pid in (100, 200, 300)), *events]

    mon = Monitor(compiled)
    mon.update_rules(Scope.AGENT, v2, at_seq=50)
    mismatches = versions_ok = 0
    flipped = 0
    baseline = replay(compiled, items)
    for it in items:
        if isinstance(it, ScopeDirective):
            mon.directive(it)
            continue
        expect_table = v1 if it.seq < 50 else v2
        # slots hold a lock and are replaced below, so keep them out of the copy
        shadow = copy.deepcopy(mon, {id(mon.slots): {}})
        shadow._scheduled = []
        shadow.slots = {s: TableSlot(expect_table if s is Scope.AGENT else mon.slots[s].table) for s in SCOPES}
        want = shadow.step(it)
        got = mon.step(it)
        versions_ok += got.version == expect_table.version
        mismatches += (got.outcome, got.detail, got.checks) != (want.outcome, want.detail, want.checks)
        if it.seq >= 50 and got.outcome != baseline.verdict(it.seq).outcome:
            flipped += 1
    prefix_same = [v for v in mon.report.verdicts if v.seq < 50] == [v for v in baseline.verdicts if v.seq < 50]
    ok = len(events) == 100 and versions_ok == 100 and mismatches == 0 and prefix_same and flipped > 0
    verdict(
        8,
        "hot update",
        ok,
        f"{len(events)} events, swap at 50; {versions_ok}/100 judged by the expected version; "
        f"{mismatches} differ from a single-table shadow; prefix identical to v1-only replay: {prefix_same}; "
        f"{flipped} later verdicts flipped by v2",
    )
    assert ok


# 9 --------------------------------------------------------------------------


def test_smt_cross_check(verdict):
    try:
        import z3
    except ImportError:
        verdict(9, "SMT cross-check", True, "skipped: no SMT solver installed (optional criterion)")
        pytest.skip("z3 not installed")
    rng = random.Random(9)
    elapsed = _clock()
    agree = sat = 0
    for _ in range(100):
        m = gen.random_model(rng, policies="validation")
        solver = z3.Solver()
        solver.from_string(emit_smtlib(m))
        result = str(solver.check())
        expected = "sat" if validate(m) else "unsat"
        agree += result == expected
        sat += result == "sat"
    secs = elapsed()
    ok = agree == 100
    verdict(
        9,
        "SMT cross-check",
        ok,
        f"{agree}/100 models agree with z3 {z3.get_version_string()} ({sat} sat, {100 - sat} unsat); {secs:.2f}s",
    )
    assert ok


# 10 -------------------------------------------------------------------------


def _throughput_trace(n: int) -> str:
    rng = random.Random(10)
    items: list = [ScopeDirective(100, Scope.AGENT)]
    seq = 0

    def ev(name, *args, ret=None):
        nonlocal seq
        seq += 1
        items.append(TraceEvent(seq, 100, name, args, ret))

    files = ["/work/a.txt", "/work/b.txt", "/etc/agent/cfg", "/var/log/x.log", "/tmp/t.sh", "/secure/key"]
    for i, f in enumerate(files):
        ev("open", f, frozenset("RA") if "log" in f else frozenset("R"), ret=3 + i)
    ev("socket", ret=20)
    ev("connect", 20, "api.internal:443")
    while seq < n:
        r = rng.random()
        if r < 0.4:
            ev("read", rng.randint(3, 8), 64)
        elif r < 0.6:
            ev("write", rng.choice([3, 4, 6]), 64)
        elif r < 0.75:
            ev("stat", rng.choice(files))
        elif r < 0.85:
            ev("sendto", 20, 128)
        elif r < 0.95:
            ev("fstat", rng.randint(3, 8))
        else:
            ev("open", rng.choice(files), frozenset("R"), ret=30)
    return render_trace(items)


def test_throughput(verdict):
    model = parse((HERE / "corpus" / "25_workstation.claw").read_text())
    compiled = compile(model)
    n = 200_000
    text = _throughput_trace(n)
    t = time.perf_counter()
    trace = parse_trace(text)
    parse_rate = n / (time.perf_counter() - t)
    best = 0.0
    for _ in range(5):
        t = time.perf_counter()
        report = Monitor(compiled).replay(trace)
        best = max(best, n / (time.perf_counter() - t))
    assert report.counts()["events"] == n
    ok = len(model.patterns) == 10 and best >= 100_000
    verdict(
        10,
        "throughput",
        ok,
        f"replay {best:,.0f} events/s best of 5 over {n:,} events, 10-pattern model (>= 100,000); "
        f"trace parsing alone {parse_rate:,.0f} events/s",
    )
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
