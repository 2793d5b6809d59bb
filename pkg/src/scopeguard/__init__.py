"""Policy toolchain for confining AI agents.

Parse a policy, validate it, compile it into per-scope syscall rule tables
and enforce it by replaying syscall traces.
"""

from .compiler import (
    CompiledPolicy,
    MonitorSpec,
    Rule,
    RuleTable,
    compile,
    compile_tables,
    compile_temporal,
    export_table,
    import_table,
    syscalls_for,
)
from .lang import PolicySyntaxError, parse, render
from .model import (
    EntityKind,
    EntityPattern,
    Grant,
    Permission,
    Scope,
    SecurityModel,
    glob_match,
    perms_of,
    permset,
    resolve,
)
from .monitor import Monitor, Report, explain, parse_trace, replay
from .validator import (
    LeakFinding,
    Violation,
    analyze_leaks,
    check_builtin,
    check_scope_hierarchy,
    check_static,
    emit_smtlib,
    validate,
)

__all__ = [
    "CompiledPolicy",
    "EntityKind",
    "EntityPattern",
    "Grant",
    "LeakFinding",
    "Monitor",
    "MonitorSpec",
    "Permission",
    "PolicySyntaxError",
    "Report",
    "Rule",
    "RuleTable",
    "Scope",
    "SecurityModel",
    "Violation",
    "analyze_leaks",
    "check_builtin",
    "check_scope_hierarchy",
    "check_static",
    "compile",
    "compile_tables",
    "compile_temporal",
    "emit_smtlib",
    "explain",
    "export_table",
    "glob_match",
    "import_table",
    "parse",
    "parse_trace",
    "perms_of",
    "permset",
    "render",
    "replay",
    "resolve",
    "syscalls_for",
    "validate",
]
