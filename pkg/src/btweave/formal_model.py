"""Behavior tree + environment abstraction -> finite transition system.

A step is: every blackboard variable moves according to its environment
rule, then the tree ticks once. The resulting state holds the blackboard
after the tick (action effects applied) and one ``Task.active`` bit per
action task. Invariants ``G phi`` are checked by breadth-first search.
"""
from __future__ import annotations

import os
from collections import deque
from dataclasses import dataclass, field
from itertools import product
from typing import Iterable, Mapping

from .bt_core import BehaviorTreeDef, BTError, Domain, NodeStatus, TICK_STATUSES, tick_outcomes
from .bt_dsl import load_resource
from .expr import (And, Cmp, Const, Expr, Flag, Implies, Literal, Not, Or, ParseError, TokenStream,
                   ExprParser, TEMPORAL_OPERATORS, UnsupportedFragmentError, atoms, comparisons, evaluate,
                   flag_name, to_text, tokenize)

DEFAULT_STATE_CAP = 10**7
ENV_HEADER = "# envspec v1"


class ModelError(Exception):
    """Environment/schema mismatch or an otherwise unusable model."""


class StateLimitExceeded(ModelError):
    pass


# ---------------------------------------------------------------------------
# Environment specification


@dataclass(frozen=True)
class VarRule:
    kind: str  # "nondet" | "frozen" | "guarded"
    guards: tuple[tuple[Expr, tuple[Literal, ...]], ...] = ()

    def next_values(self, current: Literal, domain: Domain, valuation: Mapping) -> tuple:
        if self.kind == "nondet":
            return domain.values
        if self.kind == "guarded":
            for guard, values in self.guards:
                if evaluate(guard, valuation):
                    return values
        return (current,)


@dataclass
class EnvSpec:
    init: dict[str, tuple] = field(default_factory=dict)
    rules: dict[str, VarRule] = field(default_factory=dict)
    # task id -> allowed handler statuses; "*" is the fallback
    outcomes: dict[str, frozenset] = field(default_factory=dict)
    # task id -> {variable: values the task may write when activated}
    effects: dict[str, dict[str, tuple]] = field(default_factory=dict)

    def outcomes_for(self, task: str) -> frozenset:
        if task in self.outcomes:
            return self.outcomes[task]
        return self.outcomes.get("*", frozenset({NodeStatus.SUCCESS}))


def _status(word: str, tok) -> NodeStatus:
    for s in TICK_STATUSES:
        if s.value.lower() == word.lower():
            return s
    raise ParseError(f"unknown status {word!r}", tok.line, tok.col)


def parse_env(text: str) -> EnvSpec:
    """Parse the line-oriented environment format.

    ::

        init VAR = v1, v2
        rule VAR nondet | frozen
        rule VAR when PRED -> v1, v2     (guards tried in file order)
        rule VAR otherwise -> v1, v2
        outcomes TASK|* = Success, Running
        effect TASK VAR = v1, v2
    """
    env = EnvSpec()
    guards: dict[str, list] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.split("#", 1)[0].strip():
            continue
        tokens = tokenize(raw)
        tokens = [t.__class__(t.kind, t.text, lineno, t.col) for t in tokens]
        ts = TokenStream(tokens)
        head = ts.expect_ident("a directive")
        if head.text == "init":
            var = ts.expect_ident("variable").text
            ts.expect("=")
            env.init[var] = _literal_list(ts)
        elif head.text == "rule":
            vtok = ts.expect_ident("variable")
            var = vtok.text
            if ts.accept("nondet") or ts.accept("frozen"):
                kind = ts.tokens[ts.pos - 1].text
                if var in env.rules or var in guards:
                    raise ParseError(f"second rule for {var!r}", vtok.line, vtok.col)
                env.rules[var] = VarRule(kind)
            else:
                if var in env.rules:
                    raise ParseError(f"second rule for {var!r}", vtok.line, vtok.col)
                if ts.accept("otherwise"):
                    guard: Expr = Const(True)
                else:
                    ts.expect("when")
                    guard = ExprParser(ts, allow_implies=False).parse()
                ts.expect("->")
                guards.setdefault(var, []).append((guard, _literal_list(ts)))
        elif head.text == "outcomes":
            task = "*" if ts.accept("*") else ts.expect_ident("task id").text
            ts.expect("=")
            words = [ts.expect_ident("status")]
            while ts.accept(","):
                words.append(ts.expect_ident("status"))
            env.outcomes[task] = frozenset(_status(w.text, w) for w in words)
        elif head.text == "effect":
            task = ts.expect_ident("task id").text
            var = ts.expect_ident("variable").text
            ts.expect("=")
            env.effects.setdefault(task, {})[var] = _literal_list(ts)
        else:
            raise ParseError(f"unknown directive {head.text!r}", head.line, head.col)
        tok = ts.peek()
        if tok.kind != "eof":
            raise ParseError(f"unexpected {tok.text!r}", tok.line, tok.col)
    for var, gs in guards.items():
        env.rules[var] = VarRule("guarded", tuple(gs))
    return env


def _literal_list(ts: TokenStream) -> tuple:
    values = [ts.expect_literal()[0]]
    while ts.accept(","):
        values.append(ts.expect_literal()[0])
    return tuple(dict.fromkeys(values))


def default_env() -> EnvSpec:
    return parse_env(load_resource("default.env"))


def permissive_env(tree: BehaviorTreeDef, effects: Mapping[str, Mapping[str, tuple]] | None = None) -> EnvSpec:
    """Anything-goes environment: every variable free, every handler status possible."""
    if effects is None:
        effects = default_env().effects
    return EnvSpec(
        init={v: d.values for v, d in tree.schema.items()},
        rules={v: VarRule("nondet") for v in tree.schema},
        outcomes={"*": frozenset(TICK_STATUSES)},
        effects={t: dict(e) for t, e in effects.items()},
    )


def check_env(tree: BehaviorTreeDef, env: EnvSpec) -> None:
    schema = tree.schema
    if not env.rules and not env.init:
        raise ModelError("environment has no rules")
    for var in schema:
        if var not in env.rules:
            raise ModelError(f"environment has no rule for variable {var!r}")
        if var not in env.init or not env.init[var]:
            raise ModelError(f"environment has no initial value for variable {var!r}")
    for var in list(env.rules) + list(env.init):
        if var not in schema:
            raise ModelError(f"environment mentions undeclared variable {var!r}")
    flags = {flag_name(t) for t in tree.tasks()}
    for var, values in env.init.items():
        _check_values(schema, var, values, "initial value")
    for var, rule in env.rules.items():
        for guard, values in rule.guards:
            _check_values(schema, var, values, "rule value")
            for name in atoms(guard):
                if name not in schema and name not in flags:
                    raise ModelError(f"guard of {var!r} reads undeclared {name!r}")
    for task, writes in env.effects.items():
        for var, values in writes.items():
            if var not in schema:
                raise ModelError(f"effect of {task!r} writes undeclared variable {var!r}")
            _check_values(schema, var, values, f"effect of {task!r}")
    for task, statuses in env.outcomes.items():
        if not statuses:
            raise ModelError(f"no outcomes for task {task!r}")


def _check_values(schema, var, values, what) -> None:
    for v in values:
        if v not in schema[var]:
            raise ModelError(f"{what} {v!r} for {var!r} outside domain {schema[var].text()}")


# ---------------------------------------------------------------------------
# Transition system

State = tuple


class TransitionSystem:
    """Explicit successor function over blackboard values + action flags."""

    def __init__(self, tree: BehaviorTreeDef, env: EnvSpec):
        check_env(tree, env)
        self.tree = tree
        self.env = env
        self.bb_vars = list(tree.schema)
        self.tasks = tree.tasks()
        self.flag_names = [flag_name(t) for t in self.tasks]
        self.variables: list[tuple[str, Domain]] = (
            [(v, tree.schema[v]) for v in self.bb_vars] + [(f, Domain.boolean()) for f in self.flag_names])
        self.names = [name for name, _ in self.variables]
        self._index = {name: i for i, name in enumerate(self.names)}
        self._post_cache: dict[tuple, tuple] = {}
        self._succ_cache: dict[State, tuple] = {}
        self.initial: tuple[State, ...] = tuple(sorted(set().union(
            *(self.post_tick(pre) for pre in product(*(env.init[v] for v in self.bb_vars))))))

    def valuation(self, state: State) -> dict:
        return dict(zip(self.names, state))

    def state_of(self, valuation: Mapping) -> State:
        return tuple(valuation[name] for name in self.names)

    def post_tick(self, pre: tuple) -> tuple[State, ...]:
        """States reachable by ticking the tree on blackboard values ``pre``."""
        if pre in self._post_cache:
            return self._post_cache[pre]
        values = dict(zip(self.bb_vars, pre))
        nodes = self.tree.nodes
        out = set()
        for _status, acts in tick_outcomes(self.tree, values, self.env.outcomes_for):
            tasks = [nodes[a].task for a in acts]
            flags = tuple(int(t in tasks) for t in self.tasks)
            # last activated writer decides each variable
            options = []
            for var in self.bb_vars:
                writes = [self.env.effects[t][var] for t in tasks if var in self.env.effects.get(t, {})]
                options.append(writes[-1] if writes else (values[var],))
            for post in product(*options):
                out.add(tuple(post) + flags)
        result = tuple(sorted(out))
        self._post_cache[pre] = result
        return result

    def successors(self, state: State) -> tuple[State, ...]:
        cached = self._succ_cache.get(state)
        if cached is not None:
            return cached
        valuation = self.valuation(state)
        options = [self.env.rules[v].next_values(valuation[v], self.tree.schema[v], valuation)
                   for v in self.bb_vars]
        out = set()
        for pre in product(*options):
            out.update(self.post_tick(pre))
        if not out:
            raise ModelError(f"deadlock in state {valuation}")
        result = tuple(sorted(out))
        self._succ_cache[state] = result
        return result

    def has_edge(self, src: State, dst: State) -> bool:
        return dst in self.successors(src)


def translate(tree: BehaviorTreeDef, env: EnvSpec) -> TransitionSystem:
    try:
        return TransitionSystem(tree, env)
    except BTError as exc:
        raise ModelError(str(exc)) from exc


def state_cap_from_env(default: int = DEFAULT_STATE_CAP) -> int:
    raw = os.environ.get("BTWEAVE_STATE_CAP")
    return int(raw) if raw else default


def _bfs(ts: TransitionSystem, cap: int, stop=None):
    parent: dict[State, State | None] = {}
    queue: deque = deque()
    for s in ts.initial:
        if s not in parent:
            parent[s] = None
            if stop is not None and stop(s):
                return parent, s
            queue.append(s)
    while queue:
        s = queue.popleft()
        for t in ts.successors(s):
            if t in parent:
                continue
            parent[t] = s
            if len(parent) > cap:
                raise StateLimitExceeded(f"more than {cap} reachable states")
            if stop is not None and stop(t):
                return parent, t
            queue.append(t)
    return parent, None


def reachable(ts: TransitionSystem, cap: int = DEFAULT_STATE_CAP) -> list[State]:
    """Reachable states in breadth-first discovery order."""
    parent, _ = _bfs(ts, cap)
    return list(parent)


# ---------------------------------------------------------------------------
# Properties


@dataclass(frozen=True)
class InvariantProperty:
    name: str
    formula: Expr  # holds in every reachable state

    @property
    def text(self) -> str:
        return f"G ({to_text(self.formula)})"

    def atoms(self) -> set[str]:
        return atoms(self.formula)


@dataclass
class Verdict:
    prop: InvariantProperty
    holds: bool
    counterexample: list[dict] | None = None
    states_explored: int = 0


def parse_property(text: str, name: str | None = None) -> InvariantProperty:
    """Parse ``[name:] G (formula)``; nested temporal operators are rejected."""
    ts = TokenStream(tokenize(text))
    if ts.peek().kind == "ident" and ts.peek(1).text == ":" and ts.peek(1).kind == "op":
        name = ts.next().text
        ts.next()
    tok = ts.peek()
    if tok.kind == "ident" and tok.text in TEMPORAL_OPERATORS and tok.text != "G":
        raise UnsupportedFragmentError(f"temporal operator {tok.text!r} is not supported; "
                                       "only G invariants are", tok.line, tok.col)
    if not ts.accept("G"):
        raise ParseError("property must start with 'G'", tok.line, tok.col)
    formula = ExprParser(ts, temporal_check=True).parse()
    tok = ts.peek()
    if tok.kind != "eof":
        raise ParseError(f"unexpected {tok.text!r} after property", tok.line, tok.col)
    return InvariantProperty(name or "property", formula)


def parse_property_file(text: str) -> list[InvariantProperty]:
    props = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            props.append(parse_property(line, name=f"prop{len(props)}"))
        except ParseError as exc:
            raise type(exc)(exc.message, lineno, exc.col) from exc
    return props


def check_property_atoms(ts: TransitionSystem, prop: InvariantProperty) -> None:
    domains = dict(ts.variables)
    for name in prop.atoms():
        if name not in domains:
            raise ModelError(f"property {prop.name} references undeclared {name!r}")
    for cmp in comparisons(prop.formula):
        if cmp.value not in domains[cmp.name]:
            raise ModelError(f"property {prop.name} compares {cmp.name!r} with {cmp.value!r}, "
                             f"outside {domains[cmp.name].text()}")


def check_invariant(ts: TransitionSystem, prop: InvariantProperty, cap: int = DEFAULT_STATE_CAP) -> Verdict:
    check_property_atoms(ts, prop)
    names = ts.names

    def violates(state: State) -> bool:
        return not evaluate(prop.formula, dict(zip(names, state)))

    parent, bad = _bfs(ts, cap, stop=violates)
    if bad is None:
        return Verdict(prop, True, None, len(parent))
    path = []
    s: State | None = bad
    while s is not None:
        path.append(ts.valuation(s))
        s = parent[s]
    path.reverse()
    return Verdict(prop, False, path, len(parent))


_NOT_DONE = Not(Or((Cmp("status", "==", "m_station"), Cmp("status", "==", "m_surface"))))


def builtin_properties() -> list[InvariantProperty]:
    """Battery safety plus the three phase-conditioned progress invariants."""
    return [
        InvariantProperty("P0_battery", Implies(Cmp("batteryLow", "==", 1), Flag("stationKeepingTask"))),
        InvariantProperty("P1_search", Implies(
            And((_NOT_DONE, Cmp("pipeLost", "==", 1), Cmp("status", "==", "m_search"))), Flag("RowsTask"))),
        InvariantProperty("P2_tracking", Implies(
            And((_NOT_DONE, Cmp("pipeLost", "==", 0), Cmp("status", "==", "m_tracking"))), Flag("TrackingTask"))),
        InvariantProperty("P3_steering", Implies(
            And((_NOT_DONE, Cmp("status", "==", "m_steering"))), Flag("GotoTask"))),
    ]


def literal_properties() -> list[InvariantProperty]:
    """The three progress invariants with unconditioned consequents."""
    return [
        InvariantProperty("L1_search", Implies(_NOT_DONE, And((
            Flag("RowsTask"), Cmp("pipeLost", "==", 1), Cmp("status", "==", "m_search"))))),
        InvariantProperty("L2_tracking", Implies(_NOT_DONE, And((
            Flag("TrackingTask"), Cmp("pipeLost", "==", 0), Cmp("status", "==", "m_tracking"))))),
        InvariantProperty("L3_steering", Implies(_NOT_DONE, And((
            Flag("GotoTask"), Cmp("status", "==", "m_steering"))))),
    ]


def jointly_satisfiable(ts: TransitionSystem, props: Iterable[InvariantProperty],
                        premise: Expr = _NOT_DONE) -> bool:
    """Whether some valuation of the declared domains makes ``premise`` and
    every formula true at once (brute force over the variable domains)."""
    formulas = [p.formula for p in props]
    for values in product(*(d.values for _, d in ts.variables)):
        env = dict(zip(ts.names, values))
        if evaluate(premise, env) and all(evaluate(f, env) for f in formulas):
            return True
    return False


def builtin_props_text() -> str:
    return "".join(f"{p.name}: {p.text}\n" for p in builtin_properties())
