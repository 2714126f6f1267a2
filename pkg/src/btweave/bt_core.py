"""Behavior-tree runtime: node semantics, ticking and the blackboard."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from itertools import product
from typing import Callable, Iterable, Mapping

from .expr import Expr, Literal, comparisons, evaluate


class BTError(Exception):
    pass


class SchemaError(BTError):
    """A blackboard value outside its declared domain, or an unknown variable."""


class HandlerMissingError(BTError):
    pass


class InvalidTreeError(BTError):
    pass


class NodeStatus(Enum):
    SUCCESS = "Success"
    FAILURE = "Failure"
    RUNNING = "Running"
    INVALID = "Invalid"

    def __lt__(self, other):
        return self.value < other.value


TICK_STATUSES = (NodeStatus.SUCCESS, NodeStatus.FAILURE, NodeStatus.RUNNING)


class NodeKind(Enum):
    SELECTOR = "selector"
    SEQUENCE = "sequence"
    PARALLEL = "parallel"
    CONDITION = "condition"
    ACTION = "action"

    @property
    def composite(self) -> bool:
        return self in (NodeKind.SELECTOR, NodeKind.SEQUENCE, NodeKind.PARALLEL)


@dataclass(frozen=True)
class Domain:
    """Finite value domain: an integer range ``lo..hi`` or an enumeration."""

    lo: int = 0
    hi: int = 1
    symbols: tuple[str, ...] = ()

    @classmethod
    def boolean(cls) -> "Domain":
        return cls(0, 1)

    @classmethod
    def enum(cls, *symbols: str) -> "Domain":
        return cls(0, 0, tuple(symbols))

    @property
    def is_enum(self) -> bool:
        return bool(self.symbols)

    @property
    def is_bool(self) -> bool:
        return not self.symbols and self.lo == 0 and self.hi == 1

    @property
    def values(self) -> tuple:
        if self.symbols:
            return self.symbols
        return tuple(range(self.lo, self.hi + 1))

    def __contains__(self, value) -> bool:
        if self.symbols:
            return isinstance(value, str) and value in self.symbols
        return isinstance(value, int) and not isinstance(value, bool) and self.lo <= value <= self.hi

    def __len__(self) -> int:
        return len(self.values)

    def text(self) -> str:
        if self.symbols:
            return "{" + ", ".join(self.symbols) + "}"
        return f"{self.lo}..{self.hi}"


@dataclass(frozen=True)
class Node:
    name: str
    kind: NodeKind
    children: tuple[str, ...] = ()
    predicate: Expr | None = None
    task: str | None = None


@dataclass(frozen=True)
class BehaviorTreeDef:
    name: str
    root: str
    nodes: Mapping[str, Node]
    schema: Mapping[str, Domain]
    # source positions from the DSL; ignored by equality
    spans: Mapping[str, tuple[int, int]] = field(default_factory=dict, compare=False, repr=False)

    __hash__ = None  # type: ignore[assignment]

    def actions(self) -> list[Node]:
        return [n for n in self.walk() if n.kind is NodeKind.ACTION]

    def tasks(self) -> list[str]:
        """Distinct action task ids, sorted."""
        return sorted({n.task for n in self.nodes.values() if n.kind is NodeKind.ACTION})

    def walk(self, start: str | None = None) -> Iterable[Node]:
        """Pre-order, left to right."""
        stack = [start or self.root]
        seen = set()
        while stack:
            name = stack.pop()
            if name in seen or name not in self.nodes:
                continue
            seen.add(name)
            node = self.nodes[name]
            yield node
            stack.extend(reversed(node.children))

    def parent_of(self, name: str) -> str | None:
        for node in self.nodes.values():
            if name in node.children:
                return node.name
        return None


def structural_problems(tree: BehaviorTreeDef) -> list[tuple[str, str]]:
    """Return ``(offending name, message)`` pairs for every broken invariant."""
    problems: list[tuple[str, str]] = []
    nodes = tree.nodes
    if tree.root not in nodes:
        problems.append((tree.root, f"root node {tree.root!r} is not defined"))
        return problems
    parents: dict[str, list[str]] = {}
    for node in nodes.values():
        if node.kind.composite and not node.children:
            problems.append((node.name, f"{node.kind.value} {node.name!r} has no children"))
        if not node.kind.composite and node.children:
            problems.append((node.name, f"{node.kind.value} {node.name!r} cannot have children"))
        if node.kind is NodeKind.CONDITION and node.predicate is None:
            problems.append((node.name, f"condition {node.name!r} has no predicate"))
        if node.kind is NodeKind.ACTION and not node.task:
            problems.append((node.name, f"action {node.name!r} has no task id"))
        for child in node.children:
            if child not in nodes:
                problems.append((child, f"node {child!r} referenced by {node.name!r} is not defined"))
            parents.setdefault(child, []).append(node.name)
    for child, ps in parents.items():
        if len(ps) > 1:
            problems.append((child, f"node {child!r} has {len(ps)} parents"))
    if tree.root in parents:
        problems.append((tree.root, f"root {tree.root!r} has a parent (cycle)"))
    reachable = {n.name for n in tree.walk()}
    for name in nodes:
        if name not in reachable:
            problems.append((name, f"node {name!r} is not reachable from the root"))
    for node in nodes.values():
        if node.predicate is None:
            continue
        for cmp in comparisons(node.predicate):
            if cmp.name not in tree.schema:
                problems.append((node.name, f"condition {node.name!r} reads undeclared variable {cmp.name!r}"))
            elif cmp.value not in tree.schema[cmp.name]:
                problems.append((node.name, f"condition {node.name!r} compares {cmp.name!r} with "
                                           f"{cmp.value!r}, outside its domain {tree.schema[cmp.name].text()}"))
    return problems


def check_tree(tree: BehaviorTreeDef) -> None:
    problems = structural_problems(tree)
    if problems:
        raise InvalidTreeError("; ".join(msg for _, msg in problems))


# ---------------------------------------------------------------------------
# Blackboard


class Blackboard:
    """Typed key/value store shared by condition nodes and sensing tasks."""

    def __init__(self, schema: Mapping[str, Domain], values: Mapping[str, Literal] | None = None):
        self.schema = dict(schema)
        self._values = {name: dom.values[0] for name, dom in self.schema.items()}
        for name, value in (values or {}).items():
            self.set(name, value)

    def get(self, name: str) -> Literal:
        if name not in self._values:
            raise SchemaError(f"unknown blackboard variable {name!r}")
        return self._values[name]

    def set(self, name: str, value: Literal) -> "Blackboard":
        if name not in self.schema:
            raise SchemaError(f"unknown blackboard variable {name!r}")
        if value not in self.schema[name]:
            raise SchemaError(f"value {value!r} outside domain {self.schema[name].text()} of {name!r}")
        self._values[name] = value
        return self

    def snapshot(self) -> dict[str, Literal]:
        return dict(self._values)

    def copy(self) -> "Blackboard":
        return Blackboard(self.schema, self._values)

    def __getitem__(self, name: str) -> Literal:
        return self.get(name)

    def __eq__(self, other) -> bool:
        return isinstance(other, Blackboard) and self.schema == other.schema and self._values == other._values

    def __repr__(self) -> str:
        return f"Blackboard({self._values!r})"


def blackboard_set(bb: Blackboard, name: str, value: Literal) -> Blackboard:
    return bb.set(name, value)


def blackboard_get(bb: Blackboard, name: str) -> Literal:
    return bb.get(name)


def _check_values(tree: BehaviorTreeDef, values: Mapping[str, Literal]) -> None:
    for name, dom in tree.schema.items():
        if name not in values:
            raise SchemaError(f"blackboard has no value for {name!r}")
        if values[name] not in dom:
            raise SchemaError(f"value {values[name]!r} outside domain {dom.text()} of {name!r}")


# ---------------------------------------------------------------------------
# Ticking

Handler = Callable[[Blackboard], NodeStatus]


@dataclass(frozen=True)
class TickResult:
    status: NodeStatus
    statuses: Mapping[str, NodeStatus]  # visited nodes only, in visit order
    activations: tuple[str, ...]  # action node names returning Running or Success
    tasks: tuple[str, ...]  # task ids of ``activations``

    @property
    def active_tasks(self) -> frozenset[str]:
        return frozenset(self.tasks)


def _combine_parallel(statuses: Iterable[NodeStatus]) -> NodeStatus:
    statuses = list(statuses)
    if any(s is NodeStatus.FAILURE for s in statuses):
        return NodeStatus.FAILURE
    if all(s is NodeStatus.SUCCESS for s in statuses):
        return NodeStatus.SUCCESS
    return NodeStatus.RUNNING


def tick(tree: BehaviorTreeDef, bb: Blackboard, handlers: Mapping[str, Handler]) -> TickResult:
    """Run one memoryless tick from the root."""
    for node in tree.nodes.values():
        if node.kind is NodeKind.ACTION and node.task not in handlers:
            raise HandlerMissingError(f"no handler for task {node.task!r} (action {node.name!r})")
    values = bb.snapshot()
    _check_values(tree, values)
    statuses: dict[str, NodeStatus] = {}
    activations: list[str] = []

    def run(name: str) -> NodeStatus:
        node = tree.nodes[name]
        kind = node.kind
        if kind is NodeKind.CONDITION:
            status = NodeStatus.SUCCESS if evaluate(node.predicate, values) else NodeStatus.FAILURE
        elif kind is NodeKind.ACTION:
            status = handlers[node.task](bb)
            if status not in TICK_STATUSES:
                raise BTError(f"handler for {node.task!r} returned {status!r}")
            if status is not NodeStatus.FAILURE:
                activations.append(name)
        elif kind is NodeKind.SEQUENCE:
            status = NodeStatus.SUCCESS
            for child in node.children:
                status = run(child)
                if status is not NodeStatus.SUCCESS:
                    break
        elif kind is NodeKind.SELECTOR:
            status = NodeStatus.FAILURE
            for child in node.children:
                status = run(child)
                if status is not NodeStatus.FAILURE:
                    break
        else:
            status = _combine_parallel([run(child) for child in node.children])
        statuses[name] = status
        return status

    root_status = run(tree.root)
    # report in visit (pre-order) sequence
    ordered = {n.name: statuses[n.name] for n in tree.walk() if n.name in statuses}
    return TickResult(root_status, ordered, tuple(activations),
                      tuple(tree.nodes[a].task for a in activations))


def tick_outcomes(tree: BehaviorTreeDef, values: Mapping[str, Literal],
                  outcomes: Callable[[str], Iterable[NodeStatus]]) -> set[tuple[NodeStatus, tuple[str, ...]]]:
    """All ``(root status, activated action nodes)`` pairs of one tick when each
    visited action may return any status in ``outcomes(task)``.

    This is the set-valued counterpart of :func:`tick`, used to build the
    transition system without enumerating every handler assignment.
    """
    _check_values(tree, values)
    cache: dict[str, frozenset] = {}

    def run(name: str) -> frozenset:
        if name in cache:
            return cache[name]
        node = tree.nodes[name]
        kind = node.kind
        if kind is NodeKind.CONDITION:
            ok = evaluate(node.predicate, values)
            res = frozenset({(NodeStatus.SUCCESS if ok else NodeStatus.FAILURE, ())})
        elif kind is NodeKind.ACTION:
            res = frozenset((s, () if s is NodeStatus.FAILURE else (name,)) for s in outcomes(node.task))
            if not res:
                raise BTError(f"no possible outcome for task {node.task!r}")
        elif kind in (NodeKind.SEQUENCE, NodeKind.SELECTOR):
            go_on = NodeStatus.SUCCESS if kind is NodeKind.SEQUENCE else NodeStatus.FAILURE
            done: set = set()
            pending = {()}
            for child in node.children:
                nxt = set()
                for acts in pending:
                    for status, child_acts in run(child):
                        if status is go_on:
                            nxt.add(acts + child_acts)
                        else:
                            done.add((status, acts + child_acts))
                pending = nxt
                if not pending:
                    break
            done.update((go_on, acts) for acts in pending)
            res = frozenset(done)
        else:
            combos = {((), ())}
            for child in node.children:
                combos = {(sts + (s,), acts + a) for sts, acts in combos for s, a in run(child)}
            res = frozenset((_combine_parallel(sts), acts) for sts, acts in combos)
        cache[name] = res
        return res

    return set(run(tree.root))


def all_handler_assignments(tree: BehaviorTreeDef, choices: Callable[[str], Iterable[NodeStatus]]):
    """Yield per-action-node status maps over the product of allowed outcomes."""
    actions = [n for n in tree.nodes.values() if n.kind is NodeKind.ACTION]
    options = [sorted(choices(n.task)) for n in actions]
    for combo in product(*options):
        yield {n.name: s for n, s in zip(actions, combo)}


class BehaviorTree:
    """Runtime wrapper keeping the last status of every node."""

    def __init__(self, tree: BehaviorTreeDef):
        check_tree(tree)
        self.tree = tree
        self.statuses: dict[str, NodeStatus] = {}
        self.reset()

    def reset(self) -> "BehaviorTree":
        self.statuses = {name: NodeStatus.INVALID for name in self.tree.nodes}
        return self

    def tick(self, bb: Blackboard, handlers: Mapping[str, Handler]) -> TickResult:
        result = tick(self.tree, bb, handlers)
        self.statuses = {name: result.statuses.get(name, NodeStatus.INVALID) for name in self.tree.nodes}
        return result


def reset(tree: BehaviorTreeDef) -> BehaviorTree:
    return BehaviorTree(tree)
