"""Random generators and brute-force oracles shared by the tests.

The oracles deliberately re-implement tick semantics, environment updates and
reachability from the definitions instead of calling the library.
"""
from __future__ import annotations

import itertools
import math
import random

from btweave.bt_core import BehaviorTreeDef, Domain, Node, NodeKind, NodeStatus
from btweave.expr import And, Cmp, Flag, Implies, Not, Or
from btweave.formal_model import EnvSpec, InvariantProperty, VarRule

S, F, R = NodeStatus.SUCCESS, NodeStatus.FAILURE, NodeStatus.RUNNING
ENUM_SYMBOLS = ("red", "green", "blue")


# -- random trees -------------------------------------------------------------

def random_schema(rng: random.Random, max_vars: int = 3) -> dict[str, Domain]:
    schema = {}
    for i in range(rng.randint(1, max_vars)):
        kind = rng.choice(["bool", "enum", "range"])
        if kind == "bool":
            schema[f"v{i}"] = Domain.boolean()
        elif kind == "enum":
            schema[f"v{i}"] = Domain.enum(*ENUM_SYMBOLS[: rng.randint(2, 3)])
        else:
            schema[f"v{i}"] = Domain(0, rng.randint(1, 2))
    return schema


def random_predicate(rng: random.Random, schema, depth: int = 0):
    if depth >= 2 or rng.random() < 0.5:
        var = rng.choice(sorted(schema))
        return Cmp(var, rng.choice(["==", "!="]), rng.choice(schema[var].values))
    args = tuple(random_predicate(rng, schema, depth + 1) for _ in range(rng.randint(2, 3)))
    return And(args) if rng.random() < 0.5 else Or(args)


def random_tree(rng: random.Random, max_nodes: int = 30, tasks: tuple[str, ...] = ("TaskA", "TaskB", "TaskC"),
                schema=None, max_depth: int = 4) -> BehaviorTreeDef:
    """Valid tree with at most ``max_nodes`` nodes."""
    schema = schema if schema is not None else random_schema(rng)
    nodes: dict[str, Node] = {}
    budget = [max_nodes]

    def make(depth: int) -> str:
        name = f"n{len(nodes)}_{rng.randint(0, 99)}"
        while name in nodes:
            name += "x"
        budget[0] -= 1
        nodes[name] = None  # reserve
        if depth < max_depth and budget[0] >= 2 and rng.random() < 0.45:
            kind = rng.choice([NodeKind.SELECTOR, NodeKind.SEQUENCE, NodeKind.PARALLEL])
            children = []
            for _ in range(rng.randint(1, 3)):
                if budget[0] <= 0:
                    break
                children.append(make(depth + 1))
            nodes[name] = Node(name, kind, tuple(children))
        elif rng.random() < 0.5:
            nodes[name] = Node(name, NodeKind.CONDITION, predicate=random_predicate(rng, schema))
        else:
            nodes[name] = Node(name, NodeKind.ACTION, task=rng.choice(tasks))
        return name

    root = make(0)
    return BehaviorTreeDef(f"t{rng.randint(0, 999)}", root, nodes, dict(schema))


# -- oracle tick ----------------------------------------------------------------

def eval_formula(f, env) -> bool:
    if isinstance(f, Cmp):
        return (env[f.name] == f.value) is (f.op == "==")
    if isinstance(f, Flag):
        return env[f.name] == 1
    if isinstance(f, Not):
        return not eval_formula(f.arg, env)
    if isinstance(f, And):
        return all(eval_formula(a, env) for a in f.args)
    if isinstance(f, Or):
        return any(eval_formula(a, env) for a in f.args)
    if isinstance(f, Implies):
        return not eval_formula(f.left, env) or eval_formula(f.right, env)
    return bool(f.value)


def oracle_tick(tree, values, assignment):
    """(root status, activated node names) for one concrete per-node status assignment."""
    activated = []

    def run(name):
        node = tree.nodes[name]
        if node.kind is NodeKind.CONDITION:
            return S if eval_formula(node.predicate, values) else F
        if node.kind is NodeKind.ACTION:
            st = assignment[name]
            if st is not F:
                activated.append(name)
            return st
        if node.kind is NodeKind.PARALLEL:
            sts = [run(c) for c in node.children]
            return F if F in sts else (S if all(s is S for s in sts) else R)
        cont = S if node.kind is NodeKind.SEQUENCE else F
        for c in node.children:
            st = run(c)
            if st is not cont:
                return st
        return cont

    return run(tree.root), tuple(activated)


# -- random systems ------------------------------------------------------------

def state_bits(schema, tasks) -> int:
    return sum(math.ceil(math.log2(len(d))) for d in schema.values()) + len(tasks)


def random_system(rng: random.Random, max_bits: int = 12):
    """(tree, env, property) with at most ``max_bits`` bits of state."""
    # aim for a spread of sizes up to the budget, and skip single-leaf trees
    floor = rng.randint(0, max_bits // 2)
    while True:
        schema = random_schema(rng, max_vars=rng.randint(1, 5))
        tasks = tuple(f"T{i}" for i in range(rng.randint(1, 4)))
        tree = random_tree(rng, max_nodes=rng.randint(3, 12), tasks=tasks, schema=schema, max_depth=3)
        if (tree.tasks() and tree.nodes[tree.root].children
                and floor <= state_bits(schema, tree.tasks()) <= max_bits):
            break
    init, rules = {}, {}
    for var, dom in schema.items():
        vals = dom.values
        init[var] = tuple(rng.sample(vals, rng.randint(1, len(vals))))
        kind = rng.choice(["nondet", "frozen", "guarded"])
        if kind == "guarded":
            guards = []
            for _ in range(rng.randint(1, 2)):
                guards.append((random_predicate(rng, schema, 1), tuple(rng.sample(vals, rng.randint(1, len(vals))))))
            rules[var] = VarRule("guarded", tuple(guards))
        else:
            rules[var] = VarRule(kind)
    outcomes = {}
    for t in tree.tasks():
        outcomes[t] = frozenset(rng.sample([S, F, R], rng.randint(1, 3)))
    effects = {}
    if rng.random() < 0.5:
        t = rng.choice(tree.tasks())
        var = rng.choice(sorted(schema))
        effects[t] = {var: tuple(rng.sample(schema[var].values, rng.randint(1, len(schema[var].values))))}
    env = EnvSpec(init=init, rules=rules, outcomes=outcomes, effects=effects)
    prop = random_property(rng, schema, tree.tasks())
    return tree, env, prop


def random_property(rng: random.Random, schema, tasks) -> InvariantProperty:
    def atom():
        if rng.random() < 0.4:
            f = Flag(rng.choice(tasks))
            return Not(f) if rng.random() < 0.3 else f
        var = rng.choice(sorted(schema))
        return Cmp(var, rng.choice(["==", "!="]), rng.choice(schema[var].values))

    shape = rng.random()
    if shape < 0.5:
        formula = Implies(atom(), atom())
    elif shape < 0.8:
        formula = Or((atom(), atom(), atom()))
    else:
        formula = Not(And((atom(), atom())))
    return InvariantProperty("rand", formula)


# -- oracle model ------------------------------------------------------------------

def oracle_next_values(rule: VarRule, current, domain, valuation):
    if rule.kind == "nondet":
        return domain.values
    if rule.kind == "frozen":
        return (current,)
    for guard, values in rule.guards:
        if eval_formula(guard, valuation):
            return values
    return (current,)


def oracle_post(tree, env, pre: dict):
    """All post-tick valuations (including ``T.active`` flags) for blackboard ``pre``."""
    actions = [n for n in tree.nodes.values() if n.kind is NodeKind.ACTION]
    def allowed(task):
        return env.outcomes.get(task, env.outcomes.get("*", frozenset({S})))
    out = []
    for combo in itertools.product(*(sorted(allowed(a.task)) for a in actions)):
        assignment = {a.name: s for a, s in zip(actions, combo)}
        _, activated = oracle_tick(tree, pre, assignment)
        tasks = [tree.nodes[a].task for a in activated]
        writes = {}
        for t in tasks:
            for var, vals in env.effects.get(t, {}).items():
                writes[var] = vals  # later activations overwrite
        keys = sorted(writes)
        for vals in itertools.product(*(writes[k] for k in keys)):
            post = dict(pre)
            post.update(zip(keys, vals))
            for t in tree.tasks():
                post[f"{t}.active"] = int(t in tasks)
            out.append(post)
    return out


def _key(valuation: dict) -> tuple:
    return tuple(sorted(valuation.items()))


def oracle_reachable(tree, env) -> set[tuple]:
    """Naive fixpoint over explicit valuations (sorted item tuples)."""
    bb_vars = list(tree.schema)
    cache: dict[tuple, list] = {}

    def posts(combo):
        if combo not in cache:
            cache[combo] = [_key(p) for p in oracle_post(tree, env, dict(zip(bb_vars, combo)))]
        return cache[combo]

    reach = set()
    for combo in itertools.product(*(env.init[v] for v in bb_vars)):
        reach.update(posts(combo))
    while True:
        new = set(reach)
        for key in reach:
            val = dict(key)
            options = [oracle_next_values(env.rules[v], val[v], tree.schema[v], val) for v in bb_vars]
            for combo in itertools.product(*options):
                new.update(posts(combo))
        if new == reach:
            return reach
        reach = new


def oracle_holds(tree, env, prop) -> bool:
    return all(eval_formula(prop.formula, dict(k)) for k in oracle_reachable(tree, env))


# -- scenarios -------------------------------------------------------------------

def battery_scenario(seed: int):
    """Acceptance scenario whose battery crosses the low threshold mid-mission."""
    from dataclasses import replace

    from btweave.geo import GeoPoint
    from btweave.world_sim import builtin_scenario

    rng = random.Random(seed)
    base = builtin_scenario()
    threshold = rng.uniform(0.1, 0.4)
    crossing = rng.uniform(20.0, 200.0)  # seconds until batteryLow; shortest nominal mission is ~230 s
    start = GeoPoint(rng.uniform(-20, 60), rng.uniform(-30, 0))
    initial = replace(base.initial, position=start, heading=rng.uniform(-3.1, 3.1))
    return replace(base, seed=seed, initial=initial, battery_threshold=threshold,
                   drain_rate=(1.0 - threshold) / crossing)


# one boolean, one guarded action: the smallest interesting SMV model
SMALL_TREE = """# btdsl v1
tree hold {
  var batteryLow : 0..1;
  sequence root {
    condition low reads batteryLow == 1
    action keep : stationKeepingTask
  }
}
"""
SMALL_ENV = "init batteryLow = 0\nrule batteryLow nondet\noutcomes * = Running\n"


def small_ts():
    from btweave.bt_dsl import parse
    from btweave.formal_model import parse_env, translate
    return translate(parse(SMALL_TREE), parse_env(SMALL_ENV))
