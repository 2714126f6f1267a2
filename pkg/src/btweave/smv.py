"""nuXmv ``MODULE main`` emission and a small interpreter for the emitted subset.

The emitted model is explicit: ``INIT`` lists the initial states and
``TRANS`` is a ``case`` over reachable source states whose branches are
disjunctions of ``next()`` valuations.
"""
from __future__ import annotations

import re
from collections import deque
from itertools import product
from typing import Iterable, Iterator

from .bt_core import Domain
from .expr import And, Cmp, Const, Expr, Flag, Implies, Not, Or
from .formal_model import DEFAULT_STATE_CAP, InvariantProperty, TransitionSystem, reachable


def smv_name(name: str) -> str:
    return name.replace(".", "_")


def _decl(dom: Domain) -> str:
    if dom.is_bool:
        return "boolean"
    if dom.is_enum:
        return "{" + ", ".join(dom.symbols) + "}"
    return f"{dom.lo}..{dom.hi}"


def _value(dom: Domain, value) -> str:
    if dom.is_bool:
        return "TRUE" if value else "FALSE"
    return str(value)


def formula_to_smv(expr: Expr, domains: dict[str, Domain]) -> str:
    if isinstance(expr, Cmp):
        op = "=" if expr.op == "==" else "!="
        return f"({smv_name(expr.name)} {op} {_value(domains[expr.name], expr.value)})"
    if isinstance(expr, Flag):
        return smv_name(expr.name)
    if isinstance(expr, Const):
        return "TRUE" if expr.value else "FALSE"
    if isinstance(expr, Not):
        return f"!{formula_to_smv(expr.arg, domains)}"
    if isinstance(expr, Implies):
        return f"({formula_to_smv(expr.left, domains)} -> {formula_to_smv(expr.right, domains)})"
    sep = " & " if isinstance(expr, And) else " | "
    return "(" + sep.join(formula_to_smv(a, domains) for a in expr.args) + ")"


def emit_smv(ts: TransitionSystem, props: Iterable[InvariantProperty] = (),
             cap: int = DEFAULT_STATE_CAP) -> str:
    domains = dict(ts.variables)
    names = ts.names

    def conj(state, wrap=None) -> str:
        parts = []
        for (name, dom), value in zip(ts.variables, state):
            lhs = smv_name(name) if wrap is None else f"{wrap}({smv_name(name)})"
            if dom.is_bool:
                parts.append(lhs if value else f"!{lhs}")
            else:
                parts.append(f"{lhs} = {_value(dom, value)}")
        return "(" + " & ".join(parts) + ")"

    out = [f"-- {ts.tree.name}: explicit-state encoding, {len(names)} variables", "MODULE main", "VAR"]
    for name, dom in ts.variables:
        out.append(f"  {smv_name(name)} : {_decl(dom)};")
    out.append("INIT")
    out.append("  " + "\n  | ".join(conj(s) for s in ts.initial) + ";")
    out.append("TRANS")
    out.append("  case")
    for src in reachable(ts, cap):
        targets = "\n      | ".join(conj(t, "next") for t in ts.successors(src))
        out.append(f"    {conj(src)} :\n        {targets};")
    out.append("    TRUE : TRUE;")
    out.append("  esac;")
    for prop in props:
        out.append(f"-- {prop.name}")
        out.append(f"LTLSPEC G {formula_to_smv(prop.formula, domains)}")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# Interpreter for the emitted subset


class SmvError(Exception):
    pass


_TOKEN = re.compile(r"\s*(?:(--[^\n]*)|(\d+)|([A-Za-z_][A-Za-z0-9_$#]*)|(:=|\.\.|->|!=|[=&|!():;{},]))")


def _tokens(text: str) -> list[str]:
    toks, pos = [], 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise SmvError(f"bad character at offset {pos}: {text[pos]!r}")
        pos = m.end()
        if m.group(1):
            continue
        toks.append(m.group(2) or m.group(3) or m.group(4))
    return toks


class SmvModel:
    """Parsed ``MODULE main``: variable domains, INIT, TRANS and LTLSPECs."""

    def __init__(self, text: str):
        self.toks = _tokens(text)
        self.i = 0
        self.domains: dict[str, tuple] = {}
        self.init = ("const", 1)
        self.trans = ("const", 1)
        self.specs: list = []
        self._parse()

    # -- parsing --------------------------------------------------------
    def _peek(self):
        return self.toks[self.i] if self.i < len(self.toks) else None

    def _next(self):
        tok = self._peek()
        if tok is None:
            raise SmvError("unexpected end of model")
        self.i += 1
        return tok

    def _expect(self, tok):
        got = self._next()
        if got != tok:
            raise SmvError(f"expected {tok!r}, found {got!r}")

    def _parse(self):
        self._expect("MODULE")
        self._expect("main")
        while self._peek() is not None:
            section = self._next()
            if section == "VAR":
                while self._peek() not in ("INIT", "TRANS", "LTLSPEC", None):
                    name = self._next()
                    self._expect(":")
                    self.domains[name] = self._domain()
                    self._expect(";")
            elif section in ("INIT", "TRANS"):
                expr = self._expr()
                if self._peek() == ";":
                    self._next()
                if section == "INIT":
                    self.init = expr
                else:
                    self.trans = expr
            elif section == "LTLSPEC":
                self._expect("G")
                self.specs.append(self._expr())
                if self._peek() == ";":
                    self._next()
            else:
                raise SmvError(f"unsupported section {section!r}")

    def _domain(self) -> tuple:
        tok = self._next()
        if tok == "boolean":
            return (0, 1)
        if tok == "{":
            vals = [self._next()]
            while self._peek() == ",":
                self._next()
                vals.append(self._next())
            self._expect("}")
            return tuple(int(v) if v.isdigit() else v for v in vals)
        lo = int(tok)
        self._expect("..")
        return tuple(range(lo, int(self._next()) + 1))

    def _expr(self):
        left = self._or()
        if self._peek() == "->":
            self._next()
            return ("implies", left, self._expr())
        return left

    def _or(self):
        args = [self._and()]
        while self._peek() == "|":
            self._next()
            args.append(self._and())
        return args[0] if len(args) == 1 else ("or", *args)

    def _and(self):
        args = [self._cmp()]
        while self._peek() == "&":
            self._next()
            args.append(self._cmp())
        return args[0] if len(args) == 1 else ("and", *args)

    def _cmp(self):
        left = self._unary()
        if self._peek() in ("=", "!="):
            op = "eq" if self._next() == "=" else "neq"
            return (op, left, self._unary())
        return left

    def _unary(self):
        tok = self._next()
        if tok == "!":
            return ("not", self._unary())
        if tok == "(":
            inner = self._expr()
            self._expect(")")
            return inner
        if tok == "case":
            arms = []
            while self._peek() != "esac":
                guard = self._expr()
                self._expect(":")
                body = self._expr()
                self._expect(";")
                arms.append((guard, body))
            self._next()
            return ("case", arms)
        if tok == "next":
            self._expect("(")
            name = self._next()
            self._expect(")")
            return ("var", name, True)
        if tok == "TRUE":
            return ("const", 1)
        if tok == "FALSE":
            return ("const", 0)
        if tok.isdigit():
            return ("const", int(tok))
        if tok in self.domains:
            return ("var", tok, False)
        return ("const", tok)  # enum literal

    # -- evaluation -----------------------------------------------------
    def _value(self, term, env):
        if term[0] == "const":
            return term[1]
        if term[0] == "var":
            return env.get((term[1], term[2]), _UNBOUND)
        return int(self._eval(term, env))

    def _eval(self, e, env) -> bool:
        op = e[0]
        if op == "and":
            return all(self._eval(a, env) for a in e[1:])
        if op == "or":
            return any(self._eval(a, env) for a in e[1:])
        if op == "not":
            return not self._eval(e[1], env)
        if op == "implies":
            return (not self._eval(e[1], env)) or self._eval(e[2], env)
        if op in ("eq", "neq"):
            a, b = self._value(e[1], env), self._value(e[2], env)
            if a is _UNBOUND or b is _UNBOUND:
                raise _Unbound()
            return (a == b) == (op == "eq")
        if op == "case":
            for guard, body in e[1]:
                if self._eval(guard, env):
                    return self._eval(body, env)
            raise SmvError("case without a matching arm")
        value = self._value(e, env)
        if value is _UNBOUND:
            raise _Unbound()
        return bool(value)

    def _free(self, e, env, out: set):
        if e[0] == "var":
            if (e[1], e[2]) not in env:
                out.add((e[1], e[2]))
        elif e[0] == "case":
            for g, b in e[1]:
                self._free(g, env, out)
                self._free(b, env, out)
        elif e[0] != "const":
            for a in e[1:]:
                self._free(a, env, out)

    def _solve(self, e, env) -> Iterator[dict]:
        """Extensions of ``env`` binding free variables so that ``e`` holds."""
        op = e[0]
        if op == "or":
            for a in e[1:]:
                yield from self._solve(a, env)
            return
        if op == "and":
            def chain(args, env):
                if not args:
                    yield env
                    return
                for env2 in self._solve(args[0], env):
                    yield from chain(args[1:], env2)
            yield from chain(e[1:], env)
            return
        if op == "case":
            # guards only read current-state variables in the emitted subset
            for guard, body in e[1]:
                if self._holds(guard, env):
                    yield from self._solve(body, env)
                    return
            return
        if op == "eq":
            for var, other in ((e[1], e[2]), (e[2], e[1])):
                if var[0] == "var" and (var[1], var[2]) not in env:
                    val = self._value(other, env)
                    if val is not _UNBOUND:
                        if val in self.domains[var[1]]:
                            yield {**env, (var[1], var[2]): val}
                        return
        free: set = set()
        self._free(e, env, free)
        keys = sorted(free)
        for combo in product(*(self.domains[k[0]] for k in keys)):
            env2 = {**env, **dict(zip(keys, combo))}
            if self._eval(e, env2):
                yield env2

    def _holds(self, e, env) -> bool:
        try:
            return self._eval(e, env)
        except _Unbound:
            return False

    def _complete(self, envs, is_next: bool) -> set[tuple]:
        names = list(self.domains)
        out = set()
        for env in envs:
            missing = [n for n in names if (n, is_next) not in env]
            for combo in product(*(self.domains[n] for n in missing)):
                full = {**env, **{(n, is_next): v for n, v in zip(missing, combo)}}
                out.add(tuple(full[(n, is_next)] for n in names))
        return out

    def initial_states(self) -> set[tuple]:
        return self._complete(self._solve(self.init, {}), False)

    def successors(self, state: tuple) -> set[tuple]:
        env = {(n, False): v for n, v in zip(self.domains, state)}
        return self._complete(self._solve(self.trans, env), True)

    def reachable(self) -> set[tuple]:
        seen = set(self.initial_states())
        queue = deque(sorted(seen, key=repr))
        while queue:
            s = queue.popleft()
            for t in self.successors(s):
                if t not in seen:
                    seen.add(t)
                    queue.append(t)
        return seen

    def spec_holds(self, index: int, states: Iterable[tuple] | None = None) -> bool:
        states = self.reachable() if states is None else states
        spec = self.specs[index]
        return all(self._eval(spec, {(n, False): v for n, v in zip(self.domains, s)}) for s in states)


class _Unbound(Exception):
    pass


_UNBOUND = object()
