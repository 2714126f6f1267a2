"""Propositional expressions over blackboard variables and action flags.

The same lexer and expression grammar back the BT DSL conditions, the
environment files and the invariant property files.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Iterator, Mapping, Union

Literal = Union[int, str]

TEMPORAL_OPERATORS = frozenset({"G", "F", "X", "U", "R", "W"})
_TRUE_WORDS = {"TRUE": 1, "true": 1, "FALSE": 0, "false": 0}


class ParseError(Exception):
    def __init__(self, message: str, line: int = 1, col: int = 1):
        super().__init__(f"{line}:{col}: {message}")
        self.message = message
        self.line = line
        self.col = col


class UnsupportedFragmentError(ParseError):
    pass


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Const:
    value: bool


@dataclass(frozen=True)
class Cmp:
    name: str
    op: str  # "==" or "!="
    value: Literal


@dataclass(frozen=True)
class Flag:
    task: str

    @property
    def name(self) -> str:
        return f"{self.task}.active"


@dataclass(frozen=True)
class Not:
    arg: "Expr"


@dataclass(frozen=True)
class And:
    args: tuple


@dataclass(frozen=True)
class Or:
    args: tuple


@dataclass(frozen=True)
class Implies:
    left: "Expr"
    right: "Expr"


Expr = Union[Const, Cmp, Flag, Not, And, Or, Implies]


def flag_name(task: str) -> str:
    return f"{task}.active"


def evaluate(expr: Expr, env: Mapping[str, Any]) -> bool:
    """Evaluate ``expr``; ``env`` maps variable names and ``Task.active`` keys."""
    if isinstance(expr, Cmp):
        eq = env[expr.name] == expr.value
        return eq if expr.op == "==" else not eq
    if isinstance(expr, Flag):
        return bool(env[expr.name])
    if isinstance(expr, And):
        return all(evaluate(a, env) for a in expr.args)
    if isinstance(expr, Or):
        return any(evaluate(a, env) for a in expr.args)
    if isinstance(expr, Not):
        return not evaluate(expr.arg, env)
    if isinstance(expr, Implies):
        return (not evaluate(expr.left, env)) or evaluate(expr.right, env)
    if isinstance(expr, Const):
        return expr.value
    raise TypeError(f"not an expression: {expr!r}")


def walk(expr: Expr) -> Iterator[Expr]:
    yield expr
    if isinstance(expr, (And, Or)):
        for a in expr.args:
            yield from walk(a)
    elif isinstance(expr, Not):
        yield from walk(expr.arg)
    elif isinstance(expr, Implies):
        yield from walk(expr.left)
        yield from walk(expr.right)


def atoms(expr: Expr) -> set[str]:
    """Names referenced by ``expr`` (variables and ``Task.active`` flags)."""
    return {e.name for e in walk(expr) if isinstance(e, (Cmp, Flag))}


def comparisons(expr: Expr) -> list[Cmp]:
    return [e for e in walk(expr) if isinstance(e, Cmp)]


# precedence: implies < or < and < not < atom
_PREC = {Implies: 1, Or: 2, And: 3, Not: 4}


def to_text(expr: Expr) -> str:
    return _fmt(expr, 0)


def _fmt(expr: Expr, parent: int) -> str:
    if isinstance(expr, Cmp):
        return f"{expr.name} {expr.op} {expr.value}"
    if isinstance(expr, Flag):
        return expr.name
    if isinstance(expr, Const):
        return "true" if expr.value else "false"
    prec = _PREC[type(expr)]
    if isinstance(expr, Not):
        text = "!" + _fmt(expr.arg, prec)
    elif isinstance(expr, Implies):
        # right associative
        text = f"{_fmt(expr.left, prec + 1)} -> {_fmt(expr.right, prec)}"
    else:
        sep = " && " if isinstance(expr, And) else " || "
        text = sep.join(_fmt(a, prec + 1) for a in expr.args)
    return f"({text})" if prec < parent else text


# ---------------------------------------------------------------------------
# Lexer


@dataclass(frozen=True)
class Token:
    kind: str  # ident | int | op | eof
    text: str
    line: int
    col: int


_OPS = ("->", "==", "!=", "&&", "||", "..", "{", "}", "(", ")", ":", ";", ",", "!", "=", ".", "-", "|", "*")


def tokenize(text: str) -> list[Token]:
    """Split ``text`` into tokens; ``#`` starts a comment running to end of line."""
    tokens: list[Token] = []
    i, line, col = 0, 1, 1
    n = len(text)
    while i < n:
        ch = text[i]
        if ch == "\n":
            i, line, col = i + 1, line + 1, 1
            continue
        if ch.isspace():
            i, col = i + 1, col + 1
            continue
        if ch == "#":
            while i < n and text[i] != "\n":
                i += 1
            continue
        if ch.isalpha() or ch == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            tokens.append(Token("ident", text[i:j], line, col))
            col += j - i
            i = j
            continue
        if ch.isdigit():
            j = i
            while j < n and text[j].isdigit():
                j += 1
            tokens.append(Token("int", text[i:j], line, col))
            col += j - i
            i = j
            continue
        for op in _OPS:
            if text.startswith(op, i):
                tokens.append(Token("op", op, line, col))
                i += len(op)
                col += len(op)
                break
        else:
            raise ParseError(f"unexpected character {ch!r}", line, col)
    tokens.append(Token("eof", "", line, col))
    return tokens


class TokenStream:
    def __init__(self, tokens: list[Token]):
        self.tokens = tokens
        self.pos = 0

    def peek(self, ahead: int = 0) -> Token:
        return self.tokens[min(self.pos + ahead, len(self.tokens) - 1)]

    def next(self) -> Token:
        tok = self.peek()
        if tok.kind != "eof":
            self.pos += 1
        return tok

    def at(self, text: str) -> bool:
        tok = self.peek()
        return tok.kind in ("op", "ident") and tok.text == text

    def accept(self, text: str) -> Token | None:
        if self.at(text):
            return self.next()
        return None

    def expect(self, text: str) -> Token:
        tok = self.peek()
        if not self.at(text):
            shown = tok.text or "end of input"
            raise ParseError(f"expected {text!r}, found {shown!r}", tok.line, tok.col)
        return self.next()

    def expect_ident(self, what: str = "identifier") -> Token:
        tok = self.peek()
        if tok.kind != "ident":
            shown = tok.text or "end of input"
            raise ParseError(f"expected {what}, found {shown!r}", tok.line, tok.col)
        return self.next()

    def expect_literal(self) -> tuple[Literal, Token]:
        tok = self.peek()
        if tok.kind == "int":
            self.next()
            return int(tok.text), tok
        if tok.kind == "op" and tok.text == "-" and self.peek(1).kind == "int":
            self.next()
            return -int(self.next().text), tok
        if tok.kind == "ident":
            self.next()
            return _TRUE_WORDS.get(tok.text, tok.text), tok
        shown = tok.text or "end of input"
        raise ParseError(f"expected a literal, found {shown!r}", tok.line, tok.col)


# ---------------------------------------------------------------------------
# Expression parser


class ExprParser:
    """Recursive descent over ``->``, ``||``, ``&&``, ``!`` and comparisons.

    ``allow_flags`` admits ``Task.active`` atoms, ``allow_implies`` the ``->``
    operator and ``temporal_check`` rejects nested temporal operators.
    """

    def __init__(self, ts: TokenStream, *, allow_flags=True, allow_implies=True, temporal_check=False):
        self.ts = ts
        self.allow_flags = allow_flags
        self.allow_implies = allow_implies
        self.temporal_check = temporal_check

    def parse(self) -> Expr:
        return self._implies()

    def _implies(self) -> Expr:
        left = self._or()
        # without implication the caller sees '->' as the next token
        if self.allow_implies and self.ts.at("->"):
            self.ts.next()
            return Implies(left, self._implies())
        return left

    def _or(self) -> Expr:
        args = [self._and()]
        while self.ts.accept("||") or self.ts.accept("|"):
            args.append(self._and())
        return args[0] if len(args) == 1 else Or(tuple(args))

    def _and(self) -> Expr:
        args = [self._not()]
        while self.ts.accept("&&"):
            args.append(self._not())
        return args[0] if len(args) == 1 else And(tuple(args))

    def _not(self) -> Expr:
        if self.ts.accept("!"):
            return Not(self._not())
        return self._primary()

    def _primary(self) -> Expr:
        ts = self.ts
        if ts.accept("("):
            inner = self._implies()
            ts.expect(")")
            return inner
        tok = ts.expect_ident("a variable or '('")
        if tok.text in _TRUE_WORDS and not self._cmp_follows():
            return Const(bool(_TRUE_WORDS[tok.text]))
        if self.temporal_check and tok.text in TEMPORAL_OPERATORS and not self._cmp_follows():
            raise UnsupportedFragmentError(
                f"temporal operator {tok.text!r} inside G is not supported", tok.line, tok.col)
        if ts.at("."):
            ts.next()
            ts.expect("active")
            if not self.allow_flags:
                raise ParseError(f"action flag {tok.text}.active is not allowed here", tok.line, tok.col)
            atom: Expr = Flag(tok.text)
            if self._cmp_follows():
                op = self._cmp_op()
                value, vtok = ts.expect_literal()
                if value not in (0, 1):
                    raise ParseError(f"flag {tok.text}.active compared with {value!r}", vtok.line, vtok.col)
                truthy = (value == 1) == (op == "==")
                return atom if truthy else Not(atom)
            return atom
        if self._cmp_follows():
            op = self._cmp_op()
            value, _ = ts.expect_literal()
            return Cmp(tok.text, op, value)
        return Cmp(tok.text, "==", 1)

    def _cmp_follows(self) -> bool:
        return self.ts.peek().kind == "op" and self.ts.peek().text in ("==", "!=", "=")

    def _cmp_op(self) -> str:
        op = self.ts.next().text
        return "==" if op == "=" else op


def parse_expr(text: str, **kwargs) -> Expr:
    ts = TokenStream(tokenize(text))
    expr = ExprParser(ts, **kwargs).parse()
    tok = ts.peek()
    if tok.kind != "eof":
        raise ParseError(f"unexpected {tok.text!r} after expression", tok.line, tok.col)
    return expr
