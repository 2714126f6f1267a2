"""Text format for behavior trees (``.bt`` files).

Grammar (``# btdsl v1``)::

    tree  := "tree" IDENT "{" decl* node "}"
    decl  := "var" IDENT ":" (INT ".." INT | "bool" | "{" IDENT ("," IDENT)* "}") ";"
    node  := ("selector" | "sequence" | "parallel") IDENT "{" node+ "}"
           | "condition" IDENT "reads" predicate
           | "action" IDENT [":" TASK]

Predicates are comparisons ``IDENT (== | !=) literal`` joined by ``&&`` and
``||`` (``!`` and parentheses are accepted too).
"""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

from .bt_core import BehaviorTreeDef, Domain, Node, NodeKind, structural_problems
from .expr import (ExprParser, Flag, Implies, ParseError, TokenStream, to_text, tokenize,
                   walk)

HEADER = "# btdsl v1"
COMPOSITES = {"selector": NodeKind.SELECTOR, "sequence": NodeKind.SEQUENCE, "parallel": NodeKind.PARALLEL}
KEYWORDS = {"tree", "var", "reads", "condition", "action", *COMPOSITES}
_PHASES = ("m_search", "m_tracking", "m_steering", "m_station", "m_surface")


def mission_schema() -> dict[str, Domain]:
    """Blackboard of the inspection mission; used by trees that declare no variables."""
    schema = {v: Domain.boolean() for v in ("batteryLow", "restrictedZone", "pipeLost", "trackingDone",
                                            "coverageDone")}
    schema["status"] = Domain.enum(*_PHASES)
    return schema


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    message: str
    line: int = 1
    col: int = 1

    def __str__(self) -> str:
        return f"{self.line}:{self.col}: {self.severity}: {self.message}"


class DslError(Exception):
    def __init__(self, diagnostics: list[Diagnostic]):
        self.diagnostics = diagnostics
        super().__init__("\n".join(str(d) for d in diagnostics))


class _Parser:
    def __init__(self, text: str):
        self.ts = TokenStream(tokenize(text))
        self.nodes: dict[str, Node] = {}
        self.spans: dict[str, tuple[int, int]] = {}
        self.schema: dict[str, Domain] = {}
        self.errors: list[Diagnostic] = []

    def parse(self) -> BehaviorTreeDef:
        ts = self.ts
        ts.expect("tree")
        name = ts.expect_ident("tree name").text
        ts.expect("{")
        if not ts.at("var"):
            self.schema = mission_schema()
        while ts.at("var"):
            self._decl()
        root = self._node()
        ts.expect("}")
        tok = ts.peek()
        if tok.kind != "eof":
            raise ParseError(f"unexpected {tok.text!r} after tree", tok.line, tok.col)
        return BehaviorTreeDef(name, root, self.nodes, self.schema, self.spans)

    def _decl(self) -> None:
        ts = self.ts
        ts.expect("var")
        tok = ts.expect_ident("variable name")
        ts.expect(":")
        if ts.accept("{"):
            symbols = [ts.expect_ident("enum literal").text]
            while ts.accept(","):
                symbols.append(ts.expect_ident("enum literal").text)
            ts.expect("}")
            if len(set(symbols)) != len(symbols):
                raise ParseError(f"duplicate literal in domain of {tok.text!r}", tok.line, tok.col)
            dom = Domain.enum(*symbols)
        elif ts.accept("bool"):
            dom = Domain.boolean()
        else:
            lo, lo_tok = ts.expect_literal()
            ts.expect("..")
            hi, _ = ts.expect_literal()
            if not isinstance(lo, int) or not isinstance(hi, int) or lo > hi:
                raise ParseError(f"bad range for {tok.text!r}", lo_tok.line, lo_tok.col)
            dom = Domain(lo, hi)
        ts.expect(";")
        if tok.text in self.schema:
            self.errors.append(Diagnostic("error", f"duplicate variable {tok.text!r}", tok.line, tok.col))
        self.schema[tok.text] = dom

    def _name(self, what: str):
        tok = self.ts.expect_ident(f"{what} name")
        if tok.text in KEYWORDS:
            raise ParseError(f"keyword {tok.text!r} used as {what} name", tok.line, tok.col)
        return tok

    def _register(self, tok, node: Node) -> None:
        if tok.text in self.nodes:
            raise ParseError(f"duplicate node name {tok.text!r}", tok.line, tok.col)
        self.nodes[tok.text] = node
        self.spans[tok.text] = (tok.line, tok.col)

    def _node(self) -> str:
        ts = self.ts
        kw = ts.peek()
        if kw.kind == "ident" and kw.text in COMPOSITES:
            ts.next()
            tok = self._name(kw.text)
            # register before children so duplicates are reported at the later span
            self._register(tok, Node(tok.text, COMPOSITES[kw.text]))
            ts.expect("{")
            children = []
            while not ts.at("}"):
                if ts.peek().kind == "eof":
                    raise ParseError(f"unterminated {kw.text} {tok.text!r}", tok.line, tok.col)
                children.append(self._node())
            ts.expect("}")
            self.nodes[tok.text] = Node(tok.text, COMPOSITES[kw.text], tuple(children))
            return tok.text
        if ts.accept("condition"):
            tok = self._name("condition")
            ts.expect("reads")
            pred = ExprParser(ts, allow_flags=False, allow_implies=False).parse()
            self._register(tok, Node(tok.text, NodeKind.CONDITION, predicate=pred))
            return tok.text
        if ts.accept("action"):
            tok = self._name("action")
            task = tok.text
            if ts.accept(":"):
                task = ts.expect_ident("task id").text
            self._register(tok, Node(tok.text, NodeKind.ACTION, task=task))
            return tok.text
        shown = kw.text or "end of input"
        raise ParseError(f"expected a node keyword, found {shown!r}", kw.line, kw.col)


def parse_with_diagnostics(text) -> tuple[BehaviorTreeDef | None, list[Diagnostic]]:
    """Parse without raising; returns the tree (or None) and all diagnostics."""
    diags: list[Diagnostic] = []
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8")
        except UnicodeDecodeError as exc:
            return None, [Diagnostic("error", f"input is not UTF-8 (byte {exc.start})", 1, 1)]
    first = text.splitlines()[0].strip() if text.strip() else ""
    if first != HEADER:
        diags.append(Diagnostic("warning", f"missing {HEADER!r} header line", 1, 1))
    parser = None
    try:
        parser = _Parser(text)
        tree = parser.parse()
    except ParseError as exc:
        line, col = _clamp_span(text, exc.line, exc.col)
        earlier = parser.errors if parser else []
        return None, diags + earlier + [Diagnostic("error", exc.message, line, col)]
    except RecursionError:
        return None, diags + [Diagnostic("error", "nesting too deep", 1, 1)]
    diags += parser.errors
    diags += validate(tree)
    if any(d.severity == "error" for d in diags):
        return None, diags
    return tree, diags


def _clamp_span(text: str, line: int, col: int) -> tuple[int, int]:
    lines = text.split("\n")
    line = max(1, min(line, len(lines)))
    col = max(1, min(col, len(lines[line - 1]) + 1))
    return line, col


def parse(text) -> BehaviorTreeDef:
    tree, diags = parse_with_diagnostics(text)
    if tree is None:
        raise DslError([d for d in diags if d.severity == "error"])
    return tree


def validate(tree: BehaviorTreeDef) -> list[Diagnostic]:
    diags = []
    for name, message in structural_problems(tree):
        line, col = tree.spans.get(name, (1, 1))
        diags.append(Diagnostic("error", message, line, col))
    for node in tree.nodes.values():
        if node.predicate is None:
            continue
        line, col = tree.spans.get(node.name, (1, 1))
        for e in walk(node.predicate):
            if isinstance(e, (Flag, Implies)):
                diags.append(Diagnostic("error", f"condition {node.name!r} uses {type(e).__name__.lower()}, "
                                                 "which conditions cannot read", line, col))
    return diags


def serialize(tree: BehaviorTreeDef) -> str:
    out = [HEADER, f"tree {tree.name} {{"]
    for name, dom in tree.schema.items():
        out.append(f"  var {name} : {dom.text()};")
    if tree.schema:
        out.append("")

    def emit(name: str, depth: int) -> None:
        node = tree.nodes[name]
        pad = "  " * depth
        if node.kind.composite:
            out.append(f"{pad}{node.kind.value} {name} {{")
            for child in node.children:
                emit(child, depth + 1)
            out.append(f"{pad}}}")
        elif node.kind is NodeKind.CONDITION:
            out.append(f"{pad}condition {name} reads {to_text(node.predicate)}")
        elif node.task == name:
            out.append(f"{pad}action {name}")
        else:
            out.append(f"{pad}action {name} : {node.task}")

    emit(tree.root, 1)
    out.append("}")
    return "\n".join(out) + "\n"


def load_resource(name: str) -> str:
    return resources.files("btweave").joinpath("data", name).read_text(encoding="utf-8")


def builtin_inspection_tree() -> BehaviorTreeDef:
    return parse(load_resource("inspection.bt"))
