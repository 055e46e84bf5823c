"""The Splunk search subset produced by the rule compiler.

Atoms are ``Field="pattern"`` and ``Field IN ("p1", "p2")``. Conjunction
is juxtaposition (an explicit ``AND`` is also accepted), disjunction is
``OR`` and negation is ``NOT``. When reading a query, NOT binds tightest,
then OR, then AND, as in Splunk itself. The renderer parenthesises every
OR operand, every NOT operand and every OR nested in a conjunction, so
rendered text never depends on precedence.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Union

from . import kernels
from .errors import QuerySyntax

FIELD_RE = re.compile(r"[A-Za-z_][\w.\-]*")
KEYWORDS = frozenset({"AND", "OR", "NOT", "IN"})


@dataclass(frozen=True)
class FieldEquals:
    field: str
    pattern: str


@dataclass(frozen=True)
class FieldIn:
    field: str
    patterns: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "patterns", tuple(self.patterns))
        if not self.patterns:
            raise ValueError("IN needs at least one pattern")


@dataclass(frozen=True)
class And:
    items: tuple["Node", ...]


@dataclass(frozen=True)
class Or:
    items: tuple["Node", ...]


@dataclass(frozen=True)
class Not:
    item: "Node"


Node = Union[FieldEquals, FieldIn, And, Or, Not]


def conj(items: Iterable[Node]) -> Node:
    """Flattened conjunction; a single item is returned as is."""
    flat: list[Node] = []
    for it in items:
        flat.extend(it.items if isinstance(it, And) else (it,))
    if not flat:
        raise ValueError("empty conjunction")
    return flat[0] if len(flat) == 1 else And(tuple(flat))


def disj(items: Iterable[Node]) -> Node:
    flat: list[Node] = []
    for it in items:
        flat.extend(it.items if isinstance(it, Or) else (it,))
    if not flat:
        raise ValueError("empty disjunction")
    return flat[0] if len(flat) == 1 else Or(tuple(flat))


@dataclass(frozen=True)
class SplunkQuery:
    text: str
    ast: Node

    @classmethod
    def from_ast(cls, ast: Node) -> "SplunkQuery":
        return cls(render_query(ast), ast)


# -- rendering ------------------------------------------------------------------------

def quote(value: str) -> str:
    return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'


def render_query(node: Node) -> str:
    if isinstance(node, FieldEquals):
        return f"{node.field}={quote(node.pattern)}"
    if isinstance(node, FieldIn):
        return f"{node.field} IN (" + ", ".join(quote(p) for p in node.patterns) + ")"
    if isinstance(node, And):
        return " ".join(f"({render_query(i)})" if isinstance(i, Or) else render_query(i) for i in node.items)
    if isinstance(node, Or):
        return " OR ".join(f"({render_query(i)})" for i in node.items)
    if isinstance(node, Not):
        return f"NOT ({render_query(node.item)})"
    raise TypeError(f"not a query node: {node!r}")


# -- parsing ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(r'\s+|(?P<punct>[()=,])|(?P<str>"(?:[^"\\]|\\.)*")|(?P<word>[^\s()=,"]+)|(?P<bad>")')


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    out = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m.group("punct"):
            out.append(("punct", m.group(), pos))
        elif m.group("str"):
            out.append(("str", re.sub(r"\\(.)", r"\1", m.group()[1:-1], flags=re.S), pos))
        elif m.group("word"):
            out.append(("word", m.group(), pos))
        elif m.group("bad"):
            raise QuerySyntax(pos, "unterminated string")
        pos = m.end()
    out.append(("eof", "", len(text)))
    return out


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self) -> tuple[str, str, int]:
        return self.toks[self.i]

    def take(self) -> tuple[str, str, int]:
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect(self, kind: str, value: str | None = None) -> tuple[str, str, int]:
        tok = self.take()
        if tok[0] != kind or (value is not None and tok[1] != value):
            want = value or kind
            raise QuerySyntax(tok[2], f"expected {want!r}, found {tok[1] or 'end of query'!r}")
        return tok

    def starts_operand(self) -> bool:
        kind, value, _ = self.peek()
        return (kind == "punct" and value == "(") or (kind == "word" and value not in ("OR", "AND", "IN"))

    def parse(self) -> Node:
        node = self.and_expr()
        kind, value, pos = self.peek()
        if kind != "eof":
            raise QuerySyntax(pos, f"unexpected {value!r}")
        return node

    def and_expr(self) -> Node:
        items = [self.or_expr()]
        while True:
            kind, value, _ = self.peek()
            if kind == "word" and value == "AND":
                self.take()
                items.append(self.or_expr())
            elif self.starts_operand():
                items.append(self.or_expr())
            else:
                return conj(items)

    def or_expr(self) -> Node:
        items = [self.not_expr()]
        while self.peek()[:2] == ("word", "OR"):
            self.take()
            items.append(self.not_expr())
        return disj(items)

    def not_expr(self) -> Node:
        if self.peek()[:2] == ("word", "NOT"):
            self.take()
            return Not(self.not_expr())
        return self.primary()

    def primary(self) -> Node:
        kind, value, pos = self.take()
        if kind == "punct" and value == "(":
            node = self.and_expr()
            self.expect("punct", ")")
            return node
        if kind != "word" or value in KEYWORDS:
            raise QuerySyntax(pos, f"expected a field name, found {value or 'end of query'!r}")
        if not FIELD_RE.fullmatch(value):
            raise QuerySyntax(pos, f"bad field name {value!r}")
        nxt = self.take()
        if nxt[:2] == ("punct", "="):
            return FieldEquals(value, self.expect("str")[1])
        if nxt[:2] == ("word", "IN"):
            self.expect("punct", "(")
            patterns = [self.expect("str")[1]]
            while self.peek()[:2] == ("punct", ","):
                self.take()
                patterns.append(self.expect("str")[1])
            self.expect("punct", ")")
            return FieldIn(value, tuple(patterns))
        raise QuerySyntax(nxt[2], f"expected '=' or IN after field {value!r}")


def parse_splunk_query(text: str) -> Node:
    return _Parser(text).parse()


# -- evaluation ----------------------------------------------------------------------

Predicate = Callable[[Mapping[str, str]], bool]


def compile_predicate(node: Node) -> Predicate:
    """Closure evaluating ``node`` over a field mapping.

    Values compare case-insensitively; field names are case-sensitive;
    ``*`` matches any run and ``?`` one character. A missing field makes
    the atom false.
    """
    match = kernels.wildcard_match
    if isinstance(node, FieldEquals):
        f, p = node.field, node.pattern.lower()

        def atom(fields):
            v = fields.get(f)
            return v is not None and match(p, v.lower())

        return atom
    if isinstance(node, FieldIn):
        f, ps = node.field, tuple(p.lower() for p in node.patterns)

        def member(fields):
            v = fields.get(f)
            if v is None:
                return False
            lv = v.lower()
            return any(match(p, lv) for p in ps)

        return member
    if isinstance(node, And):
        subs = [compile_predicate(i) for i in node.items]
        return lambda fields: all(s(fields) for s in subs)
    if isinstance(node, Or):
        subs = [compile_predicate(i) for i in node.items]
        return lambda fields: any(s(fields) for s in subs)
    if isinstance(node, Not):
        sub = compile_predicate(node.item)
        return lambda fields: not sub(fields)
    raise TypeError(f"not a query node: {node!r}")


def evaluate(node: Node, fields: Mapping[str, str]) -> bool:
    return compile_predicate(node)(fields)
