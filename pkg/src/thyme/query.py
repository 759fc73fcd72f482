"""Propositional tag queries: parsing, DNF conversion, and matching.

Subscriptions carry a propositional formula over tags, e.g. ``A & (B | C)``.
The formula is converted to disjunctive normal form; each conjunction gets a
designated *key* (one of its non-negated literals, picked at random) that
decides which broker cell stores it in the geographic materialization.

Grammar (tightest binding first)::

    expr    := or
    or      := and ('|' and)*
    and     := unary ('&' unary)*
    unary   := '!' unary | '(' or ')' | TAG
    TAG     := [A-Za-z0-9_#@.-]+
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Union

__all__ = [
    "Query",
    "Conjunction",
    "DnfQuery",
    "QuerySyntaxError",
    "DnfOverflowError",
    "UnkeyableClauseError",
    "parse",
    "to_dnf",
]

DEFAULT_MAX_CLAUSES = 64

_TOKEN_RE = re.compile(r"\s*(?:([A-Za-z0-9_#@.\-]+)|([&|!()]))")


class QuerySyntaxError(ValueError):
    """Malformed query text; ``position`` is the offending character offset."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class DnfOverflowError(ValueError):
    """DNF expansion exceeded the clause bound."""


class UnkeyableClauseError(ValueError):
    """A conjunction has only negated literals, so no key can be chosen."""


# --- abstract syntax ---------------------------------------------------------

@dataclass(frozen=True)
class Lit:
    tag: str


@dataclass(frozen=True)
class Not:
    child: "Node"


@dataclass(frozen=True)
class And:
    children: tuple["Node", ...]


@dataclass(frozen=True)
class Or:
    children: tuple["Node", ...]


Node = Union[Lit, Not, And, Or]


@dataclass(frozen=True)
class Query:
    """Parsed query: an AST over AND/OR/NOT with tag literals."""

    root: Node
    text: str

    def evaluate(self, tags) -> bool:
        """Evaluate the formula directly against a tag set."""
        return _eval(self.root, frozenset(tags))

    def literals(self) -> frozenset:
        return frozenset(_literals(self.root))


def _eval(node: Node, tags: frozenset) -> bool:
    if isinstance(node, Lit):
        return node.tag in tags
    if isinstance(node, Not):
        return not _eval(node.child, tags)
    if isinstance(node, And):
        return all(_eval(c, tags) for c in node.children)
    return any(_eval(c, tags) for c in node.children)


def _literals(node: Node):
    if isinstance(node, Lit):
        yield node.tag
    elif isinstance(node, Not):
        yield from _literals(node.child)
    else:
        for c in node.children:
            yield from _literals(c)


# --- parser ------------------------------------------------------------------

class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0
        self.tok = None
        self.tok_pos = 0
        self._advance()

    def _advance(self):
        m = _TOKEN_RE.match(self.text, self.pos)
        if m is None:
            rest = self.text[self.pos:].strip()
            if rest:
                raise QuerySyntaxError(f"unexpected character {rest[0]!r}", self.pos)
            self.tok = None
            self.tok_pos = len(self.text)
            return
        self.tok = m.group(1) or m.group(2)
        self.tok_pos = m.start(1) if m.group(1) else m.start(2)
        self.pos = m.end()

    def parse(self) -> Node:
        node = self._or()
        if self.tok is not None:
            raise QuerySyntaxError(f"unexpected token {self.tok!r}", self.tok_pos)
        return node

    def _or(self) -> Node:
        parts = [self._and()]
        while self.tok == "|":
            self._advance()
            parts.append(self._and())
        return parts[0] if len(parts) == 1 else Or(tuple(parts))

    def _and(self) -> Node:
        parts = [self._unary()]
        while self.tok == "&":
            self._advance()
            parts.append(self._unary())
        return parts[0] if len(parts) == 1 else And(tuple(parts))

    def _unary(self) -> Node:
        if self.tok == "!":
            self._advance()
            return Not(self._unary())
        if self.tok == "(":
            self._advance()
            node = self._or()
            if self.tok != ")":
                raise QuerySyntaxError("expected ')'", self.tok_pos)
            self._advance()
            return node
        if self.tok is None or self.tok in "&|)":
            raise QuerySyntaxError("expected a tag, '!' or '('", self.tok_pos)
        tag = self.tok
        self._advance()
        return Lit(tag)


def parse(text: str) -> Query:
    """Parse query text into an AST.

    Raises QuerySyntaxError (with position) on malformed input.
    """
    if not text or not text.strip():
        raise QuerySyntaxError("empty query", 0)
    return Query(root=_Parser(text).parse(), text=text)


# --- DNF ---------------------------------------------------------------------

@dataclass(frozen=True)
class Conjunction:
    """One AND-clause of a DNF query plus its designated key literal."""

    positives: frozenset
    negatives: frozenset
    key: str

    def matches(self, tags) -> bool:
        """True iff every positive literal is present and no negative one is."""
        return self.positives <= tags and not (self.negatives & tags)

    def wire_size(self) -> int:
        # 1-byte literal count, per literal: 1-byte sign + 1-byte length + text
        size = 1
        for lit in self.positives | self.negatives:
            size += 2 + len(lit.encode())
        return size


@dataclass(frozen=True)
class DnfQuery:
    clauses: tuple[Conjunction, ...]

    def matches(self, tags) -> bool:
        tags = frozenset(tags)
        return any(c.matches(tags) for c in self.clauses)

    def keys(self) -> tuple[str, ...]:
        return tuple(c.key for c in self.clauses)

    def wire_size(self) -> int:
        return 1 + sum(c.wire_size() for c in self.clauses)


def _nnf(node: Node, negate: bool) -> Node:
    """Push negations down to literals."""
    if isinstance(node, Lit):
        return Not(node) if negate else node
    if isinstance(node, Not):
        return _nnf(node.child, not negate)
    children = tuple(_nnf(c, negate) for c in node.children)
    if isinstance(node, And):
        return Or(children) if negate else And(children)
    return And(children) if negate else Or(children)


def _expand(node: Node, max_clauses: int) -> list[tuple[frozenset, frozenset]]:
    """Distribute AND over OR. Returns (positives, negatives) pairs in a
    deterministic expansion order."""
    if isinstance(node, Lit):
        return [(frozenset([node.tag]), frozenset())]
    if isinstance(node, Not):
        # In NNF, Not only wraps literals.
        return [(frozenset(), frozenset([node.child.tag]))]
    if isinstance(node, Or):
        out = []
        for c in node.children:
            out.extend(_expand(c, max_clauses))
            if len(out) > max_clauses:
                raise DnfOverflowError(
                    f"DNF expansion exceeds {max_clauses} clauses")
        return out
    # And: cross product of the children's clause lists
    out = [(frozenset(), frozenset())]
    for c in node.children:
        branch = _expand(c, max_clauses)
        nxt = []
        for pos, neg in out:
            for bpos, bneg in branch:
                nxt.append((pos | bpos, neg | bneg))
                if len(nxt) > max_clauses:
                    raise DnfOverflowError(
                        f"DNF expansion exceeds {max_clauses} clauses")
        out = nxt
    return out


def to_dnf(query: Query, rng, max_clauses: int = DEFAULT_MAX_CLAUSES) -> DnfQuery:
    """Convert a query to DNF and pick each clause's key with ``rng``.

    Duplicate clauses and contradictions (p & !p) are dropped. Keys are chosen
    uniformly at random among each clause's non-negated literals, so the result
    is deterministic for a given (query text, rng state).
    """
    raw = _expand(_nnf(query.root, False), max_clauses)
    seen = set()
    clauses = []
    for pos, neg in raw:
        if pos & neg:
            continue  # contradiction, can never match
        ident = (pos, neg)
        if ident in seen:
            continue
        seen.add(ident)
        if not pos:
            raise UnkeyableClauseError(
                "conjunction with only negated literals cannot be keyed: "
                + " & ".join("!" + t for t in sorted(neg)))
        key = rng.choice(sorted(pos))
        clauses.append(Conjunction(pos, neg, key))
    if not clauses:
        raise UnkeyableClauseError("query is unsatisfiable")
    return DnfQuery(tuple(clauses))
