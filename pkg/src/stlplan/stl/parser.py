"""Recursive-descent parser for the ASCII formula syntax.

    formula := implies
    implies := or ("->" implies)?
    or      := and ("|" and)*
    and     := until ("&" until)*
    until   := unary ("U" interval unary)?
    unary   := "!" unary | "G" interval unary | "F" interval unary
             | "X" unary | "(" formula ")" | IDENT | "true" | "false"
    interval := "[" INT "," INT "]"
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping

from .ast import (And, Eventually, FalseF, Formula, Globally, Implies, Interval,
                  IntervalError, Next, Not, Or, Predicate, TrueF, Until)

KEYWORDS = {"G", "F", "X", "U", "true", "false"}


class SpecSyntaxError(ValueError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"{message} (line {line}, column {column})")
        self.line = line
        self.column = column


class UnboundPredicateError(KeyError):
    def __str__(self):
        return self.args[0]


class MalformedIntervalError(SpecSyntaxError):
    pass


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    line: int
    column: int


_TOKEN_RE = re.compile(r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<arrow>->)
  | (?P<int>-?[0-9]+)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<sym>[\[\](),!&|])
""", re.VERBOSE)


def tokenize(text: str) -> list[Token]:
    tokens = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        col = pos - line_start + 1
        if m is None:
            raise SpecSyntaxError(f"unexpected character {text[pos]!r}", line, col)
        kind = m.lastgroup
        lexeme = m.group()
        if kind == "ws":
            for i, ch in enumerate(lexeme):
                if ch == "\n":
                    line += 1
                    line_start = pos + i + 1
        elif kind == "ident" and lexeme in KEYWORDS:
            tokens.append(Token(lexeme, lexeme, line, col))
        elif kind == "sym" or kind == "arrow":
            tokens.append(Token(lexeme, lexeme, line, col))
        else:
            tokens.append(Token(kind, lexeme, line, col))
        pos = m.end()
    tokens.append(Token("eof", "", line, pos - line_start + 1))
    return tokens


class _Parser:
    def __init__(self, text: str, bindings):
        self.tokens = tokenize(text)
        self.i = 0
        self.bindings = bindings

    @property
    def tok(self) -> Token:
        return self.tokens[self.i]

    def error(self, msg: str, tok: Token | None = None):
        tok = tok or self.tok
        found = "end of input" if tok.kind == "eof" else repr(tok.text)
        raise SpecSyntaxError(f"{msg}, found {found}", tok.line, tok.column)

    def expect(self, kind: str) -> Token:
        if self.tok.kind != kind:
            self.error(f"expected {kind!r}")
        tok = self.tok
        self.i += 1
        return tok

    def accept(self, kind: str) -> bool:
        if self.tok.kind == kind:
            self.i += 1
            return True
        return False

    def parse(self) -> Formula:
        f = self.implies()
        if self.tok.kind != "eof":
            self.error("expected end of formula")
        return f

    def implies(self) -> Formula:
        left = self.or_()
        if self.accept("->"):
            return Implies(left, self.implies())
        return left

    def or_(self) -> Formula:
        left = self.and_()
        while self.accept("|"):
            left = Or(left, self.and_())
        return left

    def and_(self) -> Formula:
        left = self.until()
        while self.accept("&"):
            left = And(left, self.until())
        return left

    def until(self) -> Formula:
        left = self.unary()
        if self.accept("U"):
            iv = self.interval()
            right = self.unary()
            if self.tok.kind == "U":
                self.error("chained U needs parentheses")
            return Until(iv, left, right)
        return left

    def interval(self) -> Interval:
        start = self.expect("[")
        a = self.expect("int")
        self.expect(",")
        b = self.expect("int")
        self.expect("]")
        try:
            return Interval(int(a.text), int(b.text))
        except IntervalError as exc:
            raise MalformedIntervalError(str(exc), start.line, start.column) from None

    def unary(self) -> Formula:
        tok = self.tok
        kind = tok.kind
        if kind == "!":
            self.i += 1
            return Not(self.unary())
        if kind in ("G", "F"):
            self.i += 1
            iv = self.interval()
            child = self.unary()
            return Globally(iv, child) if kind == "G" else Eventually(iv, child)
        if kind == "X":
            self.i += 1
            return Next(self.unary())
        if kind == "(":
            self.i += 1
            f = self.implies()
            self.expect(")")
            return f
        if kind == "true":
            self.i += 1
            return TrueF()
        if kind == "false":
            self.i += 1
            return FalseF()
        if kind == "ident":
            self.i += 1
            return self.predicate(tok)
        self.error("expected a formula")

    def predicate(self, tok: Token) -> Predicate:
        if self.bindings is None:
            return Predicate(tok.text)
        if tok.text not in self.bindings:
            raise UnboundPredicateError(
                f"unbound predicate {tok.text!r} at line {tok.line}, column {tok.column}")
        binding = self.bindings[tok.text] if isinstance(self.bindings, Mapping) else None
        return Predicate(tok.text, binding=binding)


def parse_spec(text: str, bindings=None) -> Formula:
    """Parse ``text`` into a formula tree.

    ``bindings`` maps predicate names to :class:`PredicateBinding` objects; the
    binding is attached to each predicate node so the tree can be evaluated
    directly.  A plain set of names only checks that predicates are bound.
    With ``bindings=None`` no check is made and the tree is not evaluable.
    """
    return _Parser(text, bindings).parse()


def bind(f: Formula, bindings: Mapping) -> Formula:
    """Return a copy of ``f`` with predicate bindings (re)attached."""
    from dataclasses import fields, replace

    if isinstance(f, Predicate):
        if f.name not in bindings:
            raise UnboundPredicateError(f"unbound predicate {f.name!r}")
        return Predicate(f.name, f.args, bindings[f.name])
    if not f.children:
        return f
    updates = {}
    for fld in fields(f):
        val = getattr(f, fld.name)
        if isinstance(val, Formula):
            updates[fld.name] = bind(val, bindings)
    return replace(f, **updates)
