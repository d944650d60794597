"""Formula syntax tree and the canonical printer."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator


class IntervalError(ValueError):
    pass


@dataclass(frozen=True)
class Interval:
    a: int
    b: int

    def __post_init__(self):
        if not (isinstance(self.a, int) and isinstance(self.b, int)):
            raise IntervalError("interval bounds must be integers")
        if self.a < 0 or self.b < 0:
            raise IntervalError(f"negative interval bound in [{self.a},{self.b}]")
        if self.a > self.b:
            raise IntervalError(f"interval [{self.a},{self.b}] has a > b")

    def __str__(self):
        return f"[{self.a},{self.b}]"


class Formula:
    """Base class for all nodes."""

    children: tuple = ()

    def walk(self) -> Iterator["Formula"]:
        yield self
        for c in self.children:
            yield from c.walk()

    def predicates(self) -> set[str]:
        return {n.name for n in self.walk() if isinstance(n, Predicate)}

    def __str__(self):
        return to_text(self)

    # light operator sugar for building formulas in code
    def __and__(self, other):
        return And(self, other)

    def __or__(self, other):
        return Or(self, other)

    def __invert__(self):
        return Not(self)


@dataclass(frozen=True)
class TrueF(Formula):
    pass


@dataclass(frozen=True)
class FalseF(Formula):
    pass


@dataclass(frozen=True)
class Predicate(Formula):
    name: str
    args: tuple = ()
    binding: object = field(default=None, compare=False, repr=False, hash=False)


@dataclass(frozen=True)
class Not(Formula):
    child: Formula

    @property
    def children(self):
        return (self.child,)


@dataclass(frozen=True)
class Next(Formula):
    child: Formula

    @property
    def children(self):
        return (self.child,)


@dataclass(frozen=True)
class _Binary(Formula):
    left: Formula
    right: Formula

    @property
    def children(self):
        return (self.left, self.right)


@dataclass(frozen=True)
class And(_Binary):
    pass


@dataclass(frozen=True)
class Or(_Binary):
    pass


@dataclass(frozen=True)
class Implies(_Binary):
    pass


@dataclass(frozen=True)
class Eventually(Formula):
    interval: Interval
    child: Formula

    @property
    def children(self):
        return (self.child,)


@dataclass(frozen=True)
class Globally(Formula):
    interval: Interval
    child: Formula

    @property
    def children(self):
        return (self.child,)


@dataclass(frozen=True)
class Until(Formula):
    interval: Interval
    left: Formula
    right: Formula

    @property
    def children(self):
        return (self.left, self.right)


_BINARY_SYMBOL = {And: "&", Or: "|", Implies: "->"}


def to_text(f: Formula) -> str:
    """Print with every binary operator parenthesised, so the output re-parses
    to an equal tree regardless of precedence."""
    if isinstance(f, TrueF):
        return "true"
    if isinstance(f, FalseF):
        return "false"
    if isinstance(f, Predicate):
        return f.name
    if isinstance(f, Not):
        return "!" + to_text(f.child)
    if isinstance(f, Next):
        return "X " + to_text(f.child)
    if isinstance(f, Eventually):
        return f"F{f.interval} {to_text(f.child)}"
    if isinstance(f, Globally):
        return f"G{f.interval} {to_text(f.child)}"
    if isinstance(f, Until):
        return f"({to_text(f.left)} U{f.interval} {to_text(f.right)})"
    sym = _BINARY_SYMBOL.get(type(f))
    if sym is None:
        raise TypeError(f"unknown formula node {f!r}")
    return f"({to_text(f.left)} {sym} {to_text(f.right)})"


def conjunction(*parts: Formula) -> Formula:
    out = parts[0]
    for p in parts[1:]:
        out = And(out, p)
    return out


def disjunction(*parts: Formula) -> Formula:
    out = parts[0]
    for p in parts[1:]:
        out = Or(out, p)
    return out
