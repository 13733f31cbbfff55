"""Tiny recursive-descent parser turning infix formula strings into Exprs.

Grammar (documented for system declaration files)::

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := '-' unary | power
    power   := atom ['^' integer]
    atom    := number | name | name '(' expr (',' expr)* ')' | '(' expr ')'

Names resolve against the pool's variable table; the callable names are
``sin``, ``cos``, ``exp``, ``abs`` (one argument) and ``min``, ``max`` (two
arguments).  Exponents are non-negative integer literals.
"""

from __future__ import annotations

import re

from .expr import Expr, ExprPool

__all__ = ["parse_formula", "FormulaError"]


class FormulaError(ValueError):
    """Raised with position information when a formula string is malformed."""


_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+\.\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?|\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),]))"
)

_FUNCS1 = {"sin", "cos", "exp", "abs"}
_FUNCS2 = {"min", "max"}


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            if text[pos:].strip() == "":
                break
            raise FormulaError(f"unexpected character {text[pos]!r} at column {pos}")
        if m.lastgroup is not None:
            tokens.append((m.lastgroup, m.group(m.lastgroup), m.start(m.lastgroup)))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, pool: ExprPool):
        self.text = text
        self.pool = pool
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def next(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str):
        kind, text, col = self.next()
        if text != value:
            raise FormulaError(f"expected {value!r} at column {col}, found {text!r}")

    def parse(self) -> Expr:
        e = self.expr()
        kind, text, col = self.peek()
        if kind != "end":
            raise FormulaError(f"trailing input {text!r} at column {col}")
        return e

    def expr(self) -> Expr:
        e = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.next()[1]
            rhs = self.term()
            e = e + rhs if op == "+" else e - rhs
        return e

    def term(self) -> Expr:
        e = self.unary()
        while self.peek()[1] in ("*", "/"):
            op = self.next()[1]
            rhs = self.unary()
            e = e * rhs if op == "*" else e / rhs
        return e

    def unary(self) -> Expr:
        if self.peek()[1] == "-":
            self.next()
            return -self.unary()
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.peek()[1] == "^":
            self.next()
            kind, text, col = self.next()
            if kind != "num" or not re.fullmatch(r"\d+", text):
                raise FormulaError(f"exponent must be a non-negative integer at column {col}")
            return self.pool.pow(base, int(text))
        return base

    def atom(self) -> Expr:
        kind, text, col = self.next()
        if kind == "num":
            return self.pool.const(float(text))
        if kind == "name":
            if self.peek()[1] == "(":
                return self.call(text, col)
            try:
                return self.pool.var(text)
            except Exception:
                raise FormulaError(f"unknown variable {text!r} at column {col}") from None
        if text == "(":
            e = self.expr()
            self.expect(")")
            return e
        raise FormulaError(f"unexpected token {text!r} at column {col}")

    def call(self, name: str, col: int) -> Expr:
        self.expect("(")
        args = [self.expr()]
        while self.peek()[1] == ",":
            self.next()
            args.append(self.expr())
        self.expect(")")
        if name in _FUNCS1:
            if len(args) != 1:
                raise FormulaError(f"{name} takes one argument (column {col})")
            return getattr(self.pool, {"abs": "absolute"}.get(name, name))(args[0])
        if name in _FUNCS2:
            if len(args) != 2:
                raise FormulaError(f"{name} takes two arguments (column {col})")
            return (self.pool.minimum if name == "min" else self.pool.maximum)(*args)
        raise FormulaError(f"unknown function {name!r} at column {col}")


def parse_formula(text: str, pool: ExprPool) -> Expr:
    """Parse an infix formula over the pool's variables into an Expr."""
    return _Parser(text, pool).parse()
