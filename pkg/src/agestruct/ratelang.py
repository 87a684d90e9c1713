"""Small arithmetic language for rate functions of ``(z, a, x)``.

Grammar (EBNF)::

    expr    = term { ("+" | "-") term } ;
    term    = unary { ("*" | "/") unary } ;
    unary   = "-" unary | power ;
    power   = primary { "^" [ "-" ] integer } ;
    primary = number | variable | call | "(" expr ")" ;
    call    = name "(" expr { "," expr } ")" ;

Variables are ``z`` (the weighted population), ``a`` (age) and ``x``
(position).  Functions: ``exp log sin cos sqrt abs`` (one argument) and
``min max`` (two arguments).  Exponents of ``^`` are integer literals.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Union

import numpy as np

VARIABLES = ("z", "a", "x")
FUNCTIONS = {
    "exp": 1,
    "log": 1,
    "sin": 1,
    "cos": 1,
    "sqrt": 1,
    "abs": 1,
    "min": 2,
    "max": 2,
}
NON_DIFFERENTIABLE = {"abs", "min", "max"}


class RateExprError(ValueError):
    """Base class for every error raised by this module."""


class RateSyntaxError(RateExprError):
    def __init__(self, message, offset):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class UnknownIdentifierError(RateExprError):
    def __init__(self, name, offset):
        super().__init__(f"unknown identifier {name!r} at offset {offset}")
        self.name = name
        self.offset = offset


class ArityError(RateExprError):
    pass


class DomainFault(RateExprError):
    def __init__(self, message, subexpr):
        super().__init__(f"{message} in sub-expression {subexpr!s}")
        self.subexpr = subexpr


class NonDifferentiableError(RateExprError):
    pass


# --------------------------------------------------------------------------
# AST.  Source offsets do not take part in structural equality.


@dataclass(frozen=True)
class Num:
    value: float
    offset: int | None = field(default=None, compare=False)


@dataclass(frozen=True)
class Var:
    name: str
    offset: int | None = field(default=None, compare=False)


@dataclass(frozen=True)
class Neg:
    arg: "Node"
    offset: int | None = field(default=None, compare=False)


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"
    offset: int | None = field(default=None, compare=False)


@dataclass(frozen=True)
class Pow:
    base: "Node"
    exponent: int
    offset: int | None = field(default=None, compare=False)


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple
    offset: int | None = field(default=None, compare=False)


Node = Union[Num, Var, Neg, BinOp, Pow, Call]

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _prec(node):
    if isinstance(node, BinOp):
        return _PREC[node.op]
    if isinstance(node, Neg):
        return 3
    if isinstance(node, Pow):
        return 4
    return 5


def _format_number(value):
    if value == int(value) and abs(value) < 1e16:
        return str(int(value))
    return repr(float(value))


def to_text(node):
    """Print ``node`` with the fewest parentheses that re-parse to it."""
    if isinstance(node, Num):
        return _format_number(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        inner = to_text(node.arg)
        return f"-({inner})" if _prec(node.arg) < 3 else f"-{inner}"
    if isinstance(node, Pow):
        base = to_text(node.base)
        if _prec(node.base) < 5:
            base = f"({base})"
        return f"{base}^{node.exponent}"
    if isinstance(node, Call):
        return f"{node.name}({', '.join(to_text(arg) for arg in node.args)})"
    p = _PREC[node.op]
    left = to_text(node.left)
    right = to_text(node.right)
    if _prec(node.left) < p:
        left = f"({left})"
    if _prec(node.right) <= p:
        right = f"({right})"
    return f"{left}{node.op}{right}"


# --------------------------------------------------------------------------
# Parsing

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>[-+*/^(),])
    """,
    re.VERBOSE,
)


def _tokenize(text):
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise RateSyntaxError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        if kind != "ws":
            tokens.append((kind, m.group(), pos))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text, variables):
        self.tokens = _tokenize(text)
        self.i = 0
        self.variables = variables

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, text, pos = self.take()
        if text != value or kind == "end":
            found = "end of input" if kind == "end" else repr(text)
            raise RateSyntaxError(f"expected {value!r}, found {found}", pos)

    def parse(self):
        node = self.expr()
        kind, text, pos = self.peek()
        if kind != "end":
            raise RateSyntaxError(f"unexpected {text!r}", pos)
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            _, op, pos = self.take()
            node = BinOp(op, node, self.term(), pos)
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            _, op, pos = self.take()
            node = BinOp(op, node, self.unary(), pos)
        return node

    def unary(self):
        kind, text, pos = self.peek()
        if kind == "op" and text == "-":
            self.take()
            return Neg(self.unary(), pos)
        return self.power()

    def power(self):
        node = self.primary()
        while self.peek()[0] == "op" and self.peek()[1] == "^":
            _, _, pos = self.take()
            sign = 1
            if self.peek()[0] == "op" and self.peek()[1] == "-":
                self.take()
                sign = -1
            kind, text, epos = self.take()
            if kind != "num" or not text.isdigit():
                raise RateSyntaxError("integer exponent required", epos)
            node = Pow(node, sign * int(text), pos)
        return node

    def primary(self):
        kind, text, pos = self.take()
        if kind == "num":
            return Num(float(text), pos)
        if kind == "name":
            if self.peek()[1] == "(" and self.peek()[0] == "op":
                if text not in FUNCTIONS:
                    raise UnknownIdentifierError(text, pos)
                self.take()
                args = [] if self.peek()[1] == ")" else [self.expr()]
                while args and self.peek()[1] == "," and self.peek()[0] == "op":
                    self.take()
                    args.append(self.expr())
                self.expect(")")
                if len(args) != FUNCTIONS[text]:
                    raise ArityError(
                        f"{text} takes {FUNCTIONS[text]} argument(s), "
                        f"got {len(args)} (offset {pos})"
                    )
                return Call(text, tuple(args), pos)
            if text in FUNCTIONS:
                raise RateSyntaxError(f"function {text!r} needs arguments", pos)
            if text not in self.variables:
                raise UnknownIdentifierError(text, pos)
            return Var(text, pos)
        if kind == "op" and text == "(":
            node = self.expr()
            self.expect(")")
            return node
        found = "end of input" if kind == "end" else repr(text)
        raise RateSyntaxError(f"unexpected {found}", pos)


# --------------------------------------------------------------------------
# Evaluation


def _check(condition, message, node):
    if np.any(condition):
        raise DomainFault(message, to_text(node))


def _eval(node, env):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        return env[node.name]
    if isinstance(node, Neg):
        return -_eval(node.arg, env)
    if isinstance(node, BinOp):
        left = _eval(node.left, env)
        right = _eval(node.right, env)
        if node.op == "+":
            return left + right
        if node.op == "-":
            return left - right
        if node.op == "*":
            return left * right
        _check(np.asarray(right) == 0, "division by zero", node)
        return np.divide(left, right)
    if isinstance(node, Pow):
        base = _eval(node.base, env)
        if node.exponent < 0:
            _check(np.asarray(base) == 0, "zero to a negative power", node)
            return 1.0 / np.power(base, -node.exponent)
        return np.power(base, node.exponent)
    args = [_eval(arg, env) for arg in node.args]
    name = node.name
    if name == "log":
        _check(np.asarray(args[0]) <= 0, "log of non-positive value", node)
        return np.log(args[0])
    if name == "sqrt":
        _check(np.asarray(args[0]) < 0, "sqrt of negative value", node)
        return np.sqrt(args[0])
    if name == "min":
        return np.minimum(*args)
    if name == "max":
        return np.maximum(*args)
    return getattr(np, name)(args[0])


# --------------------------------------------------------------------------
# Symbolic z-derivative with light simplification

ZERO = Num(0.0)
ONE = Num(1.0)


def _num(value):
    return Num(float(value)) if value >= 0 else Neg(Num(float(-value)))


def _const(node):
    """Numeric value of a literal (possibly negated), else None."""
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Neg) and isinstance(node.arg, Num):
        return -node.arg.value
    return None


def neg(e):
    c = _const(e)
    if c is not None:
        return _num(-c)
    if isinstance(e, Neg):
        return e.arg
    return Neg(e)


def add(l, r):
    cl, cr = _const(l), _const(r)
    if cl is not None and cr is not None:
        return _num(cl + cr)
    if cr == 0:
        return l
    if cl == 0:
        return r
    if isinstance(r, Neg):
        return BinOp("-", l, r.arg)
    return BinOp("+", l, r)


def sub(l, r):
    cl, cr = _const(l), _const(r)
    if cl is not None and cr is not None:
        return _num(cl - cr)
    if cr == 0:
        return l
    if cl == 0:
        return neg(r)
    return BinOp("-", l, r)


def mul(l, r):
    cl, cr = _const(l), _const(r)
    if cl is not None and cr is not None:
        return _num(cl * cr)
    if cl == 0 or cr == 0:
        return ZERO
    if cl == 1:
        return r
    if cr == 1:
        return l
    if cl == -1:
        return neg(r)
    if cr == -1:
        return neg(l)
    return BinOp("*", l, r)


def div(l, r):
    cl, cr = _const(l), _const(r)
    if cl == 0:
        return ZERO
    if cr == 1:
        return l
    if cl is not None and cr is not None and cr != 0:
        return _num(cl / cr)
    return BinOp("/", l, r)


def power(base, n):
    if n == 0:
        return ONE
    if n == 1:
        return base
    c = _const(base)
    if c is not None and (c != 0 or n > 0):
        return _num(c**n)
    return Pow(base, n)


def free_vars(node):
    if isinstance(node, Var):
        return {node.name}
    if isinstance(node, Num):
        return set()
    if isinstance(node, Neg):
        return free_vars(node.arg)
    if isinstance(node, BinOp):
        return free_vars(node.left) | free_vars(node.right)
    if isinstance(node, Pow):
        return free_vars(node.base)
    out = set()
    for arg in node.args:
        out |= free_vars(arg)
    return out


def derivative(node, var="z"):
    """Symbolic partial derivative of ``node`` with respect to ``var``."""
    if var not in free_vars(node):
        return ZERO
    if isinstance(node, Var):
        return ONE
    if isinstance(node, Neg):
        return neg(derivative(node.arg, var))
    if isinstance(node, BinOp):
        l, r = node.left, node.right
        dl, dr = derivative(l, var), derivative(r, var)
        if node.op == "+":
            return add(dl, dr)
        if node.op == "-":
            return sub(dl, dr)
        if node.op == "*":
            return add(mul(dl, r), mul(l, dr))
        # (l/r)' = l'/r - l r'/r^2
        return sub(div(dl, r), div(mul(l, dr), power(r, 2)))
    if isinstance(node, Pow):
        n = node.exponent
        return mul(mul(_num(n), power(node.base, n - 1)), derivative(node.base, var))
    name = node.name
    if name in NON_DIFFERENTIABLE:
        raise NonDifferentiableError(
            f"{name} is not differentiable in {var}: {to_text(node)}"
        )
    (u,) = node.args
    du = derivative(u, var)
    if name == "exp":
        outer = node
    elif name == "log":
        return div(du, u)
    elif name == "sin":
        outer = Call("cos", (u,))
    elif name == "cos":
        outer = neg(Call("sin", (u,)))
    else:  # sqrt
        return div(du, mul(Num(2.0), node))
    return mul(outer, du)


# --------------------------------------------------------------------------


class RateExpr:
    """A parsed, immutable rate expression.

    Calling the expression evaluates it with numpy broadcasting, so the
    arguments may be scalars or arrays.
    """

    __slots__ = ("source", "ast")

    def __init__(self, source, ast):
        object.__setattr__(self, "source", source)
        object.__setattr__(self, "ast", ast)

    def __setattr__(self, name, value):
        raise AttributeError("RateExpr is immutable")

    def __repr__(self):
        return f"RateExpr({self.source!r})"

    def __str__(self):
        return to_text(self.ast)

    def __eq__(self, other):
        return isinstance(other, RateExpr) and self.ast == other.ast

    def __hash__(self):
        return hash(self.ast)

    @property
    def variables(self):
        return free_vars(self.ast)

    def depends_on(self, name):
        return name in free_vars(self.ast)

    def __call__(self, z=0.0, a=0.0, x=0.0):
        env = {"z": z, "a": a, "x": x}
        with np.errstate(over="ignore", invalid="ignore"):
            value = _eval(self.ast, env)
        if not np.all(np.isfinite(value)):
            raise DomainFault("non-finite value", to_text(self.ast))
        if np.ndim(value) == 0:
            return float(value)
        return value

    evaluate = __call__

    def diff_z(self):
        ast = derivative(self.ast, "z")
        return RateExpr(to_text(ast), ast)


def parse(text, variables=VARIABLES):
    """Parse ``text`` into a :class:`RateExpr`.

    ``variables`` restricts the admissible free variables.
    """
    if isinstance(text, (int, float)) and not isinstance(text, bool):
        text = _format_number(text) if math.isfinite(text) else str(text)
    ast = _Parser(str(text), tuple(variables)).parse()
    return RateExpr(str(text), ast)


def eval_expr(expr, z=0.0, a=0.0, x=0.0):
    return expr(z, a, x)


def diff_z(expr):
    return expr.diff_z()
