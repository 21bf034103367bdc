"""Scalar-field expressions over chart coordinates, with exact 2-jets.

Grammar (whitespace is insignificant)::

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := ('-' | '+') unary | power
    power   := atom (('^' | '**') unary)?        # right associative
    atom    := NUMBER | NAME | FUNC '(' expr ')' | '(' expr ')'
    FUNC    := sin | cos | exp | ln | sqrt

``-x^2`` parses as ``-(x^2)`` and ``2^-1`` is accepted.  The exponent of a
power must be free of coordinates; write general powers as ``exp(b*ln(a))``.
``pi`` is a named constant unless the chart declares a coordinate with that
name.

Evaluation is truncated second-order forward mode: every node yields a
:class:`Jet2` carrying value, gradient and Hessian with respect to the chart
coordinates.  Points may be a single coordinate tuple or an array of shape
``(..., n)``; jets then carry the same leading batch shape.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import DomainError, ExprSyntaxError, UnknownVariable

__all__ = [
    "Node", "Const", "Var", "Unary", "Binary", "Pow", "ScalarExpr", "Jet2",
    "parse", "eval_jet2", "evaluate", "to_text", "substitute", "FUNCTIONS",
]

FUNCTIONS = ("sin", "cos", "exp", "ln", "sqrt")
NAMED_CONSTANTS = {"pi": math.pi}


# --------------------------------------------------------------------------
# Tree

class Node:
    """Base class for expression nodes (immutable, structurally comparable)."""

    __slots__ = ()

    def variables(self) -> set[str]:
        raise NotImplementedError


@dataclass(frozen=True)
class Const(Node):
    value: float

    def variables(self):
        return set()


@dataclass(frozen=True)
class Var(Node):
    name: str

    def variables(self):
        return {self.name}


@dataclass(frozen=True)
class Unary(Node):
    op: str  # "neg" or a name from FUNCTIONS
    arg: Node

    def variables(self):
        return self.arg.variables()


@dataclass(frozen=True)
class Binary(Node):
    op: str  # one of + - * /
    left: Node
    right: Node

    def variables(self):
        return self.left.variables() | self.right.variables()


@dataclass(frozen=True)
class Pow(Node):
    base: Node
    exponent: Node  # coordinate-free

    def variables(self):
        return self.base.variables()

    @property
    def power(self) -> float:
        return _constant_value(self.exponent)


@dataclass(frozen=True)
class ScalarExpr:
    """A parsed expression bound to an ordered coordinate signature."""

    root: Node
    chart_vars: tuple[str, ...]

    def __str__(self):
        return to_text(self.root)

    @property
    def is_constant(self) -> bool:
        return not self.root.variables()

    def jet(self, points) -> "Jet2":
        return eval_jet2(self, points)

    def __call__(self, points):
        return evaluate(self, points)


def _constant_value(node: Node) -> float:
    if isinstance(node, Const):
        return node.value
    if isinstance(node, Unary) and node.op == "neg":
        return -_constant_value(node.arg)
    if node.variables():
        raise ValueError("expression is not constant")
    jet = _Evaluator(np.zeros(0), (), raise_errors=True).run(node)
    return float(jet.value)


# --------------------------------------------------------------------------
# Parsing

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\*\*|[-+*/^()]))"
)


def _tokenize(text: str):
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            bad = pos + (len(text[pos:]) - len(text[pos:].lstrip()))
            raise ExprSyntaxError(f"unexpected character {text[bad]!r}", bad, text)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, chart_vars: Sequence[str]):
        self.text = text
        self.vars = tuple(chart_vars)
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def error(self, message, tok=None):
        tok = tok or self.peek()
        return ExprSyntaxError(message, tok[2], self.text)

    def expect(self, value):
        tok = self.take()
        if tok[1] != value:
            found = tok[1] or "end of input"
            raise self.error(f"expected {value!r}, found {found!r}", tok)
        return tok

    def parse(self) -> Node:
        node = self.expr()
        if self.peek()[0] != "end":
            raise self.error(f"unexpected {self.peek()[1]!r}")
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            node = Binary(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/"):
            op = self.take()[1]
            node = Binary(op, node, self.unary())
        return node

    def unary(self):
        tok = self.peek()
        if tok[1] == "-":
            self.take()
            return Unary("neg", self.unary())
        if tok[1] == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        tok = self.peek()
        if tok[1] in ("^", "**"):
            self.take()
            exp_tok = self.peek()
            exponent = self.unary()
            if exponent.variables():
                raise self.error("exponent must be constant; use exp(b*ln(a))", exp_tok)
            return Pow(base, exponent)
        return base

    def atom(self):
        tok = self.take()
        kind, value, _ = tok
        if kind == "num":
            return Const(float(value))
        if kind == "name":
            if value in FUNCTIONS:
                if self.peek()[1] != "(":
                    raise self.error(f"function {value!r} needs an argument list")
                self.take()
                arg = self.expr()
                self.expect(")")
                return Unary(value, arg)
            if value in self.vars:
                return Var(value)
            if value in NAMED_CONSTANTS:
                return Const(NAMED_CONSTANTS[value])
            raise UnknownVariable(value, self.vars)
        if value == "(":
            node = self.expr()
            self.expect(")")
            return node
        found = value or "end of input"
        raise self.error(f"unexpected {found!r}", tok)


def parse(text: str, chart_vars: Sequence[str]) -> ScalarExpr:
    """Parse ``text`` into an expression over the coordinates ``chart_vars``.

    Raises ExprSyntaxError (with position) or UnknownVariable.
    """
    if not isinstance(text, str) or not text.strip():
        raise ExprSyntaxError("empty expression", 0, text if isinstance(text, str) else "")
    chart_vars = tuple(chart_vars)
    if len(set(chart_vars)) != len(chart_vars):
        raise ValueError(f"duplicate coordinate names in {chart_vars}")
    return ScalarExpr(_Parser(text, chart_vars).parse(), chart_vars)


# --------------------------------------------------------------------------
# Printing

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _fmt_const(v: float) -> str:
    for name, c in NAMED_CONSTANTS.items():
        if v == c:
            return name
    if v == int(v) and abs(v) < 1e15:
        return str(int(v)) if v >= 0 else f"({int(v)})"
    s = repr(float(v))
    return s if v >= 0 else f"({s})"


def to_text(node: Node) -> str:
    """Render with the minimal parentheses that re-parse to the same tree."""
    return _show(node, 0)


def _show(node: Node, ctx: int) -> str:
    # ctx: binding power required by the parent (0 top, 1 additive, 2 mult,
    # 3 unary operand, 4 power base)
    if isinstance(node, Const):
        s = _fmt_const(node.value)
        return s
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Unary):
        if node.op == "neg":
            s = "-" + _show(node.arg, 3)
            return f"({s})" if ctx >= 3 else s
        return f"{node.op}({_show(node.arg, 0)})"
    if isinstance(node, Pow):
        s = f"{_show(node.base, 4)}^{_show(node.exponent, 3)}"
        return f"({s})" if ctx >= 4 else s
    if isinstance(node, Binary):
        p = _PREC[node.op]
        s = f"{_show(node.left, p)} {node.op} {_show(node.right, p + 1)}"
        return f"({s})" if ctx > p else s
    raise TypeError(node)


# --------------------------------------------------------------------------
# Substitution

def substitute(expr: ScalarExpr, mapping: Mapping[str, ScalarExpr | Node],
               chart_vars: Sequence[str] | None = None) -> ScalarExpr:
    """Replace variables by subtrees; the result lives on ``chart_vars``."""
    if chart_vars is None:
        chart_vars = next((m.chart_vars for m in mapping.values()
                           if isinstance(m, ScalarExpr)), expr.chart_vars)
    repl = {k: (v.root if isinstance(v, ScalarExpr) else v) for k, v in mapping.items()}

    def walk(n):
        if isinstance(n, Var):
            return repl.get(n.name, n)
        if isinstance(n, Unary):
            return Unary(n.op, walk(n.arg))
        if isinstance(n, Binary):
            return Binary(n.op, walk(n.left), walk(n.right))
        if isinstance(n, Pow):
            return Pow(walk(n.base), n.exponent)
        return n

    root = walk(expr.root)
    unknown = root.variables() - set(chart_vars)
    if unknown:
        raise UnknownVariable(sorted(unknown)[0], chart_vars)
    return ScalarExpr(root, tuple(chart_vars))


# --------------------------------------------------------------------------
# Jets

@dataclass
class Jet2:
    """Value, gradient and Hessian of a scalar field at one or many points.

    Shapes: value ``B``, grad ``B + (n,)``, hess ``B + (n, n)`` with ``B``
    the batch shape.  Every Hessian is assembled from symmetric updates, so
    ``hess == swapaxes(hess)`` holds bit-for-bit.
    """

    value: np.ndarray
    grad: np.ndarray
    hess: np.ndarray

    @property
    def n(self):
        return self.grad.shape[-1]

    def __add__(self, other):
        if not isinstance(other, Jet2):
            return Jet2(self.value + other, self.grad, self.hess)
        return Jet2(self.value + other.value, self.grad + other.grad, self.hess + other.hess)

    __radd__ = __add__

    def __neg__(self):
        return Jet2(-self.value, -self.grad, -self.hess)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, Jet2):
            return Jet2(self.value * other, self.grad * other, self.hess * other)
        a, b = self, other
        av, bv = a.value[..., None], b.value[..., None]
        cross = a.grad[..., :, None] * b.grad[..., None, :]
        hess = av[..., None] * b.hess + bv[..., None] * a.hess + cross + np.swapaxes(cross, -1, -2)
        return Jet2(a.value * b.value, av * b.grad + bv * a.grad, hess)

    __rmul__ = __mul__

    def chain(self, f0, f1, f2):
        """Compose with a scalar function given its value and two derivatives."""
        d1 = np.asarray(f1)[..., None]
        d2 = np.asarray(f2)[..., None, None]
        outer = self.grad[..., :, None] * self.grad[..., None, :]
        return Jet2(np.asarray(f0, dtype=float), d1 * self.grad, d1[..., None] * self.hess + d2 * outer)

    @classmethod
    def constant(cls, value, batch_shape, n):
        return cls(np.full(batch_shape, float(value)), np.zeros(batch_shape + (n,)),
                   np.zeros(batch_shape + (n, n)))

    @classmethod
    def coordinate(cls, points, index):
        points = np.asarray(points, dtype=float)
        batch, n = points.shape[:-1], points.shape[-1]
        grad = np.zeros(batch + (n,))
        grad[..., index] = 1.0
        return cls(points[..., index].copy(), grad, np.zeros(batch + (n, n)))


class _Evaluator:
    def __init__(self, points, chart_vars, raise_errors=True):
        self.points = points
        self.vars = chart_vars
        self.batch = points.shape[:-1] if points.ndim else ()
        self.n = len(chart_vars)
        self.raise_errors = raise_errors
        self.bad = np.zeros(self.batch, dtype=bool)
        self.culprit = None

    def flag(self, mask, node, reason):
        mask = np.asarray(mask, dtype=bool) & ~self.bad
        if not mask.any():
            return
        if self.raise_errors:
            idx = np.argwhere(np.broadcast_to(mask, self.batch))[0] if self.batch else ()
            point = tuple(float(c) for c in self.points[tuple(idx)]) if self.n else ()
            raise DomainError(point, to_text(node), reason)
        if self.culprit is None:
            self.culprit = (to_text(node), reason)
        self.bad |= mask

    def run(self, node) -> Jet2:
        with np.errstate(all="ignore"):
            jet = self.visit(node)
        finite = np.isfinite(jet.value) & np.isfinite(jet.grad).all(axis=-1) \
            & np.isfinite(jet.hess).all(axis=(-1, -2))
        self.flag(~finite, node, "non-finite result")
        return jet

    def visit(self, node) -> Jet2:
        if isinstance(node, Const):
            return Jet2.constant(node.value, self.batch, self.n)
        if isinstance(node, Var):
            return Jet2.coordinate(self.points, self.vars.index(node.name))
        if isinstance(node, Binary):
            a, b = self.visit(node.left), self.visit(node.right)
            if node.op == "+":
                return a + b
            if node.op == "-":
                return a - b
            if node.op == "*":
                return a * b
            self.flag(b.value == 0, node, "division by zero")
            v = b.value
            return a * b.chain(1.0 / v, -1.0 / v**2, 2.0 / v**3)
        if isinstance(node, Unary):
            u = self.visit(node.arg)
            v = u.value
            op = node.op
            if op == "neg":
                return -u
            if op == "sin":
                s, c = np.sin(v), np.cos(v)
                return u.chain(s, c, -s)
            if op == "cos":
                s, c = np.sin(v), np.cos(v)
                return u.chain(c, -s, -c)
            if op == "exp":
                e = np.exp(v)
                return u.chain(e, e, e)
            if op == "ln":
                self.flag(v <= 0, node, "ln of non-positive argument")
                return u.chain(np.log(v), 1.0 / v, -1.0 / v**2)
            if op == "sqrt":
                self.flag(v <= 0, node, "sqrt of non-positive argument")
                r = np.sqrt(v)
                return u.chain(r, 0.5 / r, -0.25 / (r * v))
            raise ValueError(op)
        if isinstance(node, Pow):
            return self.power(node)
        raise TypeError(node)

    def power(self, node: Pow) -> Jet2:
        u = self.visit(node.base)
        c = node.power
        v = u.value
        if float(c).is_integer():
            k = int(c)
            if k < 0:
                self.flag(v == 0, node, "negative power of zero")
        else:
            self.flag(v <= 0, node, "non-integer power of non-positive base")
        coeff1 = c
        coeff2 = c * (c - 1.0)
        f0 = v**c
        f1 = coeff1 * v ** (c - 1.0) if coeff1 != 0 else np.zeros_like(v)
        f2 = coeff2 * v ** (c - 2.0) if coeff2 != 0 else np.zeros_like(v)
        return u.chain(f0, f1, f2)


def _as_points(expr: ScalarExpr, points):
    pts = np.asarray(points, dtype=float)
    n = len(expr.chart_vars)
    if pts.ndim == 0 or pts.shape[-1] != n:
        raise ValueError(f"points must have trailing dimension {n}, got shape {pts.shape}")
    return pts


def eval_jet2(e: ScalarExpr, p, *, errors: str = "raise"):
    """Exact value, gradient and Hessian of ``e`` at ``p``.

    With ``errors="raise"`` a DomainError names the first offending point and
    subexpression.  With ``errors="mask"`` the call returns ``(jet, bad)``
    where ``bad`` flags points outside the natural domain.
    """
    pts = _as_points(e, p)
    ev = _Evaluator(pts, e.chart_vars, raise_errors=(errors == "raise"))
    jet = ev.run(e.root)
    if errors == "raise":
        return jet
    return jet, ev.bad


def evaluate(e: ScalarExpr, p):
    """Value only (still raises DomainError outside the natural domain)."""
    return eval_jet2(e, p).value
