"""Scalar expressions in the spatial variables x1..xn with exact derivatives.

The grammar is small and fixed: real literals, variables ``x1``/``x2``,
binary ``+ - * / ^`` (``^`` binds tightest and is right-associative) and the
unary functions ``exp ln sin cos sqrt abs tanh``.  Parsed trees are immutable
and evaluation is pure, so expressions are safe to share across threads.

First and second derivatives come from forward-mode jets carrying
(value, gradient, Hessian); they are exact to round-off, never finite
differences.  The Hessian is assembled symmetrically, so ``H == H.T`` holds
bit-for-bit.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

FUNCTIONS = ("exp", "ln", "sin", "cos", "sqrt", "abs", "tanh")

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+\.\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?"
    r"|\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^()]))"
)


class ParseError(ValueError):
    """Syntax or identifier error; carries the offending position."""

    def __init__(self, message, position):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class EvalFault(ArithmeticError):
    """Domain error or non-finite result during evaluation.

    Carries the offending point so callers can decide whether their grid
    must avoid it.
    """

    def __init__(self, message, point):
        pt = tuple(float(v) for v in np.atleast_1d(point))
        super().__init__(f"{message} at point {pt}")
        self.point = pt


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    index: int  # 1-based


@dataclass(frozen=True)
class BinOp:
    op: str
    left: object
    right: object


@dataclass(frozen=True)
class Func:
    name: str
    arg: object


@dataclass(frozen=True)
class Neg:
    arg: object


@dataclass(frozen=True)
class ExpressionAst:
    """Parsed expression over x1..x{dim}; compare structurally."""

    root: object
    dim: int

    def __str__(self):
        return _format(self.root, 0)


@dataclass(frozen=True)
class Jet2:
    """Second-order forward-mode jet: value, gradient and symmetric Hessian."""

    value: float
    gradient: np.ndarray
    hessian: np.ndarray


def _tokenize(text):
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            stripped = text[pos:].lstrip()
            if not stripped:
                break
            raise ParseError(f"unexpected character {stripped[0]!r}", pos)
        if m.group("num") is not None:
            tokens.append(("num", float(m.group("num")), m.start("num")))
        elif m.group("name") is not None:
            tokens.append(("name", m.group("name"), m.start("name")))
        else:
            tokens.append(("op", m.group("op"), m.start("op")))
        pos = m.end()
    tokens.append(("end", None, len(text)))
    return tokens


class _Parser:
    def __init__(self, tokens, dim):
        self.tokens = tokens
        self.dim = dim
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def advance(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect_op(self, op):
        kind, val, pos = self.peek()
        if kind != "op" or val != op:
            raise ParseError(f"expected {op!r}", pos)
        self.advance()

    def parse_expression(self):
        node = self.parse_term()
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val in "+-":
                self.advance()
                node = BinOp(val, node, self.parse_term())
            else:
                return node

    def parse_term(self):
        node = self.parse_factor()
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val in "*/":
                self.advance()
                node = BinOp(val, node, self.parse_factor())
            else:
                return node

    def parse_factor(self):
        kind, val, _ = self.peek()
        if kind == "op" and val in "+-":
            self.advance()
            inner = self.parse_factor()
            return Neg(inner) if val == "-" else inner
        return self.parse_power()

    def parse_power(self):
        base = self.parse_atom()
        kind, val, _ = self.peek()
        if kind == "op" and val == "^":
            self.advance()
            # right-associative, exponent may carry its own sign
            return BinOp("^", base, self.parse_factor())
        return base

    def parse_atom(self):
        kind, val, pos = self.advance()
        if kind == "num":
            return Num(val)
        if kind == "name":
            m = re.fullmatch(r"x(\d+)", val)
            if m:
                index = int(m.group(1))
                if not 1 <= index <= self.dim:
                    raise ParseError(
                        f"variable x{index} exceeds dimension {self.dim}", pos
                    )
                return Var(index)
            if val in FUNCTIONS:
                self.expect_op("(")
                arg = self.parse_expression()
                self.expect_op(")")
                return Func(val, arg)
            raise ParseError(f"unknown identifier {val!r}", pos)
        if kind == "op" and val == "(":
            node = self.parse_expression()
            self.expect_op(")")
            return node
        raise ParseError("expected a value", pos)


def parse(text: str, dim: int) -> ExpressionAst:
    """Parse ``text`` into an immutable AST over x1..x{dim}."""
    if not isinstance(text, str) or not text.strip():
        raise ParseError("empty expression", 0)
    if dim not in (1, 2):
        raise ValueError(f"dim must be 1 or 2, got {dim}")
    parser = _Parser(_tokenize(text), dim)
    root = parser.parse_expression()
    kind, _, pos = parser.peek()
    if kind != "end":
        raise ParseError("trailing input", pos)
    return ExpressionAst(root, dim)


# precedence levels for printing: + - (1), * / (2), unary (3), ^ (4)
def _format(node, parent_prec):
    if isinstance(node, Num):
        s = repr(node.value)
        return s
    if isinstance(node, Var):
        return f"x{node.index}"
    if isinstance(node, Func):
        return f"{node.name}({_format(node.arg, 0)})"
    if isinstance(node, Neg):
        s = f"-{_format(node.arg, 3)}"
        return f"({s})" if parent_prec > 3 else s
    prec = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 4}[node.op]
    left = _format(node.left, prec if node.op != "^" else prec + 1)
    # right operand of - / needs a strictly higher level; ^ is right-assoc
    rprec = prec + 1 if node.op in "-/" else prec
    if node.op == "^":
        rprec = 3  # exponent parsed as a factor
    right = _format(node.right, rprec)
    s = f"{left}{node.op}{right}"
    return f"({s})" if parent_prec > prec else s


def _as_points(point, dim):
    pts = np.asarray(point, dtype=float)
    if pts.ndim == 1:
        pts = pts.reshape(1, -1) if dim > 1 else pts.reshape(-1, 1)
    if pts.ndim != 2 or pts.shape[1] != dim:
        raise ValueError(f"points must have shape (m, {dim})")
    return pts


def _first_bad(mask, pts):
    idx = int(np.argmax(mask))
    return pts[idx]


def _eval_values(node, pts):
    if isinstance(node, Num):
        return np.full(pts.shape[0], node.value)
    if isinstance(node, Var):
        return pts[:, node.index - 1].copy()
    if isinstance(node, Neg):
        return -_eval_values(node.arg, pts)
    if isinstance(node, Func):
        u = _eval_values(node.arg, pts)
        if node.name == "exp":
            with np.errstate(over="ignore"):
                return np.exp(u)
        if node.name == "ln":
            bad = u <= 0.0
            if bad.any():
                raise EvalFault("ln of non-positive argument", _first_bad(bad, pts))
            return np.log(u)
        if node.name == "sin":
            return np.sin(u)
        if node.name == "cos":
            return np.cos(u)
        if node.name == "sqrt":
            bad = u < 0.0
            if bad.any():
                raise EvalFault("sqrt of negative argument", _first_bad(bad, pts))
            return np.sqrt(u)
        if node.name == "abs":
            return np.abs(u)
        if node.name == "tanh":
            return np.tanh(u)
        raise AssertionError(node.name)
    a = _eval_values(node.left, pts)
    b = _eval_values(node.right, pts)
    if node.op == "+":
        return a + b
    if node.op == "-":
        return a - b
    if node.op == "*":
        return a * b
    if node.op == "/":
        bad = b == 0.0
        if bad.any():
            raise EvalFault("division by zero", _first_bad(bad, pts))
        return a / b
    if node.op == "^":
        return _pow_values(a, b, pts)
    raise AssertionError(node.op)


def _pow_values(a, b, pts):
    with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
        out = np.power(a, b)
    bad = ~np.isfinite(out) | np.isnan(out)
    if bad.any():
        raise EvalFault("invalid power", _first_bad(bad, pts))
    return out


def eval_values(ast: ExpressionAst, points) -> np.ndarray:
    """Evaluate at an (m, dim) array of points; faults carry the bad point."""
    pts = _as_points(points, ast.dim)
    vals = _eval_values(ast.root, pts)
    bad = ~np.isfinite(vals)
    if bad.any():
        raise EvalFault("non-finite value", _first_bad(bad, pts))
    return vals


def evaluate(ast: ExpressionAst, point) -> float:
    """Evaluate at a single point."""
    return float(eval_values(ast, np.atleast_2d(np.asarray(point, dtype=float))))


# ---------------------------------------------------------------------------
# forward-mode jets
# ---------------------------------------------------------------------------

def _jet_const(c, m, n):
    return (np.full(m, c), np.zeros((m, n)), np.zeros((m, n, n)))


def _jet_chain(u, phi, dphi, d2phi):
    """Compose a scalar function along a jet: phi(u), phi'(u)u', ..."""
    v, g, h = u
    hess = dphi[:, None, None] * h + d2phi[:, None, None] * (
        g[:, :, None] * g[:, None, :]
    )
    return (phi, dphi[:, None] * g, hess)


def _sym_outer(ga, gb):
    # ga_i gb_j + gb_i ga_j is exactly symmetric (IEEE add commutes)
    return ga[:, :, None] * gb[:, None, :] + gb[:, :, None] * ga[:, None, :]


def _eval_jets(node, pts):
    m, n = pts.shape
    if isinstance(node, Num):
        return _jet_const(node.value, m, n)
    if isinstance(node, Var):
        g = np.zeros((m, n))
        g[:, node.index - 1] = 1.0
        return (pts[:, node.index - 1].copy(), g, np.zeros((m, n, n)))
    if isinstance(node, Neg):
        v, g, h = _eval_jets(node.arg, pts)
        return (-v, -g, -h)
    if isinstance(node, Func):
        u = _eval_jets(node.arg, pts)
        v = u[0]
        if node.name == "exp":
            with np.errstate(over="ignore"):
                e = np.exp(v)
            return _jet_chain(u, e, e, e)
        if node.name == "ln":
            bad = v <= 0.0
            if bad.any():
                raise EvalFault("ln of non-positive argument", _first_bad(bad, pts))
            return _jet_chain(u, np.log(v), 1.0 / v, -1.0 / v**2)
        if node.name == "sin":
            s, c = np.sin(v), np.cos(v)
            return _jet_chain(u, s, c, -s)
        if node.name == "cos":
            s, c = np.sin(v), np.cos(v)
            return _jet_chain(u, c, -s, -c)
        if node.name == "sqrt":
            bad = v <= 0.0
            if bad.any():
                raise EvalFault("sqrt needs a positive argument", _first_bad(bad, pts))
            r = np.sqrt(v)
            return _jet_chain(u, r, 0.5 / r, -0.25 / (r * v))
        if node.name == "abs":
            bad = v == 0.0
            if bad.any():
                raise EvalFault("abs not differentiable at 0", _first_bad(bad, pts))
            s = np.sign(v)
            return _jet_chain(u, np.abs(v), s, np.zeros_like(v))
        if node.name == "tanh":
            t = np.tanh(v)
            sech2 = 1.0 - t * t
            return _jet_chain(u, t, sech2, -2.0 * t * sech2)
        raise AssertionError(node.name)
    if node.op == "^":
        return _jet_pow(node, pts)
    a = _eval_jets(node.left, pts)
    b = _eval_jets(node.right, pts)
    va, ga, ha = a
    vb, gb, hb = b
    if node.op == "+":
        return (va + vb, ga + gb, ha + hb)
    if node.op == "-":
        return (va - vb, ga - gb, ha - hb)
    if node.op == "*":
        return (
            va * vb,
            va[:, None] * gb + vb[:, None] * ga,
            va[:, None, None] * hb + vb[:, None, None] * ha + _sym_outer(ga, gb),
        )
    if node.op == "/":
        bad = vb == 0.0
        if bad.any():
            raise EvalFault("division by zero", _first_bad(bad, pts))
        q = va / vb
        gq = (ga - q[:, None] * gb) / vb[:, None]
        hq = (ha - q[:, None, None] * hb - _sym_outer(gq, gb)) / vb[:, None, None]
        return (q, gq, hq)
    raise AssertionError(node.op)


def _jet_pow(node, pts):
    if isinstance(node.right, Num):
        r = node.right.value
        u = _eval_jets(node.left, pts)
        v = u[0]
        if r == int(r):
            k = int(r)
            if k == 0:
                m, n = pts.shape
                return _jet_const(1.0, m, n)
            if k < 0:
                bad = v == 0.0
                if bad.any():
                    raise EvalFault("zero base with negative power", _first_bad(bad, pts))
            if k == 1:
                d2 = np.zeros_like(v)
            else:
                d2 = k * (k - 1) * _safe_pow(v, k - 2)
            return _jet_chain(u, v**k, k * _safe_pow(v, k - 1), d2)
        bad = v <= 0.0
        if bad.any():
            raise EvalFault("non-integer power of non-positive base", _first_bad(bad, pts))
        return _jet_chain(u, v**r, r * v ** (r - 1), r * (r - 1) * v ** (r - 2))
    # general exponent: a^b = exp(b ln a), requires a > 0
    base = _eval_jets(node.left, pts)
    bad = base[0] <= 0.0
    if bad.any():
        raise EvalFault("power with non-positive base", _first_bad(bad, pts))
    ln_a = _jet_chain(base, np.log(base[0]), 1.0 / base[0], -1.0 / base[0] ** 2)
    expo = _eval_jets(node.right, pts)
    va, ga, ha = expo
    vb, gb, hb = ln_a
    prod = (
        va * vb,
        va[:, None] * gb + vb[:, None] * ga,
        va[:, None, None] * hb + vb[:, None, None] * ha + _sym_outer(ga, gb),
    )
    with np.errstate(over="ignore"):
        e = np.exp(prod[0])
    return _jet_chain(prod, e, e, e)


def _safe_pow(v, k):
    if k == 0:
        return np.ones_like(v)
    with np.errstate(divide="ignore"):
        return v ** float(k)


def eval_jets(ast: ExpressionAst, points):
    """Values, gradients and Hessians at an (m, dim) array of points.

    Returns arrays of shapes (m,), (m, dim), (m, dim, dim).
    """
    pts = _as_points(points, ast.dim)
    v, g, h = _eval_jets(ast.root, pts)
    for arr in (v, g, h):
        bad = ~np.isfinite(arr.reshape(arr.shape[0], -1)).all(axis=1)
        if bad.any():
            raise EvalFault("non-finite derivative", _first_bad(bad, pts))
    return v, g, h


def eval_jet(ast: ExpressionAst, point) -> Jet2:
    """Jet at a single point."""
    pts = np.atleast_2d(np.asarray(point, dtype=float))
    v, g, h = eval_jets(ast, pts)
    return Jet2(float(v[0]), g[0], h[0])
