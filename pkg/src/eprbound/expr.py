"""Scalar arithmetic expressions in the variables ``x`` and ``y``.

Expressions let configuration files describe potentials, drifts and weight
fields as plain strings::

    >>> e = parse("2*x + y^2")
    >>> e.evaluate(1.0, 2.0)
    6.0

Grammar (loosest to tightest binding)::

    + -        binary, left associative
    * /        binary, left associative
    -          unary prefix
    ^          binary, right associative
    atoms      numbers, x, y, f(args), ( expr )

Supported functions: sin, cos, exp, ln, sqrt, tanh, abs (one argument) and
min, max (two arguments).  Numbers are 64-bit floats.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "Expression",
    "Num",
    "Var",
    "Neg",
    "BinOp",
    "Call",
    "ExpressionError",
    "ParseError",
    "EvaluationError",
    "FUNCTIONS",
    "parse",
    "evaluate",
    "evaluate_array",
    "to_string",
]

VARIABLES = ("x", "y")


class ExpressionError(ValueError):
    """Base class for expression failures."""


class ParseError(ExpressionError):
    """Syntax error; ``offset`` is the UTF-8 byte offset into the source."""

    def __init__(self, message: str, offset: int, text: str = ""):
        self.offset = offset
        self.text = text
        super().__init__(f"{message} (at byte {offset})")


class EvaluationError(ExpressionError):
    """Evaluation failure.  ``kind`` is one of 'division by zero', 'domain', 'overflow'."""

    def __init__(self, kind: str, detail: str = ""):
        self.kind = kind
        super().__init__(f"{kind}: {detail}" if detail else kind)


# ---------------------------------------------------------------------------
# AST


class Expression:
    """Immutable expression tree node."""

    prec = 5

    def evaluate(self, x: float, y: float) -> float:
        return evaluate(self, x, y)

    def __call__(self, x, y):
        return evaluate_array(self, x, y)

    def __str__(self) -> str:
        return to_string(self)


@dataclass(frozen=True)
class Num(Expression):
    value: float


@dataclass(frozen=True)
class Var(Expression):
    name: str


@dataclass(frozen=True)
class Neg(Expression):
    operand: Expression
    prec = 3


@dataclass(frozen=True)
class BinOp(Expression):
    op: str
    left: Expression
    right: Expression

    @property
    def prec(self) -> int:  # type: ignore[override]
        return _BINARY[self.op][0]


@dataclass(frozen=True)
class Call(Expression):
    func: str
    args: tuple[Expression, ...]


# op -> (printing precedence, left binding power, right binding power)
_BINARY = {
    "+": (1, 10, 10),
    "-": (1, 10, 10),
    "*": (2, 20, 20),
    "/": (2, 20, 20),
    "^": (4, 40, 39),
}
_UNARY_BP = 30

FUNCTIONS: dict[str, int] = {
    "sin": 1,
    "cos": 1,
    "exp": 1,
    "ln": 1,
    "sqrt": 1,
    "tanh": 1,
    "abs": 1,
    "min": 2,
    "max": 2,
}

# ---------------------------------------------------------------------------
# Lexer

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>[-+*/^(),])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Token:
    kind: str  # 'num', 'ident', 'op', 'eof'
    text: str
    offset: int  # byte offset


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    pos = 0
    byte_pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", byte_pos, text)
        kind = m.lastgroup
        chunk = m.group()
        if kind != "ws":
            tokens.append(_Token(kind, chunk, byte_pos))
        pos = m.end()
        byte_pos += len(chunk.encode("utf-8"))
    tokens.append(_Token("eof", "", byte_pos))
    return tokens


# ---------------------------------------------------------------------------
# Pratt parser


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    @property
    def tok(self) -> _Token:
        return self.tokens[self.i]

    def advance(self) -> _Token:
        t = self.tokens[self.i]
        self.i += 1
        return t

    def error(self, message: str, tok: _Token | None = None):
        tok = tok or self.tok
        raise ParseError(message, tok.offset, self.text)

    def expect(self, text: str) -> _Token:
        if self.tok.text != text or self.tok.kind != "op":
            found = self.tok.text or "end of input"
            self.error(f"expected {text!r}, found {found!r}")
        return self.advance()

    def parse(self) -> Expression:
        node = self.expression(0)
        if self.tok.kind != "eof":
            self.error(f"unexpected token {self.tok.text!r}")
        return node

    def expression(self, rbp: int) -> Expression:
        left = self.nud(self.advance())
        while self.tok.kind == "op" and self.tok.text in _BINARY:
            _, lbp, next_rbp = _BINARY[self.tok.text]
            if lbp <= rbp:
                break
            op = self.advance().text
            left = BinOp(op, left, self.expression(next_rbp))
        return left

    def nud(self, tok: _Token) -> Expression:
        if tok.kind == "num":
            return Num(float(tok.text))
        if tok.kind == "ident":
            if tok.text in VARIABLES:
                return Var(tok.text)
            if tok.text in FUNCTIONS:
                return self.call(tok)
            self.error(f"unknown identifier {tok.text!r}", tok)
        if tok.kind == "op" and tok.text == "-":
            return Neg(self.expression(_UNARY_BP))
        if tok.kind == "op" and tok.text == "(":
            inner = self.expression(0)
            self.expect(")")
            return inner
        found = tok.text or "end of input"
        self.error(f"unexpected {found!r}", tok)

    def call(self, name: _Token) -> Expression:
        self.expect("(")
        args = [self.expression(0)]
        while self.tok.kind == "op" and self.tok.text == ",":
            self.advance()
            args.append(self.expression(0))
        self.expect(")")
        arity = FUNCTIONS[name.text]
        if len(args) != arity:
            self.error(
                f"{name.text}() takes {arity} argument(s), got {len(args)}", name
            )
        return Call(name.text, tuple(args))


def parse(text: str) -> Expression:
    """Parse ``text`` into an expression tree.

    Raises :class:`ParseError` (with a byte offset) on syntax errors, unknown
    identifiers and function arity mismatches.
    """
    if not isinstance(text, str) or not text.strip():
        raise ParseError("empty expression", 0, text if isinstance(text, str) else "")
    return _Parser(text).parse()


# ---------------------------------------------------------------------------
# Pretty printing


def _wrap(node: Expression, needs_parens: bool) -> str:
    s = to_string(node)
    return f"({s})" if needs_parens else s


def to_string(node: Expression) -> str:
    """Render with the minimal parentheses that reproduce the same tree."""
    if isinstance(node, Num):
        v = node.value
        return str(int(v)) if v.is_integer() and abs(v) < 1e15 else repr(v)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        return "-" + _wrap(node.operand, node.operand.prec < Neg.prec)
    if isinstance(node, Call):
        return f"{node.func}({', '.join(to_string(a) for a in node.args)})"
    if isinstance(node, BinOp):
        p = node.prec
        if node.op == "^":
            left = _wrap(node.left, node.left.prec <= p)
            right = _wrap(node.right, node.right.prec < p)
            return f"{left}^{right}"
        left = _wrap(node.left, node.left.prec < p)
        right = _wrap(node.right, node.right.prec <= p)
        return f"{left} {node.op} {right}"
    raise TypeError(f"not an expression node: {node!r}")


# ---------------------------------------------------------------------------
# Scalar evaluation


def _checked(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise EvaluationError("overflow", f"{what} is not finite")
    return value


def _ln(v: float) -> float:
    if v <= 0.0:
        raise EvaluationError("domain", f"ln({v!r})")
    return math.log(v)


def _sqrt(v: float) -> float:
    if v < 0.0:
        raise EvaluationError("domain", f"sqrt({v!r})")
    return math.sqrt(v)


def _exp(v: float) -> float:
    try:
        return math.exp(v)
    except OverflowError:
        raise EvaluationError("overflow", f"exp({v!r})") from None


_SCALAR_FUNCS: dict[str, Callable[..., float]] = {
    "sin": math.sin,
    "cos": math.cos,
    "exp": _exp,
    "ln": _ln,
    "sqrt": _sqrt,
    "tanh": math.tanh,
    "abs": abs,
    "min": min,
    "max": max,
}


def _pow(a: float, b: float) -> float:
    if a == 0.0 and b < 0.0:
        raise EvaluationError("division by zero", f"{a!r}^{b!r}")
    if a < 0.0 and not float(b).is_integer():
        raise EvaluationError("domain", f"{a!r}^{b!r}")
    try:
        return math.pow(a, b)
    except OverflowError:
        raise EvaluationError("overflow", f"{a!r}^{b!r}") from None


def evaluate(node: Expression, x: float, y: float) -> float:
    """Evaluate at a single point; raises :class:`EvaluationError` on failure."""
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        return float(x) if node.name == "x" else float(y)
    if isinstance(node, Neg):
        return -evaluate(node.operand, x, y)
    if isinstance(node, Call):
        args = [evaluate(a, x, y) for a in node.args]
        return _checked(float(_SCALAR_FUNCS[node.func](*args)), node.func)
    if isinstance(node, BinOp):
        a = evaluate(node.left, x, y)
        b = evaluate(node.right, x, y)
        if node.op == "+":
            r = a + b
        elif node.op == "-":
            r = a - b
        elif node.op == "*":
            r = a * b
        elif node.op == "/":
            if b == 0.0:
                raise EvaluationError("division by zero", f"{a!r}/{b!r}")
            r = a / b
        else:
            r = _pow(a, b)
        return _checked(r, node.op)
    raise TypeError(f"not an expression node: {node!r}")


# ---------------------------------------------------------------------------
# Vectorised evaluation


def _first_bad(mask: np.ndarray) -> str:
    idx = np.unravel_index(np.argmax(mask), mask.shape) if mask.ndim else ()
    return f"at index {tuple(int(i) for i in idx)}"


def _array_checked(v: np.ndarray, what: str) -> np.ndarray:
    bad = ~np.isfinite(v)
    if bad.any():
        raise EvaluationError("overflow", f"{what} not finite {_first_bad(bad)}")
    return v


def evaluate_array(node: Expression, x, y) -> np.ndarray:
    """Evaluate elementwise over broadcast arrays ``x`` and ``y``.

    Error semantics match :func:`evaluate`: any invalid point raises.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    shape = np.broadcast_shapes(x.shape, y.shape)
    with np.errstate(all="ignore"):
        out = _eval_np(node, x, y)
    return np.broadcast_to(out, shape).astype(float, copy=True)


def _eval_np(node: Expression, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if isinstance(node, Num):
        return np.asarray(node.value)
    if isinstance(node, Var):
        return x if node.name == "x" else y
    if isinstance(node, Neg):
        return -_eval_np(node.operand, x, y)
    if isinstance(node, Call):
        args = [_eval_np(a, x, y) for a in node.args]
        f = node.func
        if f == "ln":
            if np.any(args[0] <= 0.0):
                raise EvaluationError("domain", f"ln of non-positive {_first_bad(args[0] <= 0)}")
            r = np.log(args[0])
        elif f == "sqrt":
            if np.any(args[0] < 0.0):
                raise EvaluationError("domain", f"sqrt of negative {_first_bad(args[0] < 0)}")
            r = np.sqrt(args[0])
        elif f == "min":
            r = np.minimum(args[0], args[1])
        elif f == "max":
            r = np.maximum(args[0], args[1])
        elif f == "abs":
            r = np.abs(args[0])
        else:
            r = getattr(np, f)(args[0])
        return _array_checked(r, f)
    if isinstance(node, BinOp):
        a = _eval_np(node.left, x, y)
        b = _eval_np(node.right, x, y)
        if node.op == "+":
            r = a + b
        elif node.op == "-":
            r = a - b
        elif node.op == "*":
            r = a * b
        elif node.op == "/":
            zero = np.broadcast_to(b == 0.0, np.broadcast_shapes(np.shape(a), np.shape(b)))
            if zero.any():
                raise EvaluationError("division by zero", _first_bad(zero))
            r = a / b
        else:
            a_, b_ = np.broadcast_arrays(a, b)
            if np.any((a_ == 0.0) & (b_ < 0.0)):
                raise EvaluationError("division by zero", "zero to a negative power")
            bad = (a_ < 0.0) & (b_ != np.floor(b_))
            if bad.any():
                raise EvaluationError("domain", f"negative base, fractional exponent {_first_bad(bad)}")
            r = np.power(a_, b_)
        return _array_checked(r, node.op)
    raise TypeError(f"not an expression node: {node!r}")
