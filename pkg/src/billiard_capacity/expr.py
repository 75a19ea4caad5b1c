"""Closed-form scalar expressions with exact forward-mode derivatives.

Expressions are parsed once into an immutable AST.  Evaluation compiles the
AST into straight-line Python code that propagates (value, gradient, Hessian)
jets through every node, so derivatives are exact up to rounding.  Two
back ends are generated from the same code path: a scalar one working on
plain floats (used inside tight loops) and a vectorized numpy one.

Grammar::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := ('-' | '+') unary | power
    power  := atom ('^' INT)?
    atom   := NUMBER | 'pi' | VAR | FUNC '(' expr (',' expr)* ')' | '(' expr ')'

Variables are ``x1 .. xn`` (also ``x_1``), with the aliases ``x, y, z, w``
for the first four coordinates.  Functions: ``sin cos exp sqrt`` and the
smoothed helpers ``sabs(u, k) = sqrt(u^2 + k^2)``,
``smin(a, b, k)`` and ``smax(a, b, k)``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import cached_property
from typing import Union

import numpy as np

__all__ = [
    "Call",
    "BinOp",
    "DomainError",
    "Expression",
    "Neg",
    "Num",
    "ParseError",
    "Pow",
    "Var",
    "eval_jet",
    "parse",
    "to_source",
]


class ParseError(ValueError):
    """Malformed expression text.  ``position`` is a 0-based character offset."""

    def __init__(self, message: str, position: int, source: str = ""):
        super().__init__(f"{message} at position {position}")
        self.position = position
        self.source = source


class DomainError(ArithmeticError):
    """Evaluation left the domain of an operation (division by zero, sqrt < 0)."""

    def __init__(self, message: str, subexpression: str):
        super().__init__(f"{message} in {subexpression}")
        self.subexpression = subexpression


# --------------------------------------------------------------------------- AST


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    index: int  # 0-based


@dataclass(frozen=True)
class Neg:
    arg: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Pow:
    base: "Node"
    exponent: int


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple


Node = Union[Num, Var, Neg, BinOp, Pow, Call]

_ARITY = {"sin": 1, "cos": 1, "exp": 1, "sqrt": 1, "sabs": 2, "smin": 3, "smax": 3}
_ALIASES = {"softabs": "sabs", "softmin": "smin", "softmax": "smax"}
_VAR_ALIASES = {"x": 0, "y": 1, "z": 2, "w": 3}
_VAR_RE = re.compile(r"x_?([1-9][0-9]*)$")

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>\*\*|[-+*/^(),])
    """,
    re.VERBOSE,
)


def _tokenize(source: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if m is None:
            raise ParseError(f"unexpected character {source[pos]!r}", pos, source)
        kind = m.lastgroup
        if kind != "ws":
            text = m.group()
            if text == "**":
                text = "^"
            tokens.append((kind, text, pos))
        pos = m.end()
    tokens.append(("end", "", len(source)))
    return tokens


class _Parser:
    def __init__(self, source: str, dimension: int):
        self.source = source
        self.dimension = dimension
        self.tokens = _tokenize(source)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def advance(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def error(self, message, tok=None):
        tok = tok or self.peek()
        return ParseError(message, tok[2], self.source)

    def expect(self, text):
        tok = self.peek()
        if tok[1] != text:
            shown = repr(tok[1]) if tok[0] != "end" else "end of input"
            raise self.error(f"expected {text!r}, found {shown}")
        return self.advance()

    def parse(self) -> Node:
        node = self.expr()
        tok = self.peek()
        if tok[0] != "end":
            raise self.error(f"unexpected token {tok[1]!r}")
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.advance()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/"):
            op = self.advance()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self):
        tok = self.peek()
        if tok[1] == "-":
            self.advance()
            return Neg(self.unary())
        if tok[1] == "+":
            self.advance()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[1] != "^":
            return base
        self.advance()
        tok = self.peek()
        if tok[0] != "num" or not tok[1].isdigit():
            raise self.error("exponent must be a non-negative integer literal")
        self.advance()
        if self.peek()[1] == "^":
            raise self.error("chained exponent; use parentheses")
        return Pow(base, int(tok[1]))

    def atom(self):
        tok = self.peek()
        kind, text, pos = tok
        if kind == "num":
            self.advance()
            return Num(float(text))
        if kind == "ident":
            self.advance()
            if self.peek()[1] == "(":
                return self.call(tok)
            if text == "pi":
                return Num(math.pi)
            return self.variable(tok)
        if text == "(":
            self.advance()
            node = self.expr()
            self.expect(")")
            return node
        shown = repr(text) if kind != "end" else "end of input"
        raise self.error(f"unexpected token {shown}")

    def variable(self, tok):
        text = tok[1]
        if text in _VAR_ALIASES:
            index = _VAR_ALIASES[text]
        else:
            m = _VAR_RE.match(text)
            if m is None:
                raise self.error(f"unknown identifier {text!r}", tok)
            index = int(m.group(1)) - 1
        if index >= self.dimension:
            raise self.error(
                f"variable {text!r} exceeds dimension {self.dimension}", tok
            )
        return Var(index)

    def call(self, tok):
        name = _ALIASES.get(tok[1], tok[1])
        if name not in _ARITY:
            raise self.error(f"unknown identifier {tok[1]!r}", tok)
        self.expect("(")
        args = [self.expr()]
        while self.peek()[1] == ",":
            self.advance()
            args.append(self.expr())
        self.expect(")")
        if len(args) != _ARITY[name]:
            raise self.error(
                f"{name} takes {_ARITY[name]} argument(s), got {len(args)}", tok
            )
        return Call(name, tuple(args))


def to_source(node) -> str:
    """Fully parenthesized text that parses back to the same AST."""
    if isinstance(node, Expression):
        node = node.root
    if isinstance(node, Num):
        text = repr(node.value)
        return f"({text})" if node.value < 0 else text
    if isinstance(node, Var):
        return f"x{node.index + 1}"
    if isinstance(node, Neg):
        return f"(-{to_source(node.arg)})"
    if isinstance(node, BinOp):
        return f"({to_source(node.left)} {node.op} {to_source(node.right)})"
    if isinstance(node, Pow):
        return f"({to_source(node.base)}^{node.exponent})"
    if isinstance(node, Call):
        return f"{node.name}({', '.join(to_source(a) for a in node.args)})"
    raise TypeError(f"not an expression node: {node!r}")


def _variables(node, acc: set) -> set:
    if isinstance(node, Var):
        acc.add(node.index)
    elif isinstance(node, Neg):
        _variables(node.arg, acc)
    elif isinstance(node, BinOp):
        _variables(node.left, acc)
        _variables(node.right, acc)
    elif isinstance(node, Pow):
        _variables(node.base, acc)
    elif isinstance(node, Call):
        for a in node.args:
            _variables(a, acc)
    return acc


# ----------------------------------------------------------------------- codegen


def _desugar(node: Call) -> Node:
    if node.name == "sabs":
        u, k = node.args
        return Call("sqrt", (BinOp("+", Pow(u, 2), Pow(k, 2)),))
    a, b, k = node.args
    root = Call("sqrt", (BinOp("+", Pow(BinOp("-", a, b), 2), Pow(k, 2)),))
    combine = "-" if node.name == "smin" else "+"
    return BinOp("*", Num(0.5), BinOp(combine, BinOp("+", a, b), root))


def _sum(terms):
    terms = [t for t in terms if t is not None]
    if not terms:
        return None
    return " + ".join(terms)


class _Codegen:
    """Emit straight-line code propagating jets of a given order."""

    def __init__(self, n: int, order: int, vectorized: bool):
        self.n = n
        self.order = order
        self.vectorized = vectorized
        self.lines: list[str] = []
        self.messages: list[tuple[str, str]] = []
        self.count = 0

    def tmp(self, code: str) -> str:
        name = f"t{self.count}"
        self.count += 1
        self.lines.append(f"{name} = {code}")
        return name

    def check(self, condition: str, message: str, node):
        self.messages.append((message, to_source(node)))
        idx = len(self.messages) - 1
        cond = f"_any({condition})" if self.vectorized else condition
        self.lines.append(f"if {cond}: _fail({idx})")

    def concrete(self, code):
        return code if code is not None else "0.0"

    # each jet is (value, grad list, hess dict keyed by (i, j) with i <= j)
    def emit(self, node):
        n = self.n
        if isinstance(node, Num):
            return repr(float(node.value)), [None] * n, {}
        if isinstance(node, Var):
            g = [None] * n
            g[node.index] = "1.0"
            return f"x{node.index}", g, {}
        if isinstance(node, Neg):
            v, g, h = self.emit(node.arg)
            return (
                self.tmp(f"-({v})"),
                [None if gi is None else self.tmp(f"-{gi}") for gi in g],
                {k: self.tmp(f"-{hk}") for k, hk in h.items()},
            )
        if isinstance(node, BinOp):
            return self.binop(node)
        if isinstance(node, Pow):
            return self.power(node)
        if isinstance(node, Call):
            if node.name in ("sabs", "smin", "smax"):
                k = node.args[1] if node.name == "sabs" else node.args[2]
                kv, _, _ = self.emit(k)
                self.check(f"{kv} <= 0.0", "smoothing parameter must be positive", node)
                return self.emit(_desugar(node))
            return self.function(node)
        raise TypeError(f"not an expression node: {node!r}")

    def binop(self, node):
        a = self.emit(node.left)
        b = self.emit(node.right)
        if node.op in "+-":
            sign = node.op
            v = self.tmp(f"{a[0]} {sign} {b[0]}")
            g = []
            for ga, gb in zip(a[1], b[1]):
                if gb is None:
                    g.append(ga)
                elif ga is None:
                    g.append(gb if sign == "+" else self.tmp(f"-{gb}"))
                else:
                    g.append(self.tmp(f"{ga} {sign} {gb}"))
            h = {}
            for key in set(a[2]) | set(b[2]):
                ha, hb = a[2].get(key), b[2].get(key)
                if hb is None:
                    h[key] = ha
                elif ha is None:
                    h[key] = hb if sign == "+" else self.tmp(f"-{hb}")
                else:
                    h[key] = self.tmp(f"{ha} {sign} {hb}")
            return v, g, h
        if node.op == "/":
            rb = self.chain(b, "recip", node.right)
            return self.product(a, rb)
        return self.product(a, b)

    def product(self, a, b):
        va, ga, ha = a
        vb, gb, hb = b
        v = self.tmp(f"{va}*{vb}")
        g = [None] * self.n
        if self.order >= 1:
            for i in range(self.n):
                s = _sum(
                    [
                        None if ga[i] is None else f"{ga[i]}*{vb}",
                        None if gb[i] is None else f"{va}*{gb[i]}",
                    ]
                )
                g[i] = None if s is None else self.tmp(s)
        h = {}
        if self.order >= 2:
            for i in range(self.n):
                for j in range(i, self.n):
                    terms = [
                        None if (i, j) not in ha else f"{ha[i, j]}*{vb}",
                        None if (i, j) not in hb else f"{va}*{hb[i, j]}",
                        None if ga[i] is None or gb[j] is None else f"{ga[i]}*{gb[j]}",
                        None if ga[j] is None or gb[i] is None else f"{ga[j]}*{gb[i]}",
                    ]
                    s = _sum(terms)
                    if s is not None:
                        h[i, j] = self.tmp(s)
        return v, g, h

    def power(self, node):
        k = node.exponent
        if k == 0:
            return "1.0", [None] * self.n, {}
        u = self.emit(node.base)
        if k == 1:
            return u
        return self.chain(u, ("pow", k), node.base)

    def function(self, node):
        u = self.emit(node.args[0])
        return self.chain(u, node.name, node)

    def chain(self, u, kind, node):
        """Apply a univariate function f to jet u via the chain rule."""
        vu, gu, hu = u
        has_grad = any(gi is not None for gi in gu)
        need1 = self.order >= 1 and has_grad
        need2 = self.order >= 2 and has_grad
        f1 = f2 = None
        if kind == "recip":
            self.check(f"{vu} == 0.0", "division by zero", node)
            f = self.tmp(f"1.0/{vu}")
            if need1:
                f1 = self.tmp(f"-{f}*{f}")
            if need2:
                f2 = self.tmp(f"2.0*{f}*{f}*{f}")
        elif kind == "sqrt":
            self.check(f"{vu} < 0.0", "sqrt of negative", node)
            f = self.tmp(f"_sqrt({vu})")
            if need1:
                self.check(f"{f} == 0.0", "sqrt derivative at zero", node)
                f1 = self.tmp(f"0.5/{f}")
            if need2:
                f2 = self.tmp(f"-0.5*{f1}/{vu}")
        elif kind == "sin":
            f = self.tmp(f"_sin({vu})")
            if need1:
                f1 = self.tmp(f"_cos({vu})")
            if need2:
                f2 = self.tmp(f"-{f}")
        elif kind == "cos":
            f = self.tmp(f"_cos({vu})")
            if need1:
                f1 = self.tmp(f"-_sin({vu})")
            if need2:
                f2 = self.tmp(f"-{f}")
        elif kind == "exp":
            f = self.tmp(f"_exp({vu})")
            f1 = f2 = f
        else:
            k = kind[1]
            f = self.tmp(f"{vu}**{k}")
            if need1:
                f1 = self.tmp(f"{float(k)}*{vu}" if k == 2 else f"{float(k)}*{vu}**{k - 1}")
            if need2:
                f2 = (
                    "2.0"
                    if k == 2
                    else self.tmp(
                        f"{float(k * (k - 1))}*{vu}" if k == 3
                        else f"{float(k * (k - 1))}*{vu}**{k - 2}"
                    )
                )
        g = [None] * self.n
        h = {}
        if need1:
            g = [None if gi is None else self.tmp(f"{f1}*{gi}") for gi in gu]
        if need2:
            for i in range(self.n):
                for j in range(i, self.n):
                    terms = [
                        None if (i, j) not in hu else f"{f1}*{hu[i, j]}",
                        None if gu[i] is None or gu[j] is None else f"{f2}*{gu[i]}*{gu[j]}",
                    ]
                    s = _sum(terms)
                    if s is not None:
                        h[i, j] = self.tmp(s)
        return f, g, h

    def compile(self, root):
        v, g, h = self.emit(root)
        n = self.n
        if self.vectorized:
            head = ["def _jet(X):", "    _z = _zeros(X.shape[:-1])"]
            head += [f"    x{i} = X[..., {i}]" for i in range(n)]
            wrap = lambda c: f"(_z + {self.concrete(c)})"  # noqa: E731
        else:
            head = [f"def _jet({', '.join(f'x{i}' for i in range(n))}):"]
            wrap = lambda c: f"({self.concrete(c)})"  # noqa: E731
        body = ["    " + line for line in self.lines]
        out = [f"    _v = {wrap(v)}"]
        if self.order >= 1:
            out.append(f"    _g = ({', '.join(wrap(gi) for gi in g)},)")
        if self.order >= 2:
            rows = []
            for i in range(n):
                row = [h.get((min(i, j), max(i, j))) for j in range(n)]
                rows.append("(" + ", ".join(wrap(c) for c in row) + ",)")
            out.append(f"    _h = ({', '.join(rows)},)")
        ret = ["_v", "_g", "_h"][: self.order + 1]
        out.append(f"    return {', '.join(ret)}" if self.order else "    return _v")
        code = "\n".join(head + body + out)

        messages = self.messages

        def _fail(idx):
            msg, sub = messages[idx]
            raise DomainError(msg, sub)

        if self.vectorized:
            namespace = dict(
                _sqrt=np.sqrt, _sin=np.sin, _cos=np.cos, _exp=np.exp,
                _any=np.any, _zeros=np.zeros, _fail=_fail,
            )
        else:
            namespace = dict(
                _sqrt=math.sqrt, _sin=math.sin, _cos=math.cos, _exp=math.exp,
                _fail=_fail,
            )
        exec(compile(code, "<expression>", "exec"), namespace)
        return namespace["_jet"]


# ------------------------------------------------------------------- Expression


@dataclass(frozen=True)
class Expression:
    """A parsed scalar function of ``dimension`` variables.

    The compiled evaluators are built lazily and cached on the instance;
    they are pure functions, so one Expression may be shared freely.
    """

    root: Node
    dimension: int

    def __str__(self) -> str:
        return to_source(self.root)

    @property
    def variables(self) -> frozenset:
        return frozenset(_variables(self.root, set()))

    def _compiled(self, order: int, vectorized: bool):
        key = ("_cache", order, vectorized)
        cache = self.__dict__.setdefault("_jet_cache", {})
        if key not in cache:
            cache[key] = _Codegen(self.dimension, order, vectorized).compile(self.root)
        return cache[key]

    @cached_property
    def scalar_value(self):
        """Plain-float evaluator ``f(x1, ..., xn) -> value``."""
        return self._compiled(0, False)

    @cached_property
    def scalar_grad(self):
        """Plain-float evaluator returning ``(value, grad_tuple)``."""
        return self._compiled(1, False)

    @cached_property
    def scalar_jet(self):
        """Plain-float evaluator returning ``(value, grad, hess)`` as tuples."""
        return self._compiled(2, False)

    def _check_dim(self, X):
        if X.shape[-1] != self.dimension:
            raise ValueError(
                f"point has dimension {X.shape[-1]}, expression expects {self.dimension}"
            )

    def values(self, X) -> np.ndarray:
        """Evaluate at an array of points with shape (..., n)."""
        X = np.asarray(X, dtype=float)
        self._check_dim(X)
        with np.errstate(over="ignore", invalid="ignore"):
            return self._compiled(0, True)(X)

    def gradients(self, X) -> tuple[np.ndarray, np.ndarray]:
        X = np.asarray(X, dtype=float)
        self._check_dim(X)
        with np.errstate(over="ignore", invalid="ignore"):
            v, g = self._compiled(1, True)(X)
        return v, np.stack(g, axis=-1)

    def jets(self, X) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        X = np.asarray(X, dtype=float)
        self._check_dim(X)
        with np.errstate(over="ignore", invalid="ignore"):
            v, g, h = self._compiled(2, True)(X)
        grad = np.stack(g, axis=-1)
        hess = np.stack([np.stack(row, axis=-1) for row in h], axis=-2)
        return v, grad, hess

    def __call__(self, x) -> float:
        x = np.asarray(x, dtype=float)
        self._check_dim(x)
        return _guard(self.scalar_value, x)


def _guard(fn, x):
    try:
        return fn(*map(float, x))
    except OverflowError as exc:
        raise DomainError("overflow", "exp(...)") from exc


def parse(source: str, dimension: int) -> Expression:
    """Parse ``source`` into an :class:`Expression` over ``dimension`` variables."""
    if dimension < 2:
        raise ValueError("dimension must be at least 2")
    if not source or not source.strip():
        raise ParseError("empty expression", 0, source)
    return Expression(_Parser(source, dimension).parse(), dimension)


def eval_jet(expr: Expression, point) -> tuple[float, np.ndarray, np.ndarray]:
    """Value, gradient and Hessian of ``expr`` at ``point``."""
    x = np.asarray(point, dtype=float)
    expr._check_dim(x)
    v, g, h = _guard(expr.scalar_jet, x)
    return float(v), np.array(g, dtype=float), np.array(h, dtype=float)
