"""Parsing, evaluation, and differentiation of model and constraint formulas.

The language is deliberately small: numbers, declared parameter and covariate
identifiers, ``+ - * / ^``, unary minus, ``exp``, ``log``, and the single
data aggregate ``mean(...)`` that averages its argument over the data rows.
That is exactly enough to write nonlinear regression functions and
average-partial-effect style constraints as text.

Evaluation is vectorized over rows: a covariate leaf evaluates to its full
column, so an expression either produces one value per row (a model surface)
or a scalar (a constraint, where row dependence only enters through
``mean``).  Derivatives with respect to parameters use forward-mode dual
numbers and are exact.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Union

import numpy as np

__all__ = [
    "Expression",
    "parse_expression",
    "ExpressionError",
    "ParseError",
    "DomainError",
]

_IDENT_RE = re.compile(r"[A-Za-z][A-Za-z0-9_]*")
_NUMBER_RE = re.compile(r"(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?")
_FUNCTIONS = ("exp", "log", "mean")


class ExpressionError(Exception):
    pass


class ParseError(ExpressionError):
    """Syntax or symbol error; carries the offending character position."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (position {position})")
        self.position = position


class DomainError(ExpressionError):
    """Evaluation hit a point outside the expression's domain."""


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Param:
    name: str


@dataclass(frozen=True)
class Covariate:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str  # 'neg' | 'exp' | 'log' | 'mean'
    arg: "Node"


@dataclass(frozen=True)
class Binary:
    op: str  # '+' | '-' | '*' | '/' | '^'
    left: "Node"
    right: "Node"


Node = Union[Const, Param, Covariate, Unary, Binary]


# ---------------------------------------------------------------------------
# Dual numbers carrying all directional derivatives at once: ``val`` is a
# scalar or an (n,) row vector, ``dot`` holds the p tangents as (p,) for
# scalar values or (n, p) for row values.  One tree pass yields the full
# jacobian.


def _col(v):
    """Align a value for elementwise combination with a tangent block."""
    return v if np.ndim(v) == 0 else v[:, None]


class _Dual:
    __slots__ = ("val", "dot")

    def __init__(self, val, dot):
        self.val = val
        self.dot = dot

    def __add__(self, o):
        return _Dual(self.val + o.val, self.dot + o.dot)

    def __sub__(self, o):
        return _Dual(self.val - o.val, self.dot - o.dot)

    def __mul__(self, o):
        return _Dual(self.val * o.val, self.dot * _col(o.val) + o.dot * _col(self.val))

    def __truediv__(self, o):
        inv = 1.0 / o.val
        return _Dual(self.val * inv,
                     self.dot * _col(inv) - o.dot * _col(self.val * inv * inv))

    def __neg__(self):
        return _Dual(-self.val, -self.dot)


def _dual_exp(x: _Dual) -> _Dual:
    e = np.exp(x.val)
    return _Dual(e, x.dot * _col(e))


def _dual_log(x: _Dual) -> _Dual:
    return _Dual(np.log(x.val), x.dot * _col(1.0 / x.val))


def _dual_mean(x: _Dual) -> _Dual:
    dot = np.mean(x.dot, axis=0) if np.ndim(x.dot) == 2 else x.dot
    return _Dual(np.mean(x.val), dot)


def _dual_pow(base: _Dual, expo: _Dual) -> _Dual:
    # Constant integer exponents keep the power rule valid for any base sign.
    ev = expo.val
    const_expo = np.ndim(ev) == 0 and not np.any(expo.dot)
    if const_expo and float(ev) == int(ev):
        k = int(ev)
        v = base.val ** k
        if k == 0:
            return _Dual(v, 0.0 * base.dot)
        return _Dual(v, base.dot * _col(k * base.val ** (k - 1)))
    if np.any(np.asarray(base.val) <= 0.0):
        raise DomainError("power with non-constant exponent requires a positive base")
    v = base.val ** ev
    return _Dual(v, expo.dot * _col(v * np.log(base.val))
                 + base.dot * _col(v * ev / base.val))


# ---------------------------------------------------------------------------
# Parser (recursive descent)


class _Tokenizer:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0
        self.tok = None
        self.tok_pos = 0
        self.advance()

    def advance(self):
        t = self.text
        i = self.pos
        while i < len(t) and t[i].isspace():
            i += 1
        self.tok_pos = i
        if i >= len(t):
            self.tok = ("end", "")
            self.pos = i
            return
        ch = t[i]
        if ch in "+-*/^(),":
            self.tok = ("op", ch)
            self.pos = i + 1
            return
        m = _NUMBER_RE.match(t, i)
        if m:
            self.tok = ("num", m.group())
            self.pos = m.end()
            return
        m = _IDENT_RE.match(t, i)
        if m:
            self.tok = ("ident", m.group())
            self.pos = m.end()
            return
        raise ParseError(f"unexpected character {ch!r}", i)


class _Parser:
    def __init__(self, text: str, params: tuple, covariates: tuple):
        self.tz = _Tokenizer(text)
        self.params = set(params)
        self.covariates = set(covariates)

    def parse(self) -> Node:
        node = self.expr()
        kind, val = self.tz.tok
        if kind != "end":
            raise ParseError(f"unexpected {val!r} after expression", self.tz.tok_pos)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.tz.tok == ("op", "+") or self.tz.tok == ("op", "-"):
            op = self.tz.tok[1]
            self.tz.advance()
            node = Binary(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.tz.tok == ("op", "*") or self.tz.tok == ("op", "/"):
            op = self.tz.tok[1]
            self.tz.advance()
            node = Binary(op, node, self.unary())
        return node

    def unary(self) -> Node:
        if self.tz.tok == ("op", "-"):
            self.tz.advance()
            return Unary("neg", self.unary())
        if self.tz.tok == ("op", "+"):
            self.tz.advance()
            return self.unary()
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        if self.tz.tok == ("op", "^"):
            self.tz.advance()
            return Binary("^", base, self.unary())  # right associative
        return base

    def atom(self) -> Node:
        kind, val = self.tz.tok
        pos = self.tz.tok_pos
        if kind == "num":
            self.tz.advance()
            return Const(float(val))
        if kind == "op" and val == "(":
            self.tz.advance()
            node = self.expr()
            self.expect(")")
            return node
        if kind == "ident":
            self.tz.advance()
            if val in _FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Unary(val, arg)
            if val in self.params:
                return Param(val)
            if val in self.covariates:
                return Covariate(val)
            raise ParseError(f"undeclared symbol {val!r}", pos)
        raise ParseError(f"expected a value, got {val!r}" if val else "unexpected end of input", pos)

    def expect(self, ch: str):
        if self.tz.tok != ("op", ch):
            raise ParseError(f"expected {ch!r}", self.tz.tok_pos)
        self.tz.advance()


# ---------------------------------------------------------------------------
# Evaluation


def _check_log_domain(v):
    if np.any(np.asarray(v) <= 0.0):
        raise DomainError("log of a non-positive value")


def _check_div_domain(v):
    if np.any(np.asarray(v) == 0.0):
        raise DomainError("division by zero")


def _eval(node: Node, env: dict):
    if isinstance(node, Const):
        return node.value
    if isinstance(node, (Param, Covariate)):
        return env[node.name]
    if isinstance(node, Unary):
        a = _eval(node.arg, env)
        if node.op == "neg":
            return -a
        if node.op == "exp":
            return np.exp(a)
        if node.op == "log":
            _check_log_domain(a)
            return np.log(a)
        if node.op == "mean":
            return np.mean(a)
    if isinstance(node, Binary):
        l = _eval(node.left, env)
        r = _eval(node.right, env)
        if node.op == "+":
            return l + r
        if node.op == "-":
            return l - r
        if node.op == "*":
            return l * r
        if node.op == "/":
            _check_div_domain(r)
            return l / r
        if node.op == "^":
            return _pow_plain(l, r)
    raise TypeError(f"unknown node {node!r}")


def _pow_plain(base, expo):
    if np.isscalar(expo) and float(expo) == int(expo):
        return base ** int(expo)
    if np.any(np.asarray(base) <= 0.0):
        raise DomainError("power with non-integer exponent requires a positive base")
    return base ** expo


def _eval_dual(node: Node, env: dict, zero) -> _Dual:
    if isinstance(node, Const):
        return _Dual(node.value, zero)
    if isinstance(node, (Param, Covariate)):
        v = env[node.name]
        return v if isinstance(v, _Dual) else _Dual(v, zero)
    if isinstance(node, Unary):
        a = _eval_dual(node.arg, env, zero)
        if node.op == "neg":
            return -a
        if node.op == "exp":
            return _dual_exp(a)
        if node.op == "log":
            _check_log_domain(a.val)
            return _dual_log(a)
        if node.op == "mean":
            return _dual_mean(a)
    if isinstance(node, Binary):
        l = _eval_dual(node.left, env, zero)
        r = _eval_dual(node.right, env, zero)
        if node.op == "+":
            return l + r
        if node.op == "-":
            return l - r
        if node.op == "*":
            return l * r
        if node.op == "/":
            _check_div_domain(r.val)
            return l / r
        if node.op == "^":
            return _dual_pow(l, r)
    raise TypeError(f"unknown node {node!r}")


# ---------------------------------------------------------------------------
# Affinity analysis (degree of the polynomial dependence on parameters;
# math.inf marks any non-polynomial dependence).


def _param_degree(node: Node) -> float:
    if isinstance(node, Const) or isinstance(node, Covariate):
        return 0.0
    if isinstance(node, Param):
        return 1.0
    if isinstance(node, Unary):
        d = _param_degree(node.arg)
        if node.op in ("neg", "mean"):
            return d
        return 0.0 if d == 0.0 else math.inf
    if isinstance(node, Binary):
        dl = _param_degree(node.left)
        dr = _param_degree(node.right)
        if node.op in ("+", "-"):
            return max(dl, dr)
        if node.op == "*":
            return dl + dr
        if node.op == "/":
            return dl if dr == 0.0 else math.inf
        if node.op == "^":
            if dl == 0.0 and dr == 0.0:
                return 0.0
            if dr == 0.0 and isinstance(node.right, Const) and float(node.right.value) == int(node.right.value):
                k = int(node.right.value)
                if k >= 0:
                    return dl * k
            return math.inf
    raise TypeError(f"unknown node {node!r}")


# ---------------------------------------------------------------------------
# Printing


_PRECEDENCE = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4}


def _to_string(node: Node, parent_prec: int = 0) -> str:
    if isinstance(node, Const):
        return repr(node.value)
    if isinstance(node, (Param, Covariate)):
        return node.name
    if isinstance(node, Unary):
        if node.op == "neg":
            s = "-" + _to_string(node.arg, _PRECEDENCE["neg"])
            return f"({s})" if parent_prec > _PRECEDENCE["neg"] else s
        return f"{node.op}({_to_string(node.arg, 0)})"
    if isinstance(node, Binary):
        prec = _PRECEDENCE[node.op]
        left = _to_string(node.left, prec)
        # right operand of -, /, ^ needs parens at equal precedence
        right = _to_string(node.right, prec + (0 if node.op in ("+", "*") else 1))
        s = f"{left} {node.op} {right}" if node.op != "^" else f"{left}{node.op}{right}"
        return f"({s})" if prec < parent_prec else s
    raise TypeError(f"unknown node {node!r}")


# ---------------------------------------------------------------------------
# Public API


class Expression:
    """A parsed formula over declared parameters and covariate columns."""

    def __init__(self, root: Node, parameters: tuple, covariates: tuple, text: str = ""):
        self.root = root
        self.parameters = tuple(parameters)
        self.covariates = tuple(covariates)
        self.text = text
        self._used = _symbols(root)

    def __repr__(self):
        return f"Expression({self.to_string()!r})"

    def to_string(self) -> str:
        return _to_string(self.root)

    @property
    def used_symbols(self) -> frozenset:
        return self._used

    def is_affine_in_params(self) -> bool:
        return _param_degree(self.root) <= 1.0

    def _env(self, params, data):
        env = {}
        for name in self.parameters:
            if name in self._used:
                if params is None or name not in params:
                    raise ExpressionError(f"missing binding for parameter {name!r}")
                env[name] = float(params[name])
        for name in self.covariates:
            if name in self._used:
                if data is None or name not in data:
                    raise ExpressionError(f"missing binding for covariate {name!r}")
                env[name] = np.asarray(data[name], dtype=float)
        return env

    def eval(self, params=None, data=None):
        """Evaluate; returns a scalar or a per-row array.

        ``params`` maps parameter names to floats, ``data`` maps covariate
        names to columns (all of one common length n).  The result is an
        array of length n when a covariate appears outside ``mean``.
        """
        out = _eval(self.root, self._env(params, data))
        return float(out) if np.isscalar(out) or np.ndim(out) == 0 else np.asarray(out, dtype=float)

    def grad(self, params=None, data=None, wrt=None):
        """Forward-mode derivatives with respect to ``wrt`` (default: all
        declared parameters, in declaration order).

        All directions are propagated in a single pass.  Returns shape
        ``(len(wrt),)`` for scalar-valued expressions and ``(n, len(wrt))``
        for row-valued ones.
        """
        if wrt is None:
            wrt = self.parameters
        wrt = tuple(wrt)
        for name in wrt:
            if name not in self.parameters:
                raise ExpressionError(f"{name!r} is not a declared parameter")
        env = self._env(params, data)
        p = len(wrt)
        zero = np.zeros(p)
        eye = np.eye(p)
        for i, name in enumerate(wrt):
            if name in env:
                env[name] = _Dual(env[name], eye[i])
        res = _eval_dual(self.root, env, zero)
        dot = np.asarray(res.dot, dtype=float)
        if np.ndim(res.val) == 1 and dot.ndim == 1:
            # value varies by row but the tangent happens to be constant
            dot = np.tile(dot, (np.shape(res.val)[0], 1))
        return dot

    def affine_parts(self, data=None, wrt=None):
        """Exact affine decomposition value = a0 + A @ theta for affine
        expressions; raises for nonlinear ones."""
        if not self.is_affine_in_params():
            raise ExpressionError("expression is not affine in the parameters")
        if wrt is None:
            wrt = self.parameters
        zeros = {name: 0.0 for name in self.parameters}
        a0 = self.eval(zeros, data)
        A = self.grad(zeros, data, wrt=wrt)
        return a0, A


def _symbols(node: Node) -> frozenset:
    out = set()

    def walk(nd):
        if isinstance(nd, (Param, Covariate)):
            out.add(nd.name)
        elif isinstance(nd, Unary):
            walk(nd.arg)
        elif isinstance(nd, Binary):
            walk(nd.left)
            walk(nd.right)

    walk(node)
    return frozenset(out)


def parse_expression(text: str, parameters, covariates=()) -> Expression:
    """Parse ``text`` against declared parameter and covariate names.

    Standard arithmetic precedence, ``^`` for powers (right associative),
    identifiers must be declared; ``exp``/``log``/``mean`` are reserved.
    """
    if not isinstance(text, str) or not text.strip():
        raise ParseError("empty expression", 0)
    params = tuple(parameters)
    covs = tuple(covariates)
    names = list(params) + list(covs)
    if len(set(names)) != len(names):
        raise ExpressionError("parameter and covariate names must be distinct")
    for nm in names:
        if not _IDENT_RE.fullmatch(nm):
            raise ExpressionError(f"invalid identifier {nm!r}")
        if nm in _FUNCTIONS:
            raise ExpressionError(f"{nm!r} is a reserved function name")
    root = _Parser(text, params, covs).parse()
    return Expression(root, params, covs, text=text)
