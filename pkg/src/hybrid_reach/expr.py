"""Small arithmetic language for vector fields and running costs.

Grammar (one expression per state component, separated by ``;``)::

    program := expr (';' expr)*
    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := ('-' | '+') unary | power
    power   := atom ('^' unary)?          # right-associative, binds tighter than unary minus
    atom    := NUMBER | NAME | NAME '(' expr (',' expr)* ')' | '(' expr ')'

Names are ``x1..xn``, ``u1..um``, the constant ``pi`` and the functions
``sin cos tan sqrt exp ln abs``. Evaluation is vectorized over numpy arrays.
"""
from __future__ import annotations

import re
from typing import NamedTuple

import numpy as np

from .errors import ArityError, EvaluationError, ParseError, UnknownIdentifier

FUNCTIONS = {
    "sin": (1, np.sin),
    "cos": (1, np.cos),
    "tan": (1, np.tan),
    "sqrt": (1, np.sqrt),
    "exp": (1, np.exp),
    "ln": (1, np.log),
    "abs": (1, np.abs),
}
CONSTANTS = {"pi": np.pi}


class Num(NamedTuple):
    value: float


class Var(NamedTuple):
    kind: str  # "x" or "u"
    index: int  # 1-based


class Neg(NamedTuple):
    arg: object


class Bin(NamedTuple):
    op: str
    left: object
    right: object


class Call(NamedTuple):
    name: str
    args: tuple


class Const(NamedTuple):
    name: str


_TOKEN = re.compile(
    r"(?P<ws>[ \t\r]+)|(?P<nl>\n)"
    r"|(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),;])"
)


class _Tok(NamedTuple):
    kind: str
    text: str
    line: int
    col: int


def tokenize(src):
    toks = []
    pos, line, line_start = 0, 1, 0
    while pos < len(src):
        mt = _TOKEN.match(src, pos)
        if not mt:
            raise ParseError(f"unexpected character {src[pos]!r}", line, pos - line_start + 1)
        kind = mt.lastgroup
        if kind == "nl":
            line += 1
            line_start = mt.end()
        elif kind != "ws":
            toks.append(_Tok(kind, mt.group(), line, mt.start() - line_start + 1))
        pos = mt.end()
    toks.append(_Tok("end", "", line, pos - line_start + 1))
    return toks


class _Parser:
    def __init__(self, src, n=None, m=None):
        self.toks = tokenize(src)
        self.i = 0
        self.n = n
        self.m = m

    @property
    def tok(self):
        return self.toks[self.i]

    def take(self, text=None):
        t = self.tok
        if text is not None and t.text != text:
            want = text if text else "end of input"
            got = t.text or "end of input"
            raise ParseError(f"expected {want!r}, got {got!r}", t.line, t.col)
        self.i += 1
        return t

    def program(self):
        comps = [self.expr()]
        while self.tok.text == ";":
            self.take(";")
            if self.tok.kind == "end":
                break
            comps.append(self.expr())
        if self.tok.kind != "end":
            raise ParseError(f"unexpected {self.tok.text!r}", self.tok.line, self.tok.col)
        return comps

    def expr(self):
        node = self.term()
        while self.tok.text in ("+", "-"):
            op = self.take().text
            node = Bin(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.tok.text in ("*", "/"):
            op = self.take().text
            node = Bin(op, node, self.unary())
        return node

    def unary(self):
        if self.tok.text == "-":
            self.take()
            return Neg(self.unary())
        if self.tok.text == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        if self.tok.text == "^":
            self.take()
            return Bin("^", base, self.unary())
        return base

    def atom(self):
        t = self.tok
        if t.kind == "num":
            self.take()
            return Num(float(t.text))
        if t.text == "(":
            self.take()
            node = self.expr()
            self.take(")")
            return node
        if t.kind == "name":
            self.take()
            if self.tok.text == "(":
                if t.text not in FUNCTIONS:
                    raise UnknownIdentifier(f"unknown function {t.text!r}", t.line, t.col)
                self.take("(")
                args = [self.expr()]
                while self.tok.text == ",":
                    self.take(",")
                    args.append(self.expr())
                self.take(")")
                arity = FUNCTIONS[t.text][0]
                if len(args) != arity:
                    raise ArityError(f"{t.text} takes {arity} argument(s), got {len(args)}",
                                     t.line, t.col)
                return Call(t.text, tuple(args))
            return self.name(t)
        got = t.text or "end of input"
        raise ParseError(f"unexpected {got!r}", t.line, t.col)

    def name(self, t):
        if t.text in FUNCTIONS:
            raise ArityError(f"function {t.text!r} used without arguments", t.line, t.col)
        if t.text in CONSTANTS:
            return Const(t.text)
        mt = re.fullmatch(r"([xu])([1-9]\d*)", t.text)
        if not mt:
            raise UnknownIdentifier(f"unknown identifier {t.text!r}", t.line, t.col)
        kind, idx = mt.group(1), int(mt.group(2))
        bound = self.n if kind == "x" else self.m
        if bound is not None and idx > bound:
            raise UnknownIdentifier(f"{t.text} exceeds dimension {bound}", t.line, t.col)
        return Var(kind, idx)


def parse(src, n=None, m=None):
    """Parse a ``;``-separated list of expressions into syntax trees."""
    return _Parser(src, n, m).program()


def parse_expr(src, n=None, m=None):
    comps = parse(src, n, m)
    if len(comps) != 1:
        raise ParseError("expected a single expression", 1, 1)
    return comps[0]


def variables(node, acc=None):
    """Set of ``(kind, index)`` pairs used by a tree."""
    acc = set() if acc is None else acc
    if isinstance(node, Var):
        acc.add((node.kind, node.index))
    elif isinstance(node, Neg):
        variables(node.arg, acc)
    elif isinstance(node, Bin):
        variables(node.left, acc)
        variables(node.right, acc)
    elif isinstance(node, Call):
        for a in node.args:
            variables(a, acc)
    return acc


def evaluate(node, X, U=None):
    """Evaluate a tree on batches ``X`` (N, n) and ``U`` (N, m)."""
    if isinstance(node, Num):
        return np.full(X.shape[0], node.value)
    if isinstance(node, Const):
        return np.full(X.shape[0], CONSTANTS[node.name])
    if isinstance(node, Var):
        src = X if node.kind == "x" else U
        if src is None or node.index > src.shape[1]:
            raise EvaluationError(f"variable {node.kind}{node.index} not provided")
        return src[:, node.index - 1]
    if isinstance(node, Neg):
        return -evaluate(node.arg, X, U)
    if isinstance(node, Bin):
        a = evaluate(node.left, X, U)
        b = evaluate(node.right, X, U)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        if node.op == "/":
            return a / b
        return np.power(a, b)
    if isinstance(node, Call):
        return FUNCTIONS[node.name][1](*[evaluate(a, X, U) for a in node.args])
    raise TypeError(f"not an expression node: {node!r}")


def evaluate_checked(node, X, U=None):
    with np.errstate(all="ignore"):
        out = evaluate(node, X, U)
    if not np.all(np.isfinite(out)):
        raise EvaluationError("expression evaluated to a non-finite value")
    return out


def to_source(node) -> str:
    """Fully parenthesized text that parses back to the same tree."""
    if isinstance(node, Num):
        text = repr(float(node.value))
        return text if node.value >= 0 else f"(-{repr(-float(node.value))})"
    if isinstance(node, Const):
        return node.name
    if isinstance(node, Var):
        return f"{node.kind}{node.index}"
    if isinstance(node, Neg):
        return f"(-{to_source(node.arg)})"
    if isinstance(node, Bin):
        return f"({to_source(node.left)} {node.op} {to_source(node.right)})"
    if isinstance(node, Call):
        return f"{node.name}({', '.join(to_source(a) for a in node.args)})"
    raise TypeError(f"not an expression node: {node!r}")


def program_source(nodes):
    return " ; ".join(to_source(c) for c in nodes)
