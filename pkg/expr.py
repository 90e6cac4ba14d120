# expr.py
"""
Закрытая грамматика выражений для динамики, выходов и функций сравнения.

  expr    := term (("+" | "-") term)*
  term    := unary (("*" | "/") unary)*
  unary   := "-" unary | atom
  atom    := NUMBER | NAME | NAME "(" expr ("," expr)* ")" | "(" expr ")"

Переменные: x1.., u1.., w1.. (локальные для подсистемы) и s (для K∞-функций).
"""
from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Dict, FrozenSet, Iterable, List, Mapping, Optional, Tuple, Union


logger = logging.getLogger("opack.expr")


class ParseError(ValueError):
    def __init__(self, message: str, line: int = 1, column: int = 1):
        super().__init__(f"{message} (line {line}, column {column})")
        self.line = line
        self.column = column


class EvalError(ValueError):
    pass


def _sech(t: float) -> float:
    # cosh переполняется раньше, чем sech обнуляется
    if abs(t) > 700:
        return 0.0
    return 1.0 / math.cosh(t)


# имя -> (арность или None для вариативной, реализация)
FUNCTIONS: Dict[str, Tuple[Optional[int], Callable[..., float]]] = {
    "sin": (1, math.sin),
    "cos": (1, math.cos),
    "tan": (1, math.tan),
    "tanh": (1, math.tanh),
    "sech": (1, _sech),
    "abs": (1, abs),
    "exp": (1, math.exp),
    "sqrt": (1, math.sqrt),
    "min": (None, min),
    "max": (None, max),
    "pow": (2, math.pow),
}

_VARIABLE = re.compile(r"^(?:[xuw][1-9][0-9]*|s)$")


# ----------------------------
# AST
# ----------------------------

@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Call:
    name: str
    args: Tuple["Expr", ...]


Expr = Union[Num, Var, Neg, BinOp, Call]


# ----------------------------
# Токенизатор
# ----------------------------

@dataclass(frozen=True)
class Token:
    kind: str  # number | name | op | lparen | rparen | comma | eof
    text: str
    line: int
    column: int


_TOKEN_RE = re.compile(
    r"(?P<ws>[ \t\r]+)|(?P<nl>\n)"
    r"|(?P<number>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/])|(?P<lparen>\()|(?P<rparen>\))|(?P<comma>,)"
)


def tokenize(text: str) -> List[Token]:
    tokens: List[Token] = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind != "ws":
            tokens.append(Token(kind, m.group(), line, m.start() - line_start + 1))
        pos = m.end()
    tokens.append(Token("eof", "", line, pos - line_start + 1))
    return tokens


# ----------------------------
# Парсер (рекурсивный спуск)
# ----------------------------

class _Parser:
    def __init__(self, tokens: List[Token], variables: Optional[FrozenSet[str]]):
        self.tokens = tokens
        self.i = 0
        self.variables = variables

    @property
    def tok(self) -> Token:
        return self.tokens[self.i]

    def _advance(self) -> Token:
        t = self.tokens[self.i]
        self.i += 1
        return t

    def _expect(self, kind: str, what: str) -> Token:
        if self.tok.kind != kind:
            found = self.tok.text or "end of input"
            raise ParseError(f"expected {what}, found {found!r}", self.tok.line, self.tok.column)
        return self._advance()

    def parse(self) -> Expr:
        if self.tok.kind == "eof":
            raise ParseError("empty expression", self.tok.line, self.tok.column)
        e = self.expr()
        if self.tok.kind != "eof":
            raise ParseError(f"unexpected {self.tok.text!r}", self.tok.line, self.tok.column)
        return e

    def expr(self) -> Expr:
        left = self.term()
        while self.tok.kind == "op" and self.tok.text in "+-":
            op = self._advance().text
            left = BinOp(op, left, self.term())
        return left

    def term(self) -> Expr:
        left = self.unary()
        while self.tok.kind == "op" and self.tok.text in "*/":
            op = self._advance().text
            left = BinOp(op, left, self.unary())
        return left

    def unary(self) -> Expr:
        if self.tok.kind == "op" and self.tok.text == "-":
            self._advance()
            return Neg(self.unary())
        if self.tok.kind == "op" and self.tok.text == "+":
            self._advance()
            return self.unary()
        return self.atom()

    def atom(self) -> Expr:
        t = self.tok
        if t.kind == "number":
            self._advance()
            return Num(float(t.text))
        if t.kind == "lparen":
            self._advance()
            e = self.expr()
            self._expect("rparen", "')'")
            return e
        if t.kind == "name":
            self._advance()
            if self.tok.kind == "lparen":
                return self._call(t)
            if t.text in FUNCTIONS:
                raise ParseError(f"function {t.text!r} used without arguments", t.line, t.column)
            if not _VARIABLE.match(t.text) or (self.variables is not None and t.text not in self.variables):
                raise ParseError(f"unknown identifier {t.text!r}", t.line, t.column)
            return Var(t.text)
        found = t.text or "end of input"
        raise ParseError(f"unexpected {found!r}", t.line, t.column)

    def _call(self, name: Token) -> Expr:
        if name.text not in FUNCTIONS:
            raise ParseError(f"unknown function {name.text!r}", name.line, name.column)
        self._expect("lparen", "'('")
        args = [self.expr()]
        while self.tok.kind == "comma":
            self._advance()
            args.append(self.expr())
        self._expect("rparen", "')'")
        arity = FUNCTIONS[name.text][0]
        if (arity is not None and len(args) != arity) or (arity is None and len(args) < 2):
            expected = arity if arity is not None else "at least 2"
            raise ParseError(
                f"function {name.text!r} takes {expected} arguments, got {len(args)}", name.line, name.column
            )
        return Call(name.text, tuple(args))


def parse_expr(text: str, variables: Optional[Iterable[str]] = None) -> Expr:
    """variables — разрешённые имена; None разрешает любые x*/u*/w*/s."""
    if not text or not text.strip():
        raise ParseError("empty expression")
    allowed = frozenset(variables) if variables is not None else None
    return _Parser(tokenize(text), allowed).parse()


# ----------------------------
# Вычисление
# ----------------------------

def free_variables(e: Expr) -> FrozenSet[str]:
    if isinstance(e, Var):
        return frozenset((e.name,))
    if isinstance(e, Neg):
        return free_variables(e.operand)
    if isinstance(e, BinOp):
        return free_variables(e.left) | free_variables(e.right)
    if isinstance(e, Call):
        out: FrozenSet[str] = frozenset()
        for a in e.args:
            out |= free_variables(a)
        return out
    return frozenset()


@lru_cache(maxsize=4096)
def compile_expr(e: Expr) -> Callable[[Mapping[str, float]], float]:
    """Замыкание env -> float; кэшируется по (неизменяемому) AST."""
    if isinstance(e, Num):
        v = e.value
        return lambda env: v
    if isinstance(e, Var):
        name = e.name

        def var(env):
            try:
                return env[name]
            except KeyError:
                raise EvalError(f"unbound variable {name!r}") from None
        return var
    if isinstance(e, Neg):
        inner = compile_expr(e.operand)
        return lambda env: -inner(env)
    if isinstance(e, BinOp):
        lf, rf = compile_expr(e.left), compile_expr(e.right)
        if e.op == "+":
            return lambda env: lf(env) + rf(env)
        if e.op == "-":
            return lambda env: lf(env) - rf(env)
        if e.op == "*":
            return lambda env: lf(env) * rf(env)

        def div(env):
            den = rf(env)
            if den == 0:
                raise EvalError("division by zero")
            return lf(env) / den
        return div
    if isinstance(e, Call):
        fn = FUNCTIONS[e.name][1]
        argfs = tuple(compile_expr(a) for a in e.args)
        fname = e.name

        def call(env):
            try:
                return fn(*(a(env) for a in argfs))
            except (ValueError, OverflowError) as exc:
                raise EvalError(f"{fname}: {exc}") from None
        return call
    raise EvalError(f"not an expression node: {e!r}")


def eval_expr(e: Expr, env: Mapping[str, float]) -> float:
    v = float(compile_expr(e)(env))
    if not math.isfinite(v):
        raise EvalError(f"non-finite result {v} for {to_text(e)}")
    return v


def to_text(e: Expr) -> str:
    """Печать с полной расстановкой скобок; parse_expr(to_text(e)) == e."""
    if isinstance(e, Num):
        return repr(e.value) if e.value >= 0 else f"({e.value!r})"
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Neg):
        return f"-({to_text(e.operand)})"
    if isinstance(e, BinOp):
        return f"({to_text(e.left)} {e.op} {to_text(e.right)})"
    if isinstance(e, Call):
        return f"{e.name}(" + ", ".join(to_text(a) for a in e.args) + ")"
    raise EvalError(f"not an expression node: {e!r}")
