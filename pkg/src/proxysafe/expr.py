"""Symbolic scalar expressions: parse, differentiate, simplify, evaluate, compile.

This is the small expression language in which every dynamics function,
barrier, and control law of the toolkit is written.  Surface syntax:

    literals     1   2.5   .5   1e-3   pi
    variables    [A-Za-z_][A-Za-z0-9_]*
    operators    + - * / ^          (^ is right-associative)
    functions    sin cos exp log sqrt
    grouping     ( ... )

Unary minus binds tighter than binary + and - but looser than ^, so
"-x^2" reads as -(x^2) while "-x*y" reads as (-x)*y.  The name "pi" is a
built-in constant, not a variable.

Expression trees are immutable; all operations return new trees and it is
safe to share subtrees freely (the walkers below memoize on node identity,
so shared subtrees are visited once).  Differentiation is exact and
symbolic.  Simplification applies a fixed rewrite list to a fixpoint; it
is deliberately not a canonicalizer.  For inner loops, ``compile_exprs``
turns a batch of trees into one generated Python function with common
subexpressions evaluated once.
"""

from __future__ import annotations

import math
import re
from typing import Callable, Mapping, Sequence

__all__ = [
    "Expr", "Const", "Var", "Neg", "Add", "Sub", "Mul", "Div", "Pow", "Call",
    "ExprError", "ParseError", "EvalError", "UnboundVariableError", "DomainError",
    "FUNCTIONS", "parse", "differentiate", "simplify", "evaluate",
    "compile_expr", "compile_exprs",
]

FUNCTIONS = ("sin", "cos", "exp", "log", "sqrt")

_FUNC_IMPL = {
    "sin": math.sin,
    "cos": math.cos,
    "exp": math.exp,
    "log": math.log,
    "sqrt": math.sqrt,
}

_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")


def _clip(text: str, limit: int = 120) -> str:
    return text if len(text) <= limit else text[: limit - 3] + "..."


# ---------------------------------------------------------------------------
# errors
# ---------------------------------------------------------------------------

class ExprError(Exception):
    """Base class for all expression-layer failures."""


class ParseError(ExprError):
    """Malformed source text.  Carries the character offset and, when the
    parser knows what it was looking for, the set of expected tokens."""

    def __init__(self, message: str, offset: int, expected: Sequence[str] = ()):
        self.offset = offset
        self.expected = tuple(expected)
        detail = f"{message} at offset {offset}"
        if self.expected:
            detail += " (expected " + " or ".join(self.expected) + ")"
        super().__init__(detail)


class EvalError(ExprError):
    """Base class for evaluation failures."""


class UnboundVariableError(EvalError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"unbound variable '{name}'")


class DomainError(EvalError):
    """An operation was applied outside its real domain.  The offending
    sub-expression is kept on the exception for diagnostics."""

    def __init__(self, message: str, subexpr: "Expr"):
        self.subexpr = subexpr
        super().__init__(f"{message} in '{_clip(str(subexpr))}'")


# ---------------------------------------------------------------------------
# node classes
# ---------------------------------------------------------------------------

class Expr:
    """Immutable symbolic expression over named real variables.

    Nodes overload the arithmetic operators so trees compose naturally,
    e.g. ``Var("x") * 2 + Call("sin", Var("t"))``; plain numbers are
    coerced to constants.  Equality and hashing are structural.  Whether
    two expressions mean the same thing should always be settled by
    evaluation, never by comparing shapes.
    """

    __slots__ = ("_hash", "_vars")

    prec = 100  # printing precedence; overridden per node kind

    def children(self) -> tuple:
        return ()

    def _payload(self):
        return None

    def _with_children(self, kids: tuple) -> "Expr":
        return self

    def variables(self) -> frozenset:
        """Free variables of this expression (cached)."""
        v = self._vars
        if v is None:
            v = frozenset().union(*[k.variables() for k in self.children()])
            self._vars = v
        return v

    def diff(self, var: str) -> "Expr":
        return differentiate(self, var)

    def evaluate(self, binding: Mapping[str, float]) -> float:
        return evaluate(self, binding)

    def simplified(self) -> "Expr":
        return simplify(self)

    # -- structural identity ------------------------------------------------

    def __hash__(self):
        return self._hash

    def __eq__(self, other):
        if self is other:
            return True
        if not isinstance(other, Expr):
            return NotImplemented
        stack = [(self, other)]
        while stack:
            p, q = stack.pop()
            if p is q:
                continue
            if type(p) is not type(q) or p._hash != q._hash:
                return False
            if p._payload() != q._payload():
                return False
            stack.extend(zip(p.children(), q.children()))
        return True

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        other = _coerce_opt(other)
        return NotImplemented if other is None else Add(self, other)

    def __radd__(self, other):
        other = _coerce_opt(other)
        return NotImplemented if other is None else Add(other, self)

    def __sub__(self, other):
        other = _coerce_opt(other)
        return NotImplemented if other is None else Sub(self, other)

    def __rsub__(self, other):
        other = _coerce_opt(other)
        return NotImplemented if other is None else Sub(other, self)

    def __mul__(self, other):
        other = _coerce_opt(other)
        return NotImplemented if other is None else Mul(self, other)

    def __rmul__(self, other):
        other = _coerce_opt(other)
        return NotImplemented if other is None else Mul(other, self)

    def __truediv__(self, other):
        other = _coerce_opt(other)
        return NotImplemented if other is None else Div(self, other)

    def __rtruediv__(self, other):
        other = _coerce_opt(other)
        return NotImplemented if other is None else Div(other, self)

    def __pow__(self, other):
        other = _coerce_opt(other)
        return NotImplemented if other is None else Pow(self, other)

    def __rpow__(self, other):
        other = _coerce_opt(other)
        return NotImplemented if other is None else Pow(other, self)

    def __neg__(self):
        return Neg(self)

    def __repr__(self):
        return f"{type(self).__name__}({_clip(str(self))})"


def _coerce_opt(value):
    if isinstance(value, Expr):
        return value
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return Const(value)
    return None


def _coerce(value) -> Expr:
    e = _coerce_opt(value)
    if e is None:
        raise TypeError(f"cannot interpret {value!r} as an expression")
    return e


class Const(Expr):
    __slots__ = ("value",)

    def __init__(self, value: float):
        value = float(value)
        if not math.isfinite(value):
            raise ValueError(f"constant must be a finite real, got {value!r}")
        self.value = value
        self._hash = hash(("const", value))
        self._vars = frozenset()

    @property
    def prec(self):
        # negative literals print like a unary minus application
        return 100 if self.value >= 0 else 25

    def _payload(self):
        return self.value

    def _diff(self, d, var):
        return _ZERO

    def _eval(self, ev, binding):
        return self.value

    def __str__(self):
        return repr(self.value)


class Var(Expr):
    __slots__ = ("name",)

    def __init__(self, name: str):
        if not _NAME_RE.match(name):
            raise ValueError(f"invalid variable name {name!r}")
        self.name = name
        self._hash = hash(("var", name))
        self._vars = frozenset((name,))

    def _payload(self):
        return self.name

    def _diff(self, d, var):
        return _ONE if self.name == var else _ZERO

    def _eval(self, ev, binding):
        try:
            return float(binding[self.name])
        except KeyError:
            raise UnboundVariableError(self.name) from None

    def __str__(self):
        return self.name


class Neg(Expr):
    __slots__ = ("a",)

    prec = 25

    def __init__(self, a):
        self.a = _coerce(a)
        self._hash = hash(("neg", self.a._hash))
        self._vars = None

    def children(self):
        return (self.a,)

    def _with_children(self, kids):
        return Neg(kids[0])

    def _diff(self, d, var):
        return Neg(d(self.a))

    def _eval(self, ev, binding):
        return -ev(self.a)

    def __str__(self):
        a = self.a
        return f"-{a}" if a.prec >= self.prec else f"-({a})"


class _Binary(Expr):
    __slots__ = ("a", "b")

    op = "?"
    _domain_msg = "arithmetic error"

    def __init__(self, a, b):
        self.a = _coerce(a)
        self.b = _coerce(b)
        self._hash = hash((self.op, self.a._hash, self.b._hash))
        self._vars = None

    def children(self):
        return (self.a, self.b)

    def _with_children(self, kids):
        return type(self)(kids[0], kids[1])

    def _eval(self, ev, binding):
        x = ev(self.a)
        y = ev(self.b)
        try:
            return self._apply(x, y)
        except (ArithmeticError, ValueError):
            raise DomainError(self._domain_msg, self) from None

    def __str__(self):
        # left-associative layout; the right operand needs parens unless
        # it binds strictly tighter
        a, b = self.a, self.b
        left = str(a) if a.prec >= self.prec else f"({a})"
        right = str(b) if b.prec > self.prec else f"({b})"
        return f"{left} {self.op} {right}"


class Add(_Binary):
    __slots__ = ()
    op = "+"
    prec = 10

    @staticmethod
    def _apply(x, y):
        return x + y

    def _diff(self, d, var):
        return Add(d(self.a), d(self.b))


class Sub(_Binary):
    __slots__ = ()
    op = "-"
    prec = 10

    @staticmethod
    def _apply(x, y):
        return x - y

    def _diff(self, d, var):
        return Sub(d(self.a), d(self.b))


class Mul(_Binary):
    __slots__ = ()
    op = "*"
    prec = 20

    @staticmethod
    def _apply(x, y):
        return x * y

    def _diff(self, d, var):
        return Add(Mul(d(self.a), self.b), Mul(self.a, d(self.b)))


class Div(_Binary):
    __slots__ = ()
    op = "/"
    prec = 20
    _domain_msg = "division by zero"

    @staticmethod
    def _apply(x, y):
        return x / y

    def _diff(self, d, var):
        num = Sub(Mul(d(self.a), self.b), Mul(self.a, d(self.b)))
        return Div(num, Mul(self.b, self.b))


class Pow(_Binary):
    __slots__ = ()
    op = "^"
    prec = 30
    _domain_msg = ("invalid power (negative base with fractional exponent, "
                   "zero with negative exponent, or overflow)")

    @staticmethod
    def _apply(x, y):
        return math.pow(x, y)

    def _diff(self, d, var):
        base, expo = self.a, self.b
        if var not in expo.variables():
            if var not in base.variables():
                return _ZERO
            # plain power rule; valid wherever the power itself is smooth
            return Mul(Mul(expo, Pow(base, Sub(expo, _ONE))), d(base))
        if var not in base.variables():
            return Mul(Mul(self, Call("log", base)), d(expo))
        return Mul(self, Add(Mul(d(expo), Call("log", base)),
                             Div(Mul(expo, d(base)), base)))

    def __str__(self):
        # right-associative: x^y^z prints without parens on the right
        a, b = self.a, self.b
        left = str(a) if a.prec > self.prec else f"({a})"
        right = str(b) if b.prec >= self.prec else f"({b})"
        return f"{left}^{right}"


class Call(Expr):
    __slots__ = ("fn", "arg")

    def __init__(self, fn: str, arg):
        if fn not in _FUNC_IMPL:
            raise ValueError(f"unknown function {fn!r}; supported: {', '.join(FUNCTIONS)}")
        self.fn = fn
        self.arg = _coerce(arg)
        self._hash = hash(("call", fn, self.arg._hash))
        self._vars = None

    def children(self):
        return (self.arg,)

    def _payload(self):
        return self.fn

    def _with_children(self, kids):
        return Call(self.fn, kids[0])

    def _diff(self, d, var):
        u = self.arg
        du = d(u)
        if self.fn == "sin":
            return Mul(Call("cos", u), du)
        if self.fn == "cos":
            return Neg(Mul(Call("sin", u), du))
        if self.fn == "exp":
            return Mul(self, du)
        if self.fn == "log":
            return Div(du, u)
        # sqrt
        return Div(du, Mul(Const(2.0), self))

    def _eval(self, ev, binding):
        v = ev(self.arg)
        if self.fn == "log" and v <= 0.0:
            raise DomainError("log of a non-positive value", self)
        if self.fn == "sqrt" and v < 0.0:
            raise DomainError("sqrt of a negative value", self)
        try:
            return _FUNC_IMPL[self.fn](v)
        except (ArithmeticError, ValueError):
            raise DomainError(f"domain error in {self.fn}", self) from None

    def __str__(self):
        return f"{self.fn}({self.arg})"


_ZERO = Const(0.0)
_ONE = Const(1.0)


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

_NUM_RE = re.compile(r"(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?")
_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")

_BIN_PREC = {"+": 10, "-": 10, "*": 20, "/": 20, "^": 30}
_UNARY_BP = 25  # tighter than + - * /, looser than ^
_BIN_NODE = {"+": Add, "-": Sub, "*": Mul, "/": Div, "^": Pow}


def _tokenize(source: str):
    i, n = 0, len(source)
    while i < n:
        ch = source[i]
        if ch.isspace():
            i += 1
            continue
        m = _NUM_RE.match(source, i)
        if m:
            yield ("num", m.group(), i)
            i = m.end()
            continue
        m = _IDENT_RE.match(source, i)
        if m:
            yield ("name", m.group(), i)
            i = m.end()
            continue
        if ch in "+-*/^()":
            yield (ch, ch, i)
            i += 1
            continue
        raise ParseError(f"unexpected character {ch!r}", i,
                         expected=("number", "identifier", "operator", "'('"))
    yield ("end", "", n)


def _describe(tok) -> str:
    return "end of input" if tok[0] == "end" else f"'{tok[1]}'"


class _Parser:
    """Pratt parser over the token stream."""

    def __init__(self, source: str):
        self._tokens = list(_tokenize(source))
        self._pos = 0

    def _peek(self):
        return self._tokens[self._pos]

    def _next(self):
        tok = self._tokens[self._pos]
        self._pos += 1
        return tok

    def _expect(self, kind: str):
        tok = self._next()
        if tok[0] != kind:
            raise ParseError(f"unexpected {_describe(tok)}", tok[2],
                             expected=(f"'{kind}'",))

    def parse_expr(self, min_bp: int) -> Expr:
        left = self._parse_prefix()
        while True:
            kind = self._peek()[0]
            bp = _BIN_PREC.get(kind, -1)
            if bp <= min_bp:
                return left
            self._next()
            # right-associative ^ re-enters at bp - 1 so a following ^ binds
            right = self.parse_expr(bp - 1 if kind == "^" else bp)
            left = _BIN_NODE[kind](left, right)

    def _parse_prefix(self) -> Expr:
        kind, text, off = self._next()
        if kind == "num":
            return Const(float(text))
        if kind == "name":
            if self._peek()[0] == "(":
                if text not in _FUNC_IMPL:
                    raise ParseError(f"unknown function '{text}'", off,
                                     expected=FUNCTIONS)
                self._next()
                arg = self.parse_expr(0)
                self._expect(")")
                return Call(text, arg)
            if text == "pi":
                return Const(math.pi)
            return Var(text)
        if kind == "(":
            inner = self.parse_expr(0)
            self._expect(")")
            return inner
        if kind == "-":
            return Neg(self.parse_expr(_UNARY_BP))
        raise ParseError(f"unexpected {_describe((kind, text, off))}", off,
                         expected=("number", "identifier", "'('", "'-'"))


def parse(source: str) -> Expr:
    """Parse infix source text into an expression tree."""
    p = _Parser(source)
    e = p.parse_expr(0)
    tok = p._peek()
    if tok[0] != "end":
        raise ParseError(f"unexpected {_describe(tok)}", tok[2],
                         expected=("operator", "end of input"))
    return e


# ---------------------------------------------------------------------------
# differentiation and evaluation
# ---------------------------------------------------------------------------

def differentiate(e: Expr, var: str) -> Expr:
    """Exact symbolic partial derivative of ``e`` with respect to ``var``.

    Differentiating by a variable the expression never mentions yields the
    zero constant.  The result is simplified.
    """
    if not _NAME_RE.match(var):
        raise ValueError(f"invalid variable name {var!r}")
    memo: dict[int, Expr] = {}

    def d(node: Expr) -> Expr:
        out = memo.get(id(node))
        if out is None:
            out = node._diff(d, var)
            memo[id(node)] = out
        return out

    return simplify(d(e))


def evaluate(e: Expr, binding: Mapping[str, float]) -> float:
    """Evaluate ``e`` with every free variable bound, in IEEE doubles.

    Additions and products may overflow to infinity silently, matching
    hardware semantics; divisions, powers, and the library functions raise
    DomainError outside their real domain, and unbound variables raise
    UnboundVariableError naming the variable.
    """
    memo: dict[int, float] = {}

    def ev(node: Expr) -> float:
        out = memo.get(id(node))
        if out is None:
            out = node._eval(ev, binding)
            memo[id(node)] = out
        return out

    return ev(e)


# ---------------------------------------------------------------------------
# simplification
# ---------------------------------------------------------------------------

_MAX_PASSES = 10
_MAX_LOCAL = 50


def _is_const(node, value=None) -> bool:
    return isinstance(node, Const) and (value is None or node.value == value)


def _fold_to_const(value) -> Expr | None:
    return Const(value) if math.isfinite(value) else None


def _rewrite(node: Expr) -> Expr | None:
    """One local rewrite step, or None when no rule applies.

    The rule list is fixed: constant folding (skipped when it would leave
    the real domain or the finite range), the unit and absorbing elements
    of each operator, double negation, and folding of constants through
    nested products.  Every rule shrinks the tree, so iteration
    terminates.
    """
    if isinstance(node, Neg):
        a = node.a
        if isinstance(a, Const):
            return Const(-a.value)
        if isinstance(a, Neg):
            return a.a
        return None

    if isinstance(node, Call):
        a = node.arg
        if isinstance(a, Const):
            try:
                return _fold_to_const(_FUNC_IMPL[node.fn](a.value))
            except (ArithmeticError, ValueError):
                return None
        return None

    if not isinstance(node, _Binary):
        return None

    a, b = node.a, node.b
    if isinstance(a, Const) and isinstance(b, Const):
        try:
            return _fold_to_const(node._apply(a.value, b.value))
        except (ArithmeticError, ValueError):
            return None

    if isinstance(node, Add):
        if _is_const(a, 0.0):
            return b
        if _is_const(b, 0.0):
            return a
    elif isinstance(node, Sub):
        if _is_const(b, 0.0):
            return a
        if _is_const(a, 0.0):
            return Neg(b)
        if a == b:
            return Const(0.0)
    elif isinstance(node, Mul):
        if _is_const(a, 0.0) or _is_const(b, 0.0):
            return Const(0.0)
        if _is_const(a, 1.0):
            return b
        if _is_const(b, 1.0):
            return a
        if _is_const(a, -1.0):
            return Neg(b)
        if _is_const(b, -1.0):
            return Neg(a)
        # pull constants together through nested products
        if isinstance(a, Const) and isinstance(b, Mul):
            if isinstance(b.a, Const):
                return _combine_product(a.value, b.a.value, b.b)
            if isinstance(b.b, Const):
                return _combine_product(a.value, b.b.value, b.a)
        if isinstance(b, Const) and isinstance(a, Mul):
            if isinstance(a.a, Const):
                return _combine_product(a.a.value, b.value, a.b)
            if isinstance(a.b, Const):
                return _combine_product(a.b.value, b.value, a.a)
    elif isinstance(node, Div):
        if _is_const(a, 0.0):
            return Const(0.0)
        if _is_const(b, 1.0):
            return a
    elif isinstance(node, Pow):
        if _is_const(b, 1.0):
            return a
        if _is_const(b, 0.0):
            return Const(1.0)
        if _is_const(a, 1.0):
            return Const(1.0)
    return None


def _combine_product(c1: float, c2: float, rest: Expr) -> Expr | None:
    prod = c1 * c2
    return Mul(Const(prod), rest) if math.isfinite(prod) else None


def _local_fixpoint(node: Expr) -> Expr:
    for _ in range(_MAX_LOCAL):
        new = _rewrite(node)
        if new is None:
            return node
        node = new
    return node


def _simplify_pass(e: Expr) -> Expr:
    memo: dict[int, Expr] = {}

    def walk(node: Expr) -> Expr:
        out = memo.get(id(node))
        if out is not None:
            return out
        kids = node.children()
        if kids:
            new_kids = tuple(walk(k) for k in kids)
            if any(nk is not k for nk, k in zip(new_kids, kids)):
                node = node._with_children(new_kids)
        out = _local_fixpoint(node)
        memo[id(node)] = out
        return out

    return walk(e)


def simplify(e: Expr) -> Expr:
    """Rewrite ``e`` bottom-up until no rule fires (bounded pass count).

    Evaluation of the result agrees with evaluation of the input on every
    binding where the input is defined; dropped subtrees (x*0 and friends)
    may widen the domain, never narrow it.
    """
    for _ in range(_MAX_PASSES):
        out = _simplify_pass(e)
        if out is e:
            return out
        e = out
    return e


# ---------------------------------------------------------------------------
# compilation
# ---------------------------------------------------------------------------

def _literal(value: float) -> str:
    text = repr(value)
    return f"({text})" if value < 0 else text


def _compile(exprs: Sequence[Expr], params: Sequence[str], scalar: bool) -> Callable:
    params = list(params)
    seen = set()
    for p in params:
        if not _NAME_RE.match(p) or p.startswith("_"):
            raise ValueError(f"invalid parameter name {p!r}")
        if p in seen:
            raise ValueError(f"duplicate parameter name {p!r}")
        seen.add(p)
    param_set = frozenset(params)

    lines: list[str] = []
    by_structure: dict[tuple, str] = {}
    by_id: dict[int, str] = {}

    def emit(node: Expr) -> str:
        atom = by_id.get(id(node))
        if atom is not None:
            return atom
        if isinstance(node, Const):
            atom = _literal(node.value)
        elif isinstance(node, Var):
            if node.name not in param_set:
                raise UnboundVariableError(node.name)
            atom = node.name
        else:
            kids = tuple(emit(k) for k in node.children())
            key = (type(node).__name__, node._payload(), kids)
            atom = by_structure.get(key)
            if atom is None:
                atom = f"_t{len(lines)}"
                lines.append(f"    {atom} = {_render(node, kids)}")
                by_structure[key] = atom
        by_id[id(node)] = atom
        return atom

    outs = [emit(e) for e in exprs]
    if scalar:
        ret = f"    return {outs[0]}"
    else:
        ret = "    return (" + ", ".join(outs) + ("," if len(outs) == 1 else "") + ")"
    src = "\n".join([f"def _compiled({', '.join(params)}):", *lines, ret])
    ns = {
        "_sin": math.sin, "_cos": math.cos, "_exp": math.exp,
        "_log": math.log, "_sqrt": math.sqrt, "_pow": math.pow,
        "__builtins__": {},
    }
    exec(compile(src, "<proxysafe.expr>", "exec"), ns)
    fn = ns["_compiled"]
    fn._source = src
    return fn


def _render(node: Expr, kids: tuple) -> str:
    if isinstance(node, Neg):
        return f"-{kids[0]}"
    if isinstance(node, Call):
        return f"_{node.fn}({kids[0]})"
    if isinstance(node, Pow):
        expo = node.b
        if isinstance(expo, Const) and expo.value == int(expo.value) and abs(expo.value) <= 64:
            n = int(expo.value)
            if n == 2:
                return f"{kids[0]} * {kids[0]}"
            return f"{kids[0]} ** {n}"
        return f"_pow({kids[0]}, {kids[1]})"
    return f"{kids[0]} {node.op} {kids[1]}"


def compile_exprs(exprs: Sequence[Expr], params: Sequence[str]) -> Callable[..., tuple]:
    """Compile a batch of expressions into one generated positional function.

    The function takes the parameter values in the given order and returns
    a tuple with one float per input expression; common subexpressions
    across the whole batch are computed once.  Semantics match
    ``evaluate`` except that integer powers use the hardware power
    operator, which may differ in the last ulp, and domain violations
    surface as the raw ZeroDivisionError / ValueError / OverflowError.
    Intended for simulation inner loops.
    """
    return _compile(exprs, params, scalar=False)


def compile_expr(e: Expr, params: Sequence[str]) -> Callable[..., float]:
    """Compile a single expression; the result returns a bare float."""
    return _compile([e], params, scalar=True)
