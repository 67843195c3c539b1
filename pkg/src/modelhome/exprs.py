"""Expression language used by mapping rules, guards and action rules.

A small, statically typable subset of object constraint expressions:
literals, one-step attribute navigation (``source.power``), arithmetic,
comparison, boolean connectives and the calls abs/min/max. Precedence from
loosest to tightest::

    or < and < not < comparison < additive < multiplicative < unary minus

so ``not a < b`` negates the comparison and ``1 + 2 * 3`` is ``1 + (2 * 3)``.
Comparisons do not chain; parenthesize instead. Division always yields Float
and a zero divisor raises, it never produces inf. String literals use single
quotes and may not contain one (there is no escape syntax).

The evaluator is pure: it never mutates the context and equal inputs give
identical results.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Mapping, Union

from .metamodel import MetaClass, ModelElement

BOOL_T, INT_T, FLOAT_T, STRING_T = "Bool", "Int", "Float", "String"

CMP_OPS = ("<", "<=", ">", ">=", "=", "<>")
ADD_OPS = ("+", "-")
MUL_OPS = ("*", "/")
CALLS = {"abs": 1, "min": 2, "max": 2}


class ExprError(Exception):
    pass


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, pos: int):
        self.pos = pos
        super().__init__(f"at position {pos}: {message}")


class EvalError(ExprError):
    pass


class DivisionByZero(EvalError):
    pass


class NullNavigation(EvalError):
    pass


class UnknownIdentifier(EvalError):
    pass


@dataclass(frozen=True)
class Lit:
    value: Union[bool, int, float, str]


@dataclass(frozen=True)
class Nav:
    obj: str
    attr: str | None = None  # None = bare name; only valid as a parse result


@dataclass(frozen=True)
class Unary:
    op: str  # 'not' | 'neg'
    operand: "Expr"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple["Expr", ...]


Expr = Union[Lit, Nav, Unary, Binary, Call]


# -- lexer ----------------------------------------------------------------

_KEYWORDS = {"and", "or", "not", "true", "false"}
_PUNCT = ("<=", ">=", "<>", "<", ">", "=", "+", "-", "*", "/", "(", ")", ",", ".")


@dataclass(frozen=True)
class Token:
    kind: str  # num | str | ident | kw | punct | end
    value: Any
    pos: int


def tokenize(text: str) -> list[Token]:
    tokens: list[Token] = []
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        if c.isdigit():
            j = i
            while j < n and text[j].isdigit():
                j += 1
            is_float = False
            if j < n and text[j] == "." and j + 1 < n and text[j + 1].isdigit():
                is_float = True
                j += 1
                while j < n and text[j].isdigit():
                    j += 1
            if j < n and text[j] in "eE":
                k = j + 1
                if k < n and text[k] in "+-":
                    k += 1
                if k < n and text[k].isdigit():
                    is_float = True
                    j = k
                    while j < n and text[j].isdigit():
                        j += 1
            raw = text[i:j]
            tokens.append(Token("num", float(raw) if is_float else int(raw), i))
            i = j
            continue
        if c == "'":
            j = text.find("'", i + 1)
            if j < 0:
                raise ExprSyntaxError("unterminated string literal", i)
            tokens.append(Token("str", text[i + 1 : j], i))
            i = j + 1
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            word = text[i:j]
            tokens.append(Token("kw" if word in _KEYWORDS else "ident", word, i))
            i = j
            continue
        for p in _PUNCT:
            if text.startswith(p, i):
                tokens.append(Token("punct", p, i))
                i += len(p)
                break
        else:
            raise ExprSyntaxError(f"unexpected character {c!r}", i)
    tokens.append(Token("end", None, n))
    return tokens


# -- parser ---------------------------------------------------------------


class _Parser:
    def __init__(self, tokens: list[Token]):
        self.tokens = tokens
        self.i = 0

    @property
    def cur(self) -> Token:
        return self.tokens[self.i]

    def eat(self, kind: str, value: Any = None) -> Token:
        tok = self.cur
        if tok.kind != kind or (value is not None and tok.value != value):
            want = value if value is not None else kind
            raise ExprSyntaxError(f"expected {want!r}, got {tok.value!r}", tok.pos)
        self.i += 1
        return tok

    def at(self, kind: str, *values: Any) -> bool:
        tok = self.cur
        return tok.kind == kind and (not values or tok.value in values)

    def parse(self) -> Expr:
        expr = self.or_expr()
        if not self.at("end"):
            raise ExprSyntaxError(f"trailing input {self.cur.value!r}", self.cur.pos)
        return expr

    def or_expr(self) -> Expr:
        left = self.and_expr()
        while self.at("kw", "or"):
            self.eat("kw")
            left = Binary("or", left, self.and_expr())
        return left

    def and_expr(self) -> Expr:
        left = self.not_expr()
        while self.at("kw", "and"):
            self.eat("kw")
            left = Binary("and", left, self.not_expr())
        return left

    def not_expr(self) -> Expr:
        if self.at("kw", "not"):
            self.eat("kw")
            return Unary("not", self.not_expr())
        return self.cmp_expr()

    def cmp_expr(self) -> Expr:
        left = self.add_expr()
        if self.at("punct", *CMP_OPS):
            op = self.eat("punct").value
            return Binary(op, left, self.add_expr())
        return left

    def add_expr(self) -> Expr:
        left = self.mul_expr()
        while self.at("punct", *ADD_OPS):
            op = self.eat("punct").value
            left = Binary(op, left, self.mul_expr())
        return left

    def mul_expr(self) -> Expr:
        left = self.unary_expr()
        while self.at("punct", *MUL_OPS):
            op = self.eat("punct").value
            left = Binary(op, left, self.unary_expr())
        return left

    def unary_expr(self) -> Expr:
        if self.at("punct", "-"):
            self.eat("punct")
            return Unary("neg", self.unary_expr())
        return self.primary()

    def primary(self) -> Expr:
        tok = self.cur
        if tok.kind == "num":
            self.i += 1
            return Lit(tok.value)
        if tok.kind == "str":
            self.i += 1
            return Lit(tok.value)
        if tok.kind == "kw" and tok.value in ("true", "false"):
            self.i += 1
            return Lit(tok.value == "true")
        if tok.kind == "punct" and tok.value == "(":
            self.i += 1
            inner = self.or_expr()
            self.eat("punct", ")")
            return inner
        if tok.kind == "ident":
            self.i += 1
            name = tok.value
            if self.at("punct", "(") and name in CALLS:
                self.eat("punct")
                args = [self.or_expr()]
                while self.at("punct", ","):
                    self.eat("punct")
                    args.append(self.or_expr())
                self.eat("punct", ")")
                if len(args) != CALLS[name]:
                    raise ExprSyntaxError(
                        f"{name} takes {CALLS[name]} argument(s), got {len(args)}", tok.pos
                    )
                return Call(name, tuple(args))
            if self.at("punct", "."):
                self.eat("punct")
                attr = self.eat("ident").value
                return Nav(name, attr)
            return Nav(name, None)
        raise ExprSyntaxError(f"unexpected token {tok.value!r}", tok.pos)


def parse_expr(text: str) -> Expr:
    return _Parser(tokenize(text)).parse()


# -- printer --------------------------------------------------------------

_PREC = {"or": 1, "and": 2, "not": 3, "cmp": 4, "add": 5, "mul": 6, "neg": 7, "atom": 8}


def _prec(expr: Expr) -> int:
    if isinstance(expr, Binary):
        if expr.op in ("or", "and"):
            return _PREC[expr.op]
        if expr.op in CMP_OPS:
            return _PREC["cmp"]
        if expr.op in ADD_OPS:
            return _PREC["add"]
        return _PREC["mul"]
    if isinstance(expr, Unary):
        return _PREC["not"] if expr.op == "not" else _PREC["neg"]
    return _PREC["atom"]


def print_expr(expr: Expr) -> str:
    """Render with minimal parentheses; reparsing yields an equal AST."""

    def wrap(child: Expr, limit: int) -> str:
        s = print_expr(child)
        return f"({s})" if _prec(child) < limit else s

    if isinstance(expr, Lit):
        if isinstance(expr.value, bool):
            return "true" if expr.value else "false"
        if isinstance(expr.value, str):
            return f"'{expr.value}'"
        return repr(expr.value)
    if isinstance(expr, Nav):
        return expr.obj if expr.attr is None else f"{expr.obj}.{expr.attr}"
    if isinstance(expr, Unary):
        if expr.op == "not":
            return f"not {wrap(expr.operand, _PREC['not'])}"
        return f"-{wrap(expr.operand, _PREC['neg'])}"
    if isinstance(expr, Call):
        return f"{expr.func}({', '.join(print_expr(a) for a in expr.args)})"
    # Binary: left-associative chains keep shape; comparisons never chain.
    p = _prec(expr)
    if expr.op in CMP_OPS:
        return f"{wrap(expr.left, p + 1)} {expr.op} {wrap(expr.right, p + 1)}"
    left = wrap(expr.left, p)
    right_s = print_expr(expr.right)
    if _prec(expr.right) <= p:
        right_s = f"({right_s})"
    return f"{left} {expr.op} {right_s}"


# -- static typing --------------------------------------------------------


def _numeric(t: str) -> bool:
    return t in (INT_T, FLOAT_T)


def infer_type(expr: Expr, schema: Mapping[str, MetaClass]) -> tuple[str | None, list[str]]:
    """Return (type, problems). Type is None when any problem was found.

    ``schema`` maps context names (source/target/self or scenario bind names)
    to their metaclasses. Enum attributes type as String here: the expression
    layer compares them as plain strings.
    """
    problems: list[str] = []

    def visit(e: Expr) -> str | None:
        if isinstance(e, Lit):
            if isinstance(e.value, bool):
                return BOOL_T
            if isinstance(e.value, int):
                return INT_T
            if isinstance(e.value, float):
                return FLOAT_T
            return STRING_T
        if isinstance(e, Nav):
            if e.attr is None:
                problems.append(f"unknown identifier {e.obj!r}")
                return None
            mc = schema.get(e.obj)
            if mc is None:
                problems.append(f"unknown context name {e.obj!r}")
                return None
            ad = mc.attr(e.attr)
            if ad is None:
                problems.append(f"class {mc.name!r} has no attribute {e.attr!r}")
                return None
            return STRING_T if ad.type == "Enum" else ad.type
        if isinstance(e, Unary):
            t = visit(e.operand)
            if t is None:
                return None
            if e.op == "not":
                if t != BOOL_T:
                    problems.append(f"'not' needs Bool, got {t}")
                    return None
                return BOOL_T
            if not _numeric(t):
                problems.append(f"unary '-' needs a number, got {t}")
                return None
            return t
        if isinstance(e, Call):
            ts = [visit(a) for a in e.args]
            if any(t is None for t in ts):
                return None
            bad = [t for t in ts if not _numeric(t)]
            if bad:
                problems.append(f"{e.func} needs numbers, got {bad[0]}")
                return None
            return FLOAT_T if FLOAT_T in ts else INT_T
        lt, rt = visit(e.left), visit(e.right)
        if lt is None or rt is None:
            return None
        op = e.op
        if op in ("and", "or"):
            if lt != BOOL_T or rt != BOOL_T:
                problems.append(f"'{op}' needs Bool operands, got {lt} and {rt}")
                return None
            return BOOL_T
        if op in ADD_OPS or op in MUL_OPS:
            if not (_numeric(lt) and _numeric(rt)):
                problems.append(f"'{op}' needs numeric operands, got {lt} and {rt}")
                return None
            if op == "/":
                return FLOAT_T
            return FLOAT_T if FLOAT_T in (lt, rt) else INT_T
        # comparison
        if _numeric(lt) and _numeric(rt):
            return BOOL_T
        if lt == rt and lt in (STRING_T, BOOL_T):
            if lt == BOOL_T and op not in ("=", "<>"):
                problems.append("Bool supports only = and <>")
                return None
            return BOOL_T
        problems.append(f"cannot compare {lt} with {rt}")
        return None

    t = visit(expr)
    return (t if not problems else None), problems


def referenced_attrs(expr: Expr, obj: str) -> set[str]:
    """Attribute names of context object ``obj`` that the expression reads."""
    out: set[str] = set()

    def visit(e: Expr):
        if isinstance(e, Nav):
            if e.obj == obj and e.attr is not None:
                out.add(e.attr)
        elif isinstance(e, Unary):
            visit(e.operand)
        elif isinstance(e, Binary):
            visit(e.left)
            visit(e.right)
        elif isinstance(e, Call):
            for a in e.args:
                visit(a)

    visit(expr)
    return out


# -- evaluation -----------------------------------------------------------


def eval_expr(expr: Expr, ctx: Mapping[str, ModelElement]) -> Any:
    if isinstance(expr, Lit):
        return expr.value
    if isinstance(expr, Nav):
        if expr.attr is None:
            raise UnknownIdentifier(f"bare identifier {expr.obj!r} is not bound")
        elem = ctx.get(expr.obj)
        if elem is None:
            raise NullNavigation(f"no {expr.obj!r} in evaluation context")
        if expr.attr not in elem.attrs:
            raise UnknownIdentifier(f"{elem.class_name} has no attribute {expr.attr!r}")
        return elem.attrs[expr.attr]
    if isinstance(expr, Unary):
        if expr.op == "not":
            return not eval_expr(expr.operand, ctx)
        return -eval_expr(expr.operand, ctx)
    if isinstance(expr, Call):
        args = [eval_expr(a, ctx) for a in expr.args]
        if expr.func == "abs":
            return abs(args[0])
        out = min(args) if expr.func == "min" else max(args)
        # mixed Int/Float args yield Float, matching inference
        if any(type(a) is float for a in args):
            return float(out)
        return out
    op = expr.op
    if op == "and":
        return bool(eval_expr(expr.left, ctx)) and bool(eval_expr(expr.right, ctx))
    if op == "or":
        return bool(eval_expr(expr.left, ctx)) or bool(eval_expr(expr.right, ctx))
    left = eval_expr(expr.left, ctx)
    right = eval_expr(expr.right, ctx)
    if op == "+":
        return left + right
    if op == "-":
        return left - right
    if op == "*":
        return left * right
    if op == "/":
        if right == 0:
            raise DivisionByZero(f"division by zero: {print_expr(expr)}")
        return left / right
    if op == "<":
        return left < right
    if op == "<=":
        return left <= right
    if op == ">":
        return left > right
    if op == ">=":
        return left >= right
    if op == "=":
        return left == right
    if op == "<>":
        return left != right
    raise EvalError(f"unknown operator {op!r}")
