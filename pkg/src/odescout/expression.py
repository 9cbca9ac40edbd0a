"""Candidate-term grammar: parsing, rendering, evaluation and skeletons.

A *term* is a coefficient-free expression over the state variables
``x0 .. x{d-1}``.  The sampler proposes lists of terms per dimension; each
list becomes a :class:`ParamedEquation` whose output is
``theta[0]*term_0 + ... + theta[k-1]*term_{k-1} + theta[k]``.

The surface syntax is the Python expression subset the sampler emits
(``"np.sin(x1)"``, ``"x0*x0"``, ``"x0**3"``), parsed with :mod:`ast` and
converted to a small immutable tree.
"""

from __future__ import annotations

import ast
import math
import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterable, Sequence, Union

import numpy as np

from .errors import (
    ForbiddenPlaceholder,
    ParamLengthMismatch,
    ParseError,
    TermCapExceeded,
    UnknownSymbol,
    VariableOutOfRange,
)

DEFAULT_MAX_DEPTH = 12
DEFAULT_TERM_CAP = 10

UNARY_FUNCS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "sinh": np.sinh,
    "cosh": np.cosh,
    "tanh": np.tanh,
    "sign": np.sign,
}

BINARY_OPS: dict[str, Callable[[np.ndarray, np.ndarray], np.ndarray]] = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
    "pow": np.power,
}

_SYMBOL = {"add": " + ", "sub": " - ", "mul": "*", "div": "/", "pow": "**"}
_PREC = {"add": 1, "sub": 1, "mul": 2, "div": 2, "pow": 4}
_NEG_PREC = 3
_ATOM_PREC = 5

_NAMESPACES = {"np", "numpy", "math"}
_CONSTANTS = {"pi": math.pi, "e": math.e}
_PLACEHOLDERS = {"params", "C", "c", "theta", "coef", "coeff"}
_VAR_RE = re.compile(r"^x(\d+)$")


@dataclass(frozen=True)
class Var:
    index: int


@dataclass(frozen=True)
class Lit:
    value: float


@dataclass(frozen=True)
class Unary:
    func: str
    arg: "Expression"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Expression"
    right: "Expression"


Expression = Union[Var, Lit, Unary, Binary]


def depth(expr: Expression) -> int:
    if isinstance(expr, (Var, Lit)):
        return 1
    if isinstance(expr, Unary):
        return 1 + depth(expr.arg)
    return 1 + max(depth(expr.left), depth(expr.right))


def variables(expr: Expression) -> set[int]:
    if isinstance(expr, Var):
        return {expr.index}
    if isinstance(expr, Lit):
        return set()
    if isinstance(expr, Unary):
        return variables(expr.arg)
    return variables(expr.left) | variables(expr.right)


def is_constant(expr: Expression) -> bool:
    return not variables(expr)


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def parse_term(text: str, dimension: int, max_depth: int = DEFAULT_MAX_DEPTH) -> Expression:
    """Parse one coefficient-free term over ``x0 .. x{dimension-1}``.

    ``np.``/``numpy.``/``math.`` prefixes on functions and constants are
    accepted and dropped; ``^`` is read as a power.  Coefficient placeholders
    (``params[0]``, ``C``) are rejected, as are identifiers outside the
    grammar.
    """
    if not isinstance(text, str) or not text.strip():
        raise ParseError("empty term")
    source = text.strip().replace("^", "**")
    try:
        tree = ast.parse(source, mode="eval")
    except SyntaxError as exc:
        raise ParseError(f"malformed term {text!r}: {exc.msg}") from None
    expr = _convert(tree.body, dimension, text)
    if depth(expr) > max_depth:
        raise ParseError(f"term {text!r} exceeds max depth {max_depth}")
    return expr


def _name_of(node: ast.AST) -> str | None:
    """Return the bare identifier of a Name or a namespaced Attribute."""
    if isinstance(node, ast.Name):
        return node.id
    if isinstance(node, ast.Attribute) and isinstance(node.value, ast.Name):
        if node.value.id in _NAMESPACES:
            return node.attr
        if node.value.id in _PLACEHOLDERS:
            raise ForbiddenPlaceholder(f"coefficient placeholder {node.value.id!r}")
        raise UnknownSymbol(f"unknown namespace {node.value.id!r}")
    return None


def _convert(node: ast.AST, dim: int, text: str) -> Expression:
    if isinstance(node, ast.Constant):
        if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
            raise ParseError(f"unsupported literal {node.value!r} in {text!r}")
        return Lit(float(node.value))

    if isinstance(node, ast.Name):
        ident = node.id
        match = _VAR_RE.match(ident)
        if match:
            index = int(match.group(1))
            if index >= dim:
                raise VariableOutOfRange(f"x{index} does not exist in a {dim}-dimensional system")
            return Var(index)
        if ident in _CONSTANTS:
            return Lit(_CONSTANTS[ident])
        if ident in _PLACEHOLDERS:
            raise ForbiddenPlaceholder(f"coefficient placeholder {ident!r} in {text!r}")
        raise UnknownSymbol(f"undeclared identifier {ident!r} in {text!r}")

    if isinstance(node, ast.Attribute):
        ident = _name_of(node)
        if ident in _CONSTANTS:
            return Lit(_CONSTANTS[ident])
        raise UnknownSymbol(f"unknown attribute {ident!r} in {text!r}")

    if isinstance(node, ast.Subscript):
        base = node.value
        if isinstance(base, ast.Name) and base.id in _PLACEHOLDERS:
            raise ForbiddenPlaceholder(f"coefficient placeholder {base.id}[...] in {text!r}")
        raise ParseError(f"subscripts are not part of the term grammar: {text!r}")

    if isinstance(node, ast.Call):
        ident = _name_of(node.func)
        if ident is None:
            raise ParseError(f"unsupported call in {text!r}")
        if node.keywords:
            raise ParseError(f"keyword arguments are not supported: {text!r}")
        if ident == "power" and len(node.args) == 2:
            return _make_pow(
                _convert(node.args[0], dim, text), _convert(node.args[1], dim, text), text
            )
        if ident not in UNARY_FUNCS:
            if ident in _PLACEHOLDERS:
                raise ForbiddenPlaceholder(f"coefficient placeholder {ident!r} in {text!r}")
            raise UnknownSymbol(f"unknown function {ident!r} in {text!r}")
        if len(node.args) != 1:
            raise ParseError(f"{ident} takes exactly one argument: {text!r}")
        return Unary(ident, _convert(node.args[0], dim, text))

    if isinstance(node, ast.UnaryOp):
        operand = _convert(node.operand, dim, text)
        if isinstance(node.op, ast.UAdd):
            return operand
        if isinstance(node.op, ast.USub):
            if isinstance(operand, Lit):
                return Lit(-operand.value)
            return Binary("mul", Lit(-1.0), operand)
        raise ParseError(f"unsupported unary operator in {text!r}")

    if isinstance(node, ast.BinOp):
        left = _convert(node.left, dim, text)
        right = _convert(node.right, dim, text)
        op = node.op
        if isinstance(op, ast.Add):
            return Binary("add", left, right)
        if isinstance(op, ast.Sub):
            return Binary("sub", left, right)
        if isinstance(op, ast.Mult):
            return Binary("mul", left, right)
        if isinstance(op, ast.Div):
            return Binary("div", left, right)
        if isinstance(op, (ast.Pow, ast.BitXor)):
            return _make_pow(left, right, text)
        raise ParseError(f"unsupported operator {type(op).__name__} in {text!r}")

    raise ParseError(f"unsupported syntax {type(node).__name__} in {text!r}")


def _fold_constant(expr: Expression) -> float | None:
    if isinstance(expr, Lit):
        return expr.value
    if isinstance(expr, Binary) and is_constant(expr):
        left, right = _fold_constant(expr.left), _fold_constant(expr.right)
        if left is None or right is None:
            return None
        with np.errstate(all="ignore"):
            value = float(BINARY_OPS[expr.op](np.float64(left), np.float64(right)))
        return value if math.isfinite(value) else None
    return None


def _make_pow(base: Expression, exponent: Expression, text: str) -> Binary:
    value = _fold_constant(exponent)
    if value is None:
        raise ParseError(f"exponents must be numeric literals: {text!r}")
    return Binary("pow", base, Lit(value))


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def format_literal(value: float) -> str:
    if math.isfinite(value) and float(value).is_integer() and abs(value) < 1e16:
        return str(int(value))
    return repr(float(value))


def _render(expr: Expression) -> tuple[str, int]:
    if isinstance(expr, Var):
        return f"x{expr.index}", _ATOM_PREC
    if isinstance(expr, Lit):
        text = format_literal(expr.value)
        return text, (_NEG_PREC if text.startswith("-") else _ATOM_PREC)
    if isinstance(expr, Unary):
        return f"{expr.func}({_render(expr.arg)[0]})", _ATOM_PREC

    prec = _PREC[expr.op]
    left, left_prec = _render(expr.left)
    right, right_prec = _render(expr.right)
    if expr.op == "pow":
        if left_prec <= prec:
            left = f"({left})"
    elif left_prec < prec:
        left = f"({left})"
    # right operands: ties need parentheses for left-associative operators,
    # negative literals are always wrapped for readability
    if right_prec <= prec or right_prec == _NEG_PREC:
        right = f"({right})"
    return f"{left}{_SYMBOL[expr.op]}{right}", prec


def render(expr: Expression) -> str:
    """Render an expression in the term grammar; ``parse_term`` inverts it."""
    return _render(expr)[0]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

Columns = Sequence[np.ndarray]


@lru_cache(maxsize=4096)
def compile_expr(expr: Expression) -> Callable[[Columns, int], np.ndarray]:
    """Build a closure ``f(columns, n) -> values`` for repeated evaluation."""
    if isinstance(expr, Var):
        index = expr.index
        return lambda cols, n: cols[index]
    if isinstance(expr, Lit):
        value = expr.value
        return lambda cols, n: np.full(n, value)
    if isinstance(expr, Unary):
        func = UNARY_FUNCS[expr.func]
        arg = compile_expr(expr.arg)
        return lambda cols, n: func(arg(cols, n))
    op = BINARY_OPS[expr.op]
    left = compile_expr(expr.left)
    right = compile_expr(expr.right)
    return lambda cols, n: op(left(cols, n), right(cols, n))


def _columns(states: np.ndarray) -> list[np.ndarray]:
    states = np.asarray(states, dtype=float)
    if states.ndim == 1:
        states = states[None, :]
    return [states[:, i] for i in range(states.shape[1])]


def evaluate(expr: Expression, states: np.ndarray) -> np.ndarray:
    """Evaluate ``expr`` on every row of an ``N x d`` state matrix.

    Domain violations never raise; they surface as ``inf``/``nan`` entries,
    which callers treat as the non-finite flag.
    """
    cols = _columns(states)
    n = len(cols[0]) if cols else 0
    if any(i >= len(cols) for i in variables(expr)):
        raise VariableOutOfRange("expression references a variable outside the state matrix")
    with np.errstate(all="ignore"):
        out = compile_expr(expr)(cols, n)
    return np.asarray(out, dtype=float).reshape(n)


def is_finite(values: np.ndarray) -> bool:
    return bool(np.all(np.isfinite(values)))


# ---------------------------------------------------------------------------
# skeletons
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamedEquation:
    """One dimension's skeleton: linear combination of terms plus a bias."""

    terms: tuple[Expression, ...]
    dim: int

    @property
    def n_terms(self) -> int:
        return len(self.terms)

    @property
    def n_params(self) -> int:
        return len(self.terms) + 1

    def term_matrix(self, states: np.ndarray) -> np.ndarray:
        """``N x k`` matrix of term values (may hold non-finite entries)."""
        states = np.asarray(states, dtype=float)
        n = states.shape[0]
        if not self.terms:
            return np.zeros((n, 0))
        return np.column_stack([evaluate(t, states) for t in self.terms])

    def term_strings(self) -> list[str]:
        return [render(t) for t in self.terms]

    def keys(self) -> list[str]:
        return [skeleton_key(t) for t in self.terms]

    def format(self, theta: Sequence[float], digits: int = 4) -> str:
        parts = []
        for coef, term in zip(theta[:-1], self.terms):
            parts.append(f"{coef:.{digits}f}*({render(term)})")
        parts.append(f"{theta[-1]:.{digits}f}")
        text = " + ".join(parts)
        return text.replace("+ -", "- ")


def build_skeleton(
    terms: Iterable[Expression | str],
    dim: int,
    dimension: int | None = None,
    term_cap: int = DEFAULT_TERM_CAP,
) -> ParamedEquation:
    """Attach a coefficient to every term and append a bias slot.

    String terms are parsed against ``dimension`` (required in that case).
    """
    parsed: list[Expression] = []
    for term in terms:
        if isinstance(term, str):
            if dimension is None:
                raise ValueError("dimension is required to parse string terms")
            term = parse_term(term, dimension)
        parsed.append(term)
    if len(parsed) > term_cap:
        raise TermCapExceeded(f"{len(parsed)} terms exceed the cap of {term_cap}")
    return ParamedEquation(tuple(parsed), dim)


def evaluate_term_matrix(phi: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Linear skeleton output from a precomputed term matrix."""
    with np.errstate(all="ignore"):
        out = phi @ theta[:-1] + theta[-1]
    if not np.all(np.isfinite(out)):
        return np.full(phi.shape[0], np.nan)
    return out


def evaluate_skeleton(eq: ParamedEquation, theta: Sequence[float], states: np.ndarray) -> np.ndarray:
    """Skeleton output on ``states``; any non-finite entry flags the whole vector (all NaN)."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (eq.n_params,):
        raise ParamLengthMismatch(f"expected {eq.n_params} parameters, got {theta.shape}")
    return evaluate_term_matrix(eq.term_matrix(states), theta)


# ---------------------------------------------------------------------------
# canonical keys
# ---------------------------------------------------------------------------

KEY_DIGITS = 10


def _round_literal(value: float) -> float:
    rounded = float(f"{value:.{KEY_DIGITS}g}")
    return 0.0 if rounded == 0 else rounded


def _split_product(expr: Expression, num: list, den: list) -> None:
    if isinstance(expr, Binary) and expr.op == "mul":
        _split_product(expr.left, num, den)
        _split_product(expr.right, num, den)
    elif isinstance(expr, Binary) and expr.op == "div":
        _split_product(expr.left, num, den)
        _split_product(expr.right, den, num)
    else:
        num.append(expr)


def _split_sum(expr: Expression, out: list, sign: float = 1.0) -> None:
    if isinstance(expr, Binary) and expr.op in ("add", "sub"):
        _split_sum(expr.left, out, sign)
        _split_sum(expr.right, out, sign if expr.op == "add" else -sign)
    elif sign < 0:
        out.append(Binary("mul", Lit(-1.0), expr))
    else:
        out.append(expr)


def _chain(op: str, items: list[Expression]) -> Expression:
    result = items[0]
    for item in items[1:]:
        result = Binary(op, result, item)
    return result


def _merge_powers(factors: list[Expression]) -> list[Expression]:
    exponents: dict[str, float] = {}
    bases: dict[str, Expression] = {}
    for factor in factors:
        if isinstance(factor, Binary) and factor.op == "pow":
            base, power = factor.left, factor.right.value  # type: ignore[union-attr]
        else:
            base, power = factor, 1.0
        text = render(base)
        bases[text] = base
        exponents[text] = exponents.get(text, 0.0) + power
    merged = []
    for text in sorted(bases):
        power = _round_literal(exponents[text])
        merged.append(bases[text] if power == 1.0 else Binary("pow", bases[text], Lit(power)))
    return merged


def _canonical_product(num: list[Expression], den: list[Expression]) -> Expression:
    coef = 1.0
    num_f, den_f = [], []
    for factor in num:
        if isinstance(factor, Lit):
            coef *= factor.value
        else:
            num_f.append(factor)
    for factor in den:
        if isinstance(factor, Lit):
            coef /= factor.value if factor.value != 0 else math.nan
        else:
            den_f.append(factor)
    num_f = _merge_powers(num_f)
    den_f = _merge_powers(den_f)
    head: list[Expression] = []
    if coef != 1.0 or not num_f:
        head = [Lit(_round_literal(coef)) if math.isfinite(coef) else Lit(coef)]
    numerator = _chain("mul", head + num_f)
    if not den_f:
        return numerator
    return Binary("div", numerator, _chain("mul", den_f))


def canonicalize(expr: Expression) -> Expression:
    """Order-independent normal form used for skeleton keys.

    Sums and products are flattened and their operands sorted by rendered
    text; repeated product factors become powers; subtraction becomes the
    addition of a negated operand; literals are rounded to ``KEY_DIGITS``
    significant digits so near-equal constants coincide.
    """
    if isinstance(expr, Var):
        return expr
    if isinstance(expr, Lit):
        return Lit(_round_literal(expr.value))
    if isinstance(expr, Unary):
        return Unary(expr.func, canonicalize(expr.arg))
    if expr.op == "pow":
        base = canonicalize(expr.left)
        power = _round_literal(expr.right.value)  # type: ignore[union-attr]
        if power == 1.0:
            return base
        return _canonical_product([Binary("pow", base, Lit(power))], [])
    if expr.op in ("mul", "div"):
        num: list[Expression] = []
        den: list[Expression] = []
        _split_product(expr, num, den)
        return _canonical_product(
            [canonicalize(f) for f in num], [canonicalize(f) for f in den]
        )
    items: list[Expression] = []
    _split_sum(expr, items)
    canon = [canonicalize(item) for item in items]
    flat: list[Expression] = []
    constant = 0.0
    has_constant = False
    for item in canon:
        if isinstance(item, Binary) and item.op == "add":
            # a canonical child sum can surface after a sign flip
            _split_sum(item, flat)
        elif isinstance(item, Lit):
            constant += item.value
            has_constant = True
        else:
            flat.append(item)
    if has_constant and (constant != 0.0 or not flat):
        flat.append(Lit(_round_literal(constant)))
    flat.sort(key=render)
    return _chain("add", flat)


def _strip_outer_coefficient(expr: Expression) -> Expression:
    """Drop a multiplicative literal at the top of a non-constant term."""
    if is_constant(expr) or not (isinstance(expr, Binary) and expr.op in ("mul", "div")):
        return expr
    num: list[Expression] = []
    den: list[Expression] = []
    _split_product(expr, num, den)
    return _canonical_product(
        [f for f in num if not isinstance(f, Lit)], [f for f in den if not isinstance(f, Lit)]
    )


def canonical_term(expr: Expression) -> Expression:
    return _strip_outer_coefficient(canonicalize(expr))


def skeleton_key(expr: Expression) -> str:
    """Canonical ``"C*(...)"`` key of a coefficient-stripped term."""
    return f"C*({render(canonical_term(expr))})"


def parse_key(key: str, dimension: int) -> Expression:
    """Parse a ``C*(...)`` key (or a bare term) back into an expression."""
    text = key.strip()
    if text.startswith("C*"):
        text = text[2:].strip()
    return parse_term(text, dimension)
