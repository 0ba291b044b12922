"""Expression trees and asymptotically quasi-homogeneous vector fields.

A vector field ``f`` on R^n is stored as two lists of expression trees: the
quasi-homogeneous part ``f_q`` of type ``alpha`` and order ``k + 1`` and the
lower-order residual ``f_res``.  Evaluation goes through small generated
Python functions so that the ODE integrator stays reasonably fast.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    CertificateFailure,
    DivisionNearZero,
    DomainError,
    NegativeBaseRealPower,
    NotMonomialSum,
    UnknownIdentifier,
    WeightTooHigh,
)

TOL_WEIGHT = 1e-9
TOL_DIV = 1e-12
CERT_POINTS = 20
CERT_SCALES = (10.0, 100.0, 1000.0)
SCALING_TOL = 1e-9


# ---------------------------------------------------------------------------
# expression nodes
# ---------------------------------------------------------------------------

class Expr:
    """Base class of expression nodes.  Nodes are immutable and comparable."""

    __slots__ = ()


@dataclass(frozen=True)
class Const(Expr):
    value: float


@dataclass(frozen=True)
class Var(Expr):
    index: int
    name: str


@dataclass(frozen=True)
class Param(Expr):
    name: str


@dataclass(frozen=True)
class Sum(Expr):
    terms: tuple


@dataclass(frozen=True)
class Neg(Expr):
    arg: Expr


@dataclass(frozen=True)
class Mul(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Div(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Pow(Expr):
    base: Expr
    exponent: float


ZERO = Const(0.0)
ONE = Const(1.0)


def children(e: Expr) -> tuple:
    if isinstance(e, Sum):
        return e.terms
    if isinstance(e, Neg):
        return (e.arg,)
    if isinstance(e, (Mul, Div)):
        return (e.left, e.right)
    if isinstance(e, Pow):
        return (e.base,)
    return ()


def variables(e: Expr) -> set[int]:
    if isinstance(e, Var):
        return {e.index}
    out: set[int] = set()
    for c in children(e):
        out |= variables(c)
    return out


def parameters(e: Expr) -> set[str]:
    if isinstance(e, Param):
        return {e.name}
    out: set[str] = set()
    for c in children(e):
        out |= parameters(c)
    return out


def is_zero(e: Expr) -> bool:
    return isinstance(e, Const) and e.value == 0.0


# smart constructors used by differentiation; they only fold the trivial cases

def mk_sum(terms: Iterable[Expr]) -> Expr:
    kept = [t for t in terms if not is_zero(t)]
    if not kept:
        return ZERO
    if len(kept) == 1:
        return kept[0]
    return Sum(tuple(kept))


def mk_neg(e: Expr) -> Expr:
    if is_zero(e):
        return ZERO
    if isinstance(e, Neg):
        return e.arg
    return Neg(e)


def mk_mul(a: Expr, b: Expr) -> Expr:
    if is_zero(a) or is_zero(b):
        return ZERO
    if a == ONE:
        return b
    if b == ONE:
        return a
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value * b.value)
    return Mul(a, b)


def mk_div(a: Expr, b: Expr) -> Expr:
    if is_zero(a):
        return ZERO
    if b == ONE:
        return a
    return Div(a, b)


def mk_pow(b: Expr, p: float) -> Expr:
    if p == 0.0:
        return ONE
    if p == 1.0:
        return b
    return Pow(b, float(p))


def diff(e: Expr, i: int) -> Expr:
    """Symbolic partial derivative with respect to variable ``i``."""
    if isinstance(e, (Const, Param)):
        return ZERO
    if isinstance(e, Var):
        return ONE if e.index == i else ZERO
    if i not in variables(e):
        return ZERO
    if isinstance(e, Sum):
        return mk_sum(diff(t, i) for t in e.terms)
    if isinstance(e, Neg):
        return mk_neg(diff(e.arg, i))
    if isinstance(e, Mul):
        return mk_sum([mk_mul(diff(e.left, i), e.right), mk_mul(e.left, diff(e.right, i))])
    if isinstance(e, Div):
        num = mk_sum([mk_mul(diff(e.left, i), e.right),
                      mk_neg(mk_mul(e.left, diff(e.right, i)))])
        return mk_div(num, mk_pow(e.right, 2.0))
    if isinstance(e, Pow):
        outer = mk_mul(Const(e.exponent), mk_pow(e.base, e.exponent - 1.0))
        return mk_mul(outer, diff(e.base, i))
    raise TypeError(f"unknown node {e!r}")


# ---------------------------------------------------------------------------
# numeric evaluation
# ---------------------------------------------------------------------------

def _div(a: float, b: float) -> float:
    if abs(b) < TOL_DIV:
        raise DivisionNearZero(f"denominator {b!r} below {TOL_DIV}")
    return a / b


def _ipow(b: float, n: int) -> float:
    if n < 0 and abs(b) < TOL_DIV:
        raise DivisionNearZero(f"negative power of {b!r}")
    return b ** n


def _rpow(b: float, p: float) -> float:
    if b < 0.0:
        raise NegativeBaseRealPower(f"real power {p} of negative base {b!r}")
    if b < TOL_DIV and p < 0.0:
        raise DivisionNearZero(f"negative power {p} of {b!r}")
    return b ** p


def _codegen(e: Expr, params: Mapping[str, float]) -> str:
    if isinstance(e, Const):
        return repr(float(e.value))
    if isinstance(e, Var):
        return f"y[{e.index}]"
    if isinstance(e, Param):
        try:
            return repr(float(params[e.name]))
        except KeyError:
            raise UnknownIdentifier(f"parameter {e.name!r} is not bound") from None
    if isinstance(e, Sum):
        return "(" + " + ".join(_codegen(t, params) for t in e.terms) + ")"
    if isinstance(e, Neg):
        return f"(-{_codegen(e.arg, params)})"
    if isinstance(e, Mul):
        return f"({_codegen(e.left, params)} * {_codegen(e.right, params)})"
    if isinstance(e, Div):
        return f"_div({_codegen(e.left, params)}, {_codegen(e.right, params)})"
    if isinstance(e, Pow):
        b = _codegen(e.base, params)
        if float(e.exponent).is_integer():
            return f"_ipow({b}, {int(e.exponent)})"
        return f"_rpow({b}, {e.exponent!r})"
    raise TypeError(f"unknown node {e!r}")


def compile_exprs(exprs: Sequence[Expr], params: Mapping[str, float]) -> Callable:
    """Return ``F(y) -> list[float]`` evaluating all ``exprs`` at once."""
    body = ", ".join(_codegen(e, params) for e in exprs)
    src = f"def _f(y):\n    return [{body}]\n"
    ns = {"_div": _div, "_ipow": _ipow, "_rpow": _rpow}
    exec(compile(src, "<vector-field>", "exec"), ns)
    return ns["_f"]


def eval_expr(e: Expr, point: Sequence[float], params: Mapping[str, float]) -> float:
    return compile_exprs([e], params)(list(point))[0]


# ---------------------------------------------------------------------------
# vector fields
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QhType:
    alpha: tuple
    k: float

    def __post_init__(self):
        if self.k <= 0:
            raise ValueError("order parameter k must be positive")
        if any(a < 0 for a in self.alpha):
            raise ValueError("type entries must be nonnegative")
        if not any(a > 0 for a in self.alpha):
            raise ValueError("type must have a positive entry")

    @property
    def n(self) -> int:
        return len(self.alpha)

    @property
    def scaled(self) -> np.ndarray:
        """The vector alpha / k."""
        return np.asarray(self.alpha, dtype=float) / self.k

    @property
    def Lambda(self) -> np.ndarray:
        return np.diag(np.asarray(self.alpha, dtype=float))


@dataclass(frozen=True)
class VectorField:
    qh: QhType
    quasi: tuple
    residual: tuple
    params: Mapping[str, float] = field(default_factory=dict)
    names: tuple = ()

    def __post_init__(self):
        n = self.qh.n
        if len(self.quasi) != n or len(self.residual) != n:
            raise ValueError("quasi/residual length must equal the dimension")
        if not self.names:
            object.__setattr__(self, "names", tuple(f"y{i + 1}" for i in range(n)))
        for e in (*self.quasi, *self.residual):
            missing = parameters(e) - set(self.params)
            if missing:
                raise UnknownIdentifier(f"undeclared parameters {sorted(missing)}")

    @property
    def n(self) -> int:
        return self.qh.n

    @cached_property
    def full(self) -> tuple:
        return tuple(mk_sum([q, r]) for q, r in zip(self.quasi, self.residual))

    @cached_property
    def f(self) -> Callable:
        return compile_exprs(self.full, self.params)

    @cached_property
    def f_quasi(self) -> Callable:
        return compile_exprs(self.quasi, self.params)

    @cached_property
    def f_res(self) -> Callable:
        return compile_exprs(self.residual, self.params)

    @cached_property
    def jac_exprs(self) -> tuple:
        return tuple(diff(q, j) for q in self.quasi for j in range(self.n))

    @cached_property
    def _jac(self) -> Callable:
        return compile_exprs(self.jac_exprs, self.params)

    @property
    def residual_is_zero(self) -> bool:
        return all(is_zero(r) for r in self.residual)


def evaluate(vf: VectorField, point: Sequence[float]) -> np.ndarray:
    if len(point) != vf.n:
        raise ValueError(f"point has length {len(point)}, expected {vf.n}")
    return np.array(vf.f(list(map(float, point))))


def evaluate_quasi(vf: VectorField, point: Sequence[float]) -> np.ndarray:
    return np.array(vf.f_quasi(list(map(float, point))))


def evaluate_residual(vf: VectorField, point: Sequence[float]) -> np.ndarray:
    return np.array(vf.f_res(list(map(float, point))))


def jacobian_quasi(vf: VectorField, point: Sequence[float]) -> np.ndarray:
    """Df_q(point) from the symbolically differentiated expression trees."""
    vals = vf._jac(list(map(float, point)))
    return np.array(vals, dtype=float).reshape(vf.n, vf.n)


def euler_residual(vf: VectorField, point: Sequence[float]) -> np.ndarray:
    """Df_q(x) Lambda x - (k I + Lambda) f_q(x); zero for a true quasi-homogeneous part."""
    x = np.asarray(point, dtype=float)
    lam = np.asarray(vf.qh.alpha, dtype=float)
    return jacobian_quasi(vf, x) @ (lam * x) - (vf.qh.k + lam) * evaluate_quasi(vf, x)


# ---------------------------------------------------------------------------
# monomial decomposition
# ---------------------------------------------------------------------------

def _flatten_terms(e: Expr) -> list[Expr]:
    return list(e.terms) if isinstance(e, Sum) else [e]


def monomial_exponents(term: Expr, n: int) -> np.ndarray:
    """Exponent vector of ``c * y^beta``; raises NotMonomialSum otherwise."""
    beta = np.zeros(n)

    def walk(e: Expr, power: float):
        if not variables(e):
            return
        if isinstance(e, Var):
            beta[e.index] += power
        elif isinstance(e, Neg):
            walk(e.arg, power)
        elif isinstance(e, Mul):
            walk(e.left, power)
            walk(e.right, power)
        elif isinstance(e, Div):
            if variables(e.right):
                raise NotMonomialSum("quotient with variables in the denominator")
            walk(e.left, power)
        elif isinstance(e, Pow) and isinstance(e.base, Var):
            beta[e.base.index] += power * e.exponent
        elif isinstance(e, Pow) and float(e.exponent).is_integer() and e.exponent > 0:
            walk(e.base, power * e.exponent)
        else:
            raise NotMonomialSum(f"term is not a monomial: {type(e).__name__} node")

    walk(term, 1.0)
    return beta


def auto_split(exprs: Sequence[Expr], qh: QhType,
               params: Mapping[str, float] | None = None) -> tuple[tuple, tuple]:
    """Split monomial sums into quasi-homogeneous and lower-order parts by weight.

    With ``params`` given, monomials whose coefficient evaluates to zero are dropped,
    so a parameter switched off removes its term entirely.
    """
    if len(exprs) != qh.n:
        raise ValueError("one expression per component required")
    alpha = np.asarray(qh.alpha, dtype=float)
    ones = [1.0] * qh.n
    quasi, residual = [], []
    for i, e in enumerate(exprs):
        q, r = [], []
        for term in _flatten_terms(e):
            beta = monomial_exponents(term, qh.n)
            if params is not None and eval_expr(term, ones, params) == 0.0:
                continue
            weight = float(alpha @ beta)
            target = qh.k + alpha[i]
            if abs(weight - target) <= TOL_WEIGHT:
                q.append(term)
            elif weight < target:
                r.append(term)
            else:
                raise WeightTooHigh(
                    f"component {i + 1}: monomial weight {weight:g} exceeds k + alpha_i = {target:g}")
        quasi.append(mk_sum(q))
        residual.append(mk_sum(r))
    return tuple(quasi), tuple(residual)


# ---------------------------------------------------------------------------
# certificates
# ---------------------------------------------------------------------------

def _unit_points(n: int, count: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    pts = rng.standard_normal((count, n))
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def quasi_certificate(vf: VectorField, seed: int = 0, scales=CERT_SCALES) -> float:
    """Worst normalised violation of f_q(s^L x) = s^(k+alpha_i) f_q(x) over samples."""
    alpha = np.asarray(vf.qh.alpha, dtype=float)
    worst, used = 0.0, 0
    for x in _unit_points(vf.n, CERT_POINTS, seed):
        try:
            base = evaluate_quasi(vf, x)
            for s in scales:
                scaled = evaluate_quasi(vf, s ** alpha * x)
                expected = s ** (vf.qh.k + alpha) * base
                err = np.abs(scaled - expected) / (1.0 + np.abs(expected))
                worst = max(worst, float(err.max()))
        except DomainError:
            continue
        used += 1
    if used == 0:
        raise CertificateFailure("no sample point lies in the domain of the quasi part")
    return worst


def residual_certificate(vf: VectorField, seed: int = 1, scales=CERT_SCALES) -> bool:
    """True when s^-(k+alpha_i) f_res(s^L x) decays along the scale grid at every sample."""
    if vf.residual_is_zero:
        return True
    alpha = np.asarray(vf.qh.alpha, dtype=float)
    used = 0
    for x in _unit_points(vf.n, CERT_POINTS, seed):
        try:
            rows = [np.abs(evaluate_residual(vf, s ** alpha * x)) / s ** (vf.qh.k + alpha)
                    for s in scales]
        except DomainError:
            continue
        used += 1
        r = np.array(rows)
        for i in range(vf.n):
            col = r[:, i]
            if col[-1] <= 1e-12:
                continue
            if not np.all(np.diff(col) < 0):
                return False
    if used == 0:
        raise CertificateFailure("no sample point lies in the domain of the residual")
    return True


def check_certificates(vf: VectorField) -> None:
    worst = quasi_certificate(vf)
    if worst > SCALING_TOL:
        raise CertificateFailure(f"quasi part is not quasi-homogeneous (violation {worst:.3g})")
    if not residual_certificate(vf):
        raise CertificateFailure("residual part is not of lower order")


def zero_field(qh: QhType) -> VectorField:
    zeros = tuple(ZERO for _ in range(qh.n))
    return VectorField(qh, zeros, zeros)


def format_number(x: float) -> str:
    if math.isfinite(x) and float(x).is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(float(x))
