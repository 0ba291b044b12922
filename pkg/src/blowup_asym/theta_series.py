"""Finite generalized series in theta = t_max - t with log-power factors.

A series is a finite sum of terms ``c * theta^gamma * (ln theta)^m`` whose
coefficients are polynomials in symbolic parameters (the free constants of an
expansion).  Each series also records ``trunc``: the series is exact for all
exponents below ``trunc`` and says nothing from there on, i.e. the remainder
is O(theta^trunc).  ``trunc = inf`` marks an
exact finite sum.  Arithmetic propagates ``trunc`` soundly, so precision lost
through negative-degree factors is tracked instead of guessed.

Time derivatives use ``d theta / dt = -1``.
"""

from __future__ import annotations

import bisect
import math
from typing import Iterable, Mapping, NamedTuple, Sequence

from .errors import (
    LeadingTermNotInvertible,
    NonPositiveLeadingCoefficient,
    UnboundParameter,
    UnboundedTruncation,
)
from .vf_core import Const, Div, Expr, Mul, Neg, Param, Pow, Sum, Var

EPS_CLEAN = 1e-13
GAMMA_MERGE = 1e-10
INF = math.inf
_SNAP = 1e-12


def _snap(g: float) -> float:
    # cancellation like -1/2 + 1/2 leaves dust; integer exponents are common enough to restore
    r = round(g)
    return float(r) if abs(g - r) < _SNAP else g


# ---------------------------------------------------------------------------
# parameter polynomials
# ---------------------------------------------------------------------------

def _mono_mul(a: tuple, b: tuple) -> tuple:
    if not a:
        return b
    if not b:
        return a
    d = dict(a)
    for name, e in b:
        d[name] = d.get(name, 0) + e
    return tuple(sorted(d.items()))


class ParamPoly:
    """Real polynomial in named parameters.

    Monomials are sorted tuples of ``(name, exponent)`` pairs; the empty tuple
    is the constant monomial.  Instances are treated as immutable.
    """

    __slots__ = ("d",)

    def __init__(self, d: Mapping[tuple, float] | None = None, eps: float = EPS_CLEAN):
        self.d = {m: float(c) for m, c in (d or {}).items() if abs(c) >= eps}

    @classmethod
    def const(cls, c: float) -> "ParamPoly":
        return cls({(): c})

    @classmethod
    def symbol(cls, name: str, c: float = 1.0) -> "ParamPoly":
        return cls({((name, 1),): c})

    def __bool__(self) -> bool:
        return bool(self.d)

    def __repr__(self) -> str:
        return f"ParamPoly({self.to_text()})"

    def __eq__(self, other) -> bool:
        if isinstance(other, (int, float)):
            other = ParamPoly.const(other)
        return isinstance(other, ParamPoly) and self.d == other.d

    def __hash__(self):
        return hash(tuple(sorted(self.d.items())))

    @property
    def is_constant(self) -> bool:
        return all(m == () for m in self.d)

    @property
    def constant(self) -> float:
        return self.d.get((), 0.0)

    @property
    def symbols(self) -> set:
        return {name for m in self.d for name, _ in m}

    @property
    def magnitude(self) -> float:
        return max((abs(c) for c in self.d.values()), default=0.0)

    def __add__(self, other: "ParamPoly") -> "ParamPoly":
        d = dict(self.d)
        for m, c in other.d.items():
            d[m] = d.get(m, 0.0) + c
        return ParamPoly(d)

    def __neg__(self) -> "ParamPoly":
        return ParamPoly({m: -c for m, c in self.d.items()})

    def __sub__(self, other: "ParamPoly") -> "ParamPoly":
        return self + (-other)

    def scale(self, s: float) -> "ParamPoly":
        return ParamPoly({m: c * s for m, c in self.d.items()})

    def __mul__(self, other) -> "ParamPoly":
        if isinstance(other, (int, float)):
            return self.scale(other)
        if len(other.d) == 1 and () in other.d:
            return self.scale(other.d[()])
        if len(self.d) == 1 and () in self.d:
            return other.scale(self.d[()])
        d: dict = {}
        for ma, ca in self.d.items():
            for mb, cb in other.d.items():
                m = _mono_mul(ma, mb)
                d[m] = d.get(m, 0.0) + ca * cb
        return ParamPoly(d)

    __rmul__ = __mul__

    def evaluate(self, bindings: Mapping[str, float]) -> float:
        total = 0.0
        for m, c in self.d.items():
            v = c
            for name, e in m:
                if name not in bindings:
                    raise UnboundParameter(f"parameter {name!r} is not bound")
                v *= bindings[name] ** e
            total += v
        return total

    def bind(self, bindings: Mapping[str, float]) -> "ParamPoly":
        """Substitute the given symbols, leaving the others symbolic."""
        d: dict = {}
        for m, c in self.d.items():
            rest = []
            for name, e in m:
                if name in bindings:
                    c *= bindings[name] ** e
                else:
                    rest.append((name, e))
            key = tuple(rest)
            d[key] = d.get(key, 0.0) + c
        return ParamPoly(d)

    def items(self):
        return sorted(self.d.items(), key=lambda kv: (sum(e for _, e in kv[0]), kv[0]))

    def to_text(self, digits: int = 10) -> str:
        if not self.d:
            return "0"
        parts = []
        for m, c in self.items():
            syms = "*".join(n if e == 1 else f"{n}^{e}" for n, e in m)
            num = f"{c:.{digits}g}"
            if not syms:
                parts.append(num)
            elif num == "1":
                parts.append(syms)
            elif num == "-1":
                parts.append(f"-{syms}")
            else:
                parts.append(f"{num}*{syms}")
        return " + ".join(parts).replace("+ -", "- ")

    def to_json(self, names: Sequence[str]) -> list:
        out = []
        for m, c in self.items():
            dm = dict(m)
            out.append({"params": [dm.get(n, 0) for n in names], "c": c})
        return out


# ---------------------------------------------------------------------------
# series
# ---------------------------------------------------------------------------

class ThetaTerm(NamedTuple):
    coeff: ParamPoly
    gamma: float
    m: int


class _Acc:
    """Accumulates terms, merging exponents closer than GAMMA_MERGE."""

    def __init__(self):
        self.gammas: list[float] = []
        self.data: dict[tuple, ParamPoly] = {}

    def canon(self, g: float) -> float:
        g = _snap(g)
        gs = self.gammas
        i = bisect.bisect_left(gs, g)
        for j in (i - 1, i):
            if 0 <= j < len(gs) and abs(gs[j] - g) < GAMMA_MERGE:
                return gs[j]
        gs.insert(i, g)
        return g

    def add(self, coeff: ParamPoly, g: float, m: int) -> None:
        key = (self.canon(g), m)
        prev = self.data.get(key)
        self.data[key] = coeff if prev is None else prev + coeff

    def series(self, trunc: float = INF) -> "ThetaSeries":
        terms = [ThetaTerm(c, g, m) for (g, m), c in self.data.items() if c and g < trunc - GAMMA_MERGE]
        return ThetaSeries._raw(terms, trunc)


class ThetaSeries:
    """Immutable finite sum of ThetaTerms plus a truncation exponent."""

    __slots__ = ("terms", "trunc")

    def __init__(self, terms: Iterable = (), trunc: float = INF):
        acc = _Acc()
        for t in terms:
            c, g, m = t
            if not isinstance(c, ParamPoly):
                c = ParamPoly.const(c)
            if m < 0 or int(m) != m:
                raise ValueError("log power must be a nonnegative integer")
            acc.add(c, float(g), int(m))
        built = acc.series(trunc)
        self.terms = built.terms
        self.trunc = built.trunc

    @classmethod
    def _raw(cls, terms: list, trunc: float) -> "ThetaSeries":
        s = object.__new__(cls)
        terms.sort(key=lambda t: (t.gamma, -t.m))
        s.terms = tuple(terms)
        s.trunc = trunc
        return s

    # -- constructors ----------------------------------------------------------

    @classmethod
    def zero(cls, trunc: float = INF) -> "ThetaSeries":
        return cls._raw([], trunc)

    @classmethod
    def const(cls, c, trunc: float = INF) -> "ThetaSeries":
        return cls([(c, 0.0, 0)], trunc)

    @classmethod
    def monomial(cls, c, gamma: float, m: int = 0) -> "ThetaSeries":
        return cls([(c, gamma, m)])

    # -- inspection -------------------------------------------------------------

    def __repr__(self) -> str:
        tr = "" if self.trunc == INF else f" + O(theta^{self.trunc:.6g})"
        return f"ThetaSeries({self.to_text()}{tr})"

    def __len__(self) -> int:
        return len(self.terms)

    def __iter__(self):
        return iter(self.terms)

    def __bool__(self) -> bool:
        return bool(self.terms)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ThetaSeries) or len(self) != len(other):
            return False
        if self.trunc != other.trunc:
            return False
        return all(a.m == b.m and abs(a.gamma - b.gamma) < GAMMA_MERGE and a.coeff == b.coeff
                   for a, b in zip(self.terms, other.terms))

    __hash__ = None

    @property
    def max_log_power(self) -> int:
        return max((t.m for t in self.terms), default=0)

    @property
    def symbols(self) -> set:
        out: set = set()
        for t in self.terms:
            out |= t.coeff.symbols
        return out

    @property
    def magnitude(self) -> float:
        return max((t.coeff.magnitude for t in self.terms), default=0.0)

    def coefficient(self, gamma: float, m: int = 0) -> ParamPoly:
        for t in self.terms:
            if t.m == m and abs(t.gamma - gamma) < 1e-9:
                return t.coeff
        return ParamPoly()

    def exponents(self) -> list[float]:
        out: list[float] = []
        for t in self.terms:
            if not out or abs(out[-1] - t.gamma) >= GAMMA_MERGE:
                out.append(t.gamma)
        return out

    def leading(self) -> ThetaTerm:
        if not self.terms:
            raise LeadingTermNotInvertible("empty series has no leading term")
        # several log powers may share the minimal exponent; sorting puts the highest first
        return self.terms[0]

    def to_text(self, digits: int = 10) -> str:
        if not self.terms:
            return "0"
        parts = []
        for t in self.terms:
            c = t.coeff.to_text(digits)
            if len(t.coeff.d) > 1:
                c = f"({c})"
            piece = c
            if t.gamma != 0.0:
                piece += f" * theta^{t.gamma:.{digits}g}"
            if t.m:
                piece += " * ln(theta)" + (f"^{t.m}" if t.m > 1 else "")
            parts.append(piece)
        return " + ".join(parts).replace("+ -", "- ")

    def to_json(self, names: Sequence[str]) -> list:
        return [{"gamma": t.gamma, "logpow": t.m, "coeff": t.coeff.to_json(names)}
                for t in self.terms]

    def bind(self, bindings: Mapping[str, float]) -> "ThetaSeries":
        return ThetaSeries([(t.coeff.bind(bindings), t.gamma, t.m) for t in self.terms],
                           self.trunc)


def deg(s: ThetaSeries) -> float:
    """Smallest exponent present; +inf for the empty series."""
    return s.terms[0].gamma if s.terms else INF


def truncate(s: ThetaSeries, t: float) -> ThetaSeries:
    if t >= s.trunc:
        return s
    return ThetaSeries._raw([x for x in s.terms if x.gamma < t - GAMMA_MERGE], t)


def clean(s: ThetaSeries, rel: float, scale: float | None = None) -> ThetaSeries:
    """Drop coefficients below ``rel`` times the given (or own) magnitude."""
    ref = s.magnitude if scale is None else scale
    thr = rel * ref
    terms = []
    for t in s.terms:
        c = ParamPoly({mm: v for mm, v in t.coeff.d.items() if abs(v) >= thr})
        if c:
            terms.append(ThetaTerm(c, t.gamma, t.m))
    return ThetaSeries._raw(terms, s.trunc)


def add(a: ThetaSeries, b: ThetaSeries) -> ThetaSeries:
    acc = _Acc()
    for t in a.terms:
        acc.add(t.coeff, t.gamma, t.m)
    for t in b.terms:
        acc.add(t.coeff, t.gamma, t.m)
    return acc.series(min(a.trunc, b.trunc))


def add_many(items: Iterable[ThetaSeries]) -> ThetaSeries:
    acc = _Acc()
    trunc = INF
    for s in items:
        trunc = min(trunc, s.trunc)
        for t in s.terms:
            acc.add(t.coeff, t.gamma, t.m)
    return acc.series(trunc)


def neg(a: ThetaSeries) -> ThetaSeries:
    return ThetaSeries._raw([ThetaTerm(-t.coeff, t.gamma, t.m) for t in a.terms], a.trunc)


def sub(a: ThetaSeries, b: ThetaSeries) -> ThetaSeries:
    return add(a, neg(b))


def scale(a: ThetaSeries, c) -> ThetaSeries:
    """Multiply by a real number or a ParamPoly."""
    if isinstance(c, (int, float)) and c == 0:
        return ThetaSeries.zero(INF if a.trunc == INF else a.trunc)
    terms = [ThetaTerm(t.coeff * c, t.gamma, t.m) for t in a.terms]
    return ThetaSeries._raw([t for t in terms if t.coeff], a.trunc)


def shift(a: ThetaSeries, g: float) -> ThetaSeries:
    """Multiply by theta^g (exact)."""
    return ThetaSeries._raw([ThetaTerm(t.coeff, _snap(t.gamma + g), t.m) for t in a.terms],
                            a.trunc + g)


def _mul_trunc(a: ThetaSeries, b: ThetaSeries) -> float:
    return min(a.trunc + deg(b), b.trunc + deg(a), a.trunc + b.trunc)


def mul(a: ThetaSeries, b: ThetaSeries, cap: float = INF) -> ThetaSeries:
    trunc = min(_mul_trunc(a, b), cap)
    acc = _Acc()
    bt = b.terms
    for ta in a.terms:
        lim = trunc - ta.gamma + GAMMA_MERGE
        for tb in bt:
            if tb.gamma > lim:
                break
            c = ta.coeff * tb.coeff
            if c:
                acc.add(c, ta.gamma + tb.gamma, ta.m + tb.m)
    return acc.series(trunc)


def pow_int(s: ThetaSeries, n: int, cap: float = INF) -> ThetaSeries:
    if n < 0:
        return inverse(pow_int(s, -n, cap), cap)
    result = ThetaSeries.const(1.0)
    base = s
    while n:
        if n & 1:
            result = mul(result, base, cap)
        n >>= 1
        if n:
            base = mul(base, base, cap)
    return result


def _split_leading(s: ThetaSeries, cap: float, out_shift) -> tuple[float, float, ThetaSeries, float]:
    """Factor s = c0 theta^g0 (1 + x); return (c0, g0, x, relative trunc)."""
    if not s.terms:
        raise LeadingTermNotInvertible("cannot invert or take powers of the zero series")
    lead = s.terms[0]
    same = [t for t in s.terms if abs(t.gamma - lead.gamma) < GAMMA_MERGE]
    if any(t.m > 0 for t in same):
        raise LeadingTermNotInvertible("leading term carries a log factor")
    if not lead.coeff.is_constant or lead.coeff.constant == 0.0:
        raise LeadingTermNotInvertible(
            f"leading coefficient {lead.coeff.to_text()} is not a nonzero real number")
    c0, g0 = lead.coeff.constant, lead.gamma
    x = ThetaSeries._raw([ThetaTerm(t.coeff.scale(1.0 / c0), t.gamma - g0, t.m)
                          for t in s.terms[1:]], s.trunc - g0)
    rel = s.trunc - g0
    if cap != INF:
        rel = min(rel, cap - out_shift(g0))
    if rel == INF and x.terms:
        raise UnboundedTruncation("an infinite expansion of an exact series needs a cap")
    return c0, g0, x, rel


def _binomial_series(x: ThetaSeries, coeffs, rel: float) -> ThetaSeries:
    """sum_k coeffs(k) x^k truncated at relative exponent ``rel``."""
    if not x.terms:
        return ThetaSeries.const(1.0, rel)
    dx = deg(x)
    total = ThetaSeries.const(1.0)
    power = ThetaSeries.const(1.0)
    k = 1
    x = truncate(x, rel)
    while k * dx <= rel + GAMMA_MERGE:
        power = mul(power, x, rel)
        ck = coeffs(k)
        if ck == 0.0:
            break
        total = add(total, scale(power, ck))
        k += 1
    return truncate(ThetaSeries._raw(list(total.terms), min(total.trunc, rel)), rel)


def inverse(s: ThetaSeries, cap: float = INF) -> ThetaSeries:
    c0, g0, x, rel = _split_leading(s, cap, lambda g: -g)
    body = _binomial_series(x, lambda k: (-1.0) ** k, rel)
    return shift(scale(body, 1.0 / c0), -g0)


def pow_real(s: ThetaSeries, r: float, cap: float = INF) -> ThetaSeries:
    if float(r).is_integer():
        return pow_int(s, int(r), cap)
    c0, g0, x, rel = _split_leading(s, cap, lambda g: r * g)
    if c0 <= 0.0:
        raise NonPositiveLeadingCoefficient(
            f"real power {r} of a series with leading coefficient {c0}")
    binom = [1.0]

    def coeff(k: int) -> float:
        while len(binom) <= k:
            j = len(binom)
            binom.append(binom[-1] * (r - j + 1) / j)
        return binom[k]

    body = _binomial_series(x, coeff, rel)
    return shift(scale(body, c0 ** r), r * g0)


def substitute(e: Expr, args: Sequence[ThetaSeries], params: Mapping[str, float],
               cap: float = INF, symbolic: bool = False) -> ThetaSeries:
    """Evaluate an expression tree on series arguments.

    Named parameters become numbers from ``params``; with ``symbolic=True``
    unbound names stay as ParamPoly symbols.  ``cap`` bounds every
    intermediate series, and the returned ``trunc`` says how much is exact.
    """

    def rec(node: Expr) -> ThetaSeries:
        if isinstance(node, Const):
            return ThetaSeries.const(node.value) if node.value else ThetaSeries.zero()
        if isinstance(node, Var):
            return truncate(args[node.index], cap)
        if isinstance(node, Param):
            if node.name in params:
                return ThetaSeries.const(params[node.name])
            if symbolic:
                return ThetaSeries.const(ParamPoly.symbol(node.name))
            raise UnboundParameter(f"parameter {node.name!r} is not bound")
        if isinstance(node, Sum):
            return truncate(add_many(rec(t) for t in node.terms), cap)
        if isinstance(node, Neg):
            return neg(rec(node.arg))
        if isinstance(node, Mul):
            return mul(rec(node.left), rec(node.right), cap)
        if isinstance(node, Div):
            return mul(rec(node.left), inverse(rec(node.right), cap), cap)
        if isinstance(node, Pow):
            return truncate(pow_real(rec(node.base), node.exponent, cap), cap)
        raise TypeError(f"unknown node {node!r}")

    return rec(e)


# ---------------------------------------------------------------------------
# calculus in t (d theta/dt = -1)
# ---------------------------------------------------------------------------

def primitive(term: ThetaTerm | tuple) -> ThetaSeries:
    """Constant-free t-primitive of c theta^gamma (ln theta)^M."""
    c, g, M = term
    if not isinstance(c, ParamPoly):
        c = ParamPoly.const(c)
    if abs(g + 1.0) < GAMMA_MERGE:
        return ThetaSeries([(c.scale(-1.0 / (M + 1)), 0.0, M + 1)])
    terms = []
    a = c.scale(-1.0 / (g + 1.0))
    for l in range(M + 1):
        if l:
            a = a.scale(-(M - l + 1) / (g + 1.0))
        terms.append((a, g + 1.0, M - l))
    return ThetaSeries(terms)


def differentiate(s: ThetaSeries) -> ThetaSeries:
    """d/dt of the series; trunc drops by one."""
    acc = _Acc()
    for t in s.terms:
        if t.gamma != 0.0:
            acc.add(t.coeff.scale(-t.gamma), t.gamma - 1.0, t.m)
        if t.m:
            acc.add(t.coeff.scale(-float(t.m)), t.gamma - 1.0, t.m - 1)
    return acc.series(s.trunc - 1.0)


def eval_numeric(s: ThetaSeries, theta: float, bindings: Mapping[str, float] | None = None) -> float:
    if theta <= 0:
        raise ValueError("theta must be positive")
    bindings = bindings or {}
    lt = math.log(theta)
    total = 0.0
    for t in s.terms:
        total += t.coeff.evaluate(bindings) * theta ** t.gamma * lt ** t.m
    return total
