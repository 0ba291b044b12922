"""Order-by-order construction of blow-up expansions.

Writing ``y = theta^(-alpha/k) Y`` and ``Y = Y0 + Y1 + Y2 + ...``, each
correction solves a linear system ``Y_j' = theta^-1 A Y_j + g_j`` whose
forcing ``g_j`` depends only on earlier orders.  The forcing is computed by
telescoping differences of the field evaluated on partial sums, and every
linear step is solved term by term in the Jordan basis of ``A``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    ComplexSpectrumUnsupported,
    NonHyperbolic,
    NotMonomialSum,
    OrderTooDeepForTruncation,
    ResonanceToleranceAmbiguous,
)
from .spectral import BalanceRoot, SpectralData, analyze_root
from .theta_series import (
    INF,
    ParamPoly,
    ThetaSeries,
    ThetaTerm,
    add,
    add_many,
    clean,
    deg,
    scale,
    shift,
    sub,
    substitute,
    truncate,
)
from .vf_core import VectorField, _flatten_terms, eval_expr, is_zero, monomial_exponents

log = logging.getLogger(__name__)

RESONANCE_TOL = 1e-10
RESONANCE_AMBIGUOUS = 1e-12
REL_CLEAN = 1e-12
SAFETY = 1.0
_CAP_RETRIES = 4


@dataclass
class BlowupExpansion:
    field: VectorField
    root: BalanceRoot
    spectral: SpectralData
    order: int
    Y_terms: list               # Y_terms[j][i]: order-j correction, component i
    sum: list                   # per-component S_N in Y coordinates
    prefactors: tuple           # -alpha_i / k
    free_params: tuple
    final_below: float
    working_trunc: float
    lattice: list
    exact: bool = False
    derived: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.sum)

    def y_series(self, i: int) -> ThetaSeries:
        """Component i in the original coordinates, theta^(-alpha_i/k) S_i."""
        return shift(self.sum[i], self.prefactors[i])

    def final_terms(self, i: int) -> list[ThetaTerm]:
        return [t for t in self.sum[i].terms if t.gamma < self.final_below - 1e-9]

    def final_series(self, i: int) -> ThetaSeries:
        s = self.sum[i]
        cut = min(self.final_below, s.trunc)
        return ThetaSeries._raw([t for t in s.terms if t.gamma < cut - 1e-9], cut)

    def is_final(self, term: ThetaTerm) -> bool:
        return term.gamma < self.final_below - 1e-9

    def bindings(self, given: Mapping[str, float] | None = None) -> dict:
        """Complete C_i bindings, defaulting to zero."""
        out = {c: 0.0 for c in self.free_params}
        for c, v in (given or {}).items():
            if c not in out:
                raise KeyError(f"{c} is not a free parameter of this expansion "
                               f"(free: {list(self.free_params) or 'none'})")
            out[c] = float(v)
        return out

    def derived_series(self, expr, cap: float | None = None) -> ThetaSeries:
        """Substitute the expansion into an expression of the original variables."""
        args = [self.final_series(i) for i in range(self.n)]
        args = [shift(a, p) for a, p in zip(args, self.prefactors)]
        cap = self.final_below + 2.0 if cap is None else cap
        return substitute(expr, args, self.field.params, cap=cap)


# ---------------------------------------------------------------------------
# scalar and block solves
# ---------------------------------------------------------------------------

def solve_scalar(lam: float, h: ThetaSeries) -> ThetaSeries:
    """Particular solution of v' = lam theta^-1 v + h, term by term."""
    out: list[tuple] = []
    for t in h.terms:
        d = t.gamma + 1.0 + lam
        if abs(d) <= RESONANCE_AMBIGUOUS:
            out.append((t.coeff.scale(-1.0 / (t.m + 1)), -lam, t.m + 1))
            continue
        if abs(d) < RESONANCE_TOL:
            res = ThetaSeries([(t.coeff.scale(-1.0 / (t.m + 1)), -lam, t.m + 1)])
            b = t.coeff.scale(-1.0 / d)
            non = ThetaSeries([(b, t.gamma + 1.0, t.m)])
            raise ResonanceToleranceAmbiguous(
                f"gamma + 1 + lambda = {d:.3g} is neither clearly zero nor clearly nonzero",
                candidates=(res, non))
        b = t.coeff.scale(-1.0 / d)
        out.append((b, t.gamma + 1.0, t.m))
        for l in range(1, t.m + 1):
            b = b.scale(-(t.m - l + 1) / d)
            out.append((b, t.gamma + 1.0, t.m - l))
    return ThetaSeries(out, h.trunc + 1.0)


def _homogeneous(lam: float, size: int, names: Sequence[str], p: int) -> ThetaSeries:
    """Position p of theta^(-J) C for one Jordan block: theta^-lam sum_q (-ln)^q/q! C_{p+q}."""
    terms = []
    for q in range(size - p):
        c = ParamPoly.symbol(names[p + q], (-1.0) ** q / math.factorial(q))
        terms.append((c, -lam, q))
    return ThetaSeries(terms)


def solve_linear_step(spectral: SpectralData, g: Sequence[ThetaSeries], j: int,
                      names: Sequence[str] = ()) -> list[ThetaSeries]:
    """Y_j from the forcing g_j; at j = 1 stable blocks receive free constants."""
    if spectral.has_complex:
        raise ComplexSpectrumUnsupported("complex eigenvalues of A are not supported")
    if not spectral.hyperbolic:
        raise NonHyperbolic("A has an eigenvalue on the imaginary axis")
    n = len(g)
    Pinv = spectral.Pinv
    h = [_combine(Pinv[r], g) for r in range(n)]
    v: list[ThetaSeries | None] = [None] * n
    names = list(names)
    cursor = 0
    for block in spectral.blocks:
        lam = block.re
        cols = block.columns
        stable = lam < -spectral.tau_hyp
        block_names = names[cursor:cursor + block.size] if (stable and j == 1) else []
        if stable and j == 1:
            cursor += block.size
        for p in range(block.size - 1, -1, -1):
            forcing = h[cols[p]]
            if p < block.size - 1:
                forcing = add(forcing, shift(v[cols[p + 1]], -1.0))
            vp = solve_scalar(lam, forcing)
            if block_names:
                vp = add(vp, _homogeneous(lam, block.size, block_names, p))
            v[cols[p]] = vp
    return [_combine(spectral.P[i], v) for i in range(n)]


def _combine(weights: np.ndarray, series: Sequence[ThetaSeries]) -> ThetaSeries:
    parts = [scale(s, float(w)) for w, s in zip(weights, series) if w != 0.0]
    if not parts:
        return ThetaSeries.zero(min(s.trunc for s in series))
    out = add_many(parts)
    out = ThetaSeries._raw(list(out.terms), min(s.trunc for s in series))
    return clean(out, REL_CLEAN, max(s.magnitude for s in series) or 1.0)


# ---------------------------------------------------------------------------
# forcing terms
# ---------------------------------------------------------------------------

class _Forcing:
    """Evaluates the quasi and residual parts on partial sums, with caps."""

    def __init__(self, vf: VectorField, W: float):
        self.vf = vf
        self.W = W
        self.scaled = vf.qh.scaled

    def quasi(self, S: Sequence[ThetaSeries], extra: float = 0.0) -> list[ThetaSeries]:
        args = [truncate(s, self.W + extra) for s in S]
        return [substitute(e, args, self.vf.params, cap=self.W + extra) for e in self.vf.quasi]

    def residual(self, S: Sequence[ThetaSeries], extra: float = 0.0) -> list[ThetaSeries]:
        """theta^(alpha_i/k) f_res,i(theta^(-alpha/k) S)."""
        args = [shift(truncate(s, self.W + extra), -a) for s, a in zip(S, self.scaled)]
        out = []
        for i, e in enumerate(self.vf.residual):
            if is_zero(e):
                out.append(ThetaSeries.zero())
                continue
            cap = self.W - 1.0 - self.scaled[i] + extra
            out.append(shift(substitute(e, args, self.vf.params, cap=cap), self.scaled[i]))
        return out


def compute_g1(vf: VectorField, root: BalanceRoot, W: float = 6.0) -> list[ThetaSeries]:
    S0 = [ThetaSeries.const(y) if y else ThetaSeries.zero() for y in root.Y0]
    return _Forcing(vf, W).residual(S0)


def _telescope(new: Sequence[ThetaSeries], old: Sequence[ThetaSeries]) -> list[ThetaSeries]:
    out = []
    for a, b in zip(new, old):
        ref = max(a.magnitude, b.magnitude, 1e-300)
        out.append(clean(sub(a, b), REL_CLEAN, ref))
    return out


# ---------------------------------------------------------------------------
# the inductive loop
# ---------------------------------------------------------------------------

def working_truncation(vf: VectorField, delta: float, N: int) -> float:
    d = delta if math.isfinite(delta) else 1.0
    return (N + 1) * d + float(np.max(vf.qh.scaled)) + SAFETY


def run_expansion(vf: VectorField, root: BalanceRoot, N: int = 3,
                  spectral: SpectralData | None = None) -> BlowupExpansion:
    """Compute Y_0..Y_N for one balance root."""
    if N < 1:
        raise ValueError("expansion order must be at least 1")
    spec = spectral if spectral is not None else analyze_root(vf, root)
    if spec.has_complex:
        raise ComplexSpectrumUnsupported("complex eigenvalues of A are not supported")
    if not spec.hyperbolic:
        raise NonHyperbolic("A has an eigenvalue on the imaginary axis")
    n = vf.n
    delta = spec.delta
    W = working_truncation(vf, delta, N)
    final_below = (N + 1) * delta
    names = tuple(f"C{i + 1}" for i in range(spec.m_A))
    forcing = _Forcing(vf, W)
    Df = spec.A + np.diag(vf.qh.scaled)

    Y0 = [ThetaSeries.const(y) if y else ThetaSeries.zero() for y in root.Y0]
    Y_terms = [Y0]
    S = list(Y0)
    F_prev = forcing.quasi(S)
    R_prev = forcing.residual(S)
    exact = False
    for j in range(1, N + 1):
        extra = 0.0
        for _attempt in range(_CAP_RETRIES):
            if j == 1:
                g, F_new, R_new = R_prev, F_prev, R_prev
            else:
                F_new = forcing.quasi(S, extra)
                R_new = forcing.residual(S, extra)
                lin = [_combine(Df[i], Y_terms[-1]) for i in range(n)]
                quasi = [shift(sub(d, l), -1.0) for d, l in
                         zip(_telescope(F_new, F_prev), lin)]
                quasi = [clean(q, REL_CLEAN, max(f.magnitude for f in F_new) or 1.0) for q in quasi]
                g = [add(q, r) for q, r in zip(quasi, _telescope(R_new, R_prev))]
            reach = min(s.trunc for s in g) + 1.0
            if reach >= W - 1e-9 or j == 1:
                break
            extra += W - reach + 0.5
        Yj = solve_linear_step(spec, g, j, names)
        vanished = all(not y.terms for y in Yj) and all(x.trunc == INF for x in g)
        if not vanished:
            Yj = [truncate(y, W) for y in Yj]
        reach = min(y.trunc for y in Yj)
        if reach < final_below - 1e-9:
            raise OrderTooDeepForTruncation(
                f"order {j} is exact only below theta^{reach:.4g}, "
                f"short of the finality threshold {final_below:.4g}")
        Y_terms.append(Yj)
        F_prev, R_prev = F_new, R_new
        S = [truncate(add(s, y), W) for s, y in zip(S, Yj)]
        if vanished:
            exact = True
            for _ in range(j + 1, N + 1):
                Y_terms.append([ThetaSeries.zero() for _ in range(n)])
            break
    exp = BlowupExpansion(
        field=vf, root=root, spectral=spec, order=N, Y_terms=Y_terms, sum=S,
        prefactors=tuple(float(-a) for a in vf.qh.scaled), free_params=names,
        final_below=final_below if not exact else INF, working_trunc=W,
        lattice=[], exact=exact)
    exp.lattice = predict_exponent_lattice(spec, vf, max(W, 1.0), root)
    return exp


# ---------------------------------------------------------------------------
# exponent lattice
# ---------------------------------------------------------------------------

def residual_generators(vf: VectorField, root: BalanceRoot | None = None) -> list[float]:
    """Exponents contributed by the residual: 1 + alpha_i/k - <alpha, beta>/k per monomial."""
    scaled = vf.qh.scaled
    gens: list[float] = []
    ones = [1.0] * vf.n
    try:
        for i, e in enumerate(vf.residual):
            if is_zero(e):
                continue
            for term in _flatten_terms(e):
                beta = monomial_exponents(term, vf.n)
                if eval_expr(term, ones, vf.params) == 0.0:
                    continue
                gens.append(1.0 + scaled[i] - float(scaled @ beta))
    except NotMonomialSum:
        if root is None:
            return []
        g1 = compute_g1(vf, root)
        gens = [t.gamma + 1.0 for s in g1 for t in s.terms]
    return sorted({round(g, 12) for g in gens if g > 1e-12})


def predict_exponent_lattice(spectral: SpectralData, vf: VectorField, bound: float,
                             root: BalanceRoot | None = None) -> list[float]:
    """Nonnegative integer combinations of the generators, up to ``bound``."""
    gens = [-b.re for b in spectral.stable_blocks] + residual_generators(vf, root)
    gens = sorted({round(g, 12) for g in gens if g > 1e-12})
    values = {0.0}
    frontier = [0.0]
    while frontier:
        nxt = []
        for v in frontier:
            for g in gens:
                w = v + g
                if w <= bound + 1e-9 and not any(abs(w - u) < 1e-9 for u in values):
                    values.add(w)
                    nxt.append(w)
        frontier = nxt
    return sorted(values)


def in_lattice(x: float, lattice: Sequence[float], tol: float = 1e-9) -> bool:
    return any(abs(x - v) <= tol for v in lattice)


def expand_all(vf: VectorField, roots: Sequence[BalanceRoot], N: int) -> list:
    return [run_expansion(vf, r, N) for r in roots]
