"""Balance-law roots, the power-determining matrix, and its Jordan structure.

For a blow-up profile ``y = theta^(-alpha/k) Y`` the leading coefficient
``Y0`` solves ``(1/k) Lambda Y0 = f_q(Y0)``.  The linearisation
``A = -(1/k) Lambda + Df_q(Y0)`` controls every later order: its stable
eigenvalues supply free constants and its Jordan structure decides where
log terms can appear.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import (
    BlowupError,
    DomainError,
    IllConditionedJordan,
    JacobianSingularAtIterate,
    LeadingTermNotInvertible,
    NoRootFound,
    NonPositiveLeadingCoefficient,
    ResidualNotSeriesRepresentable,
    UnboundedTruncation,
)
from .theta_series import INF, ParamPoly, ThetaSeries, deg, substitute
from .vf_core import VectorField, evaluate_quasi, is_zero, jacobian_quasi

log = logging.getLogger(__name__)

TOL_NEWTON = 1e-12
NEWTON_MAX_ITER = 100
GRID_L = 10.0
GRID_POINTS = 5
ROOT_DEDUP = 1e-8
TAU_HYP = 1e-8
TAU_CLUSTER_REL = 1e-6


@dataclass(frozen=True)
class BalanceRoot:
    Y0: tuple
    residual_norm: float
    seed: tuple

    @property
    def vector(self) -> np.ndarray:
        return np.array(self.Y0, dtype=float)


@dataclass(frozen=True)
class JordanBlock:
    eigenvalue: complex
    size: int
    columns: tuple
    is_complex: bool = False

    @property
    def re(self) -> float:
        return float(np.real(self.eigenvalue))

    @property
    def im(self) -> float:
        return float(np.imag(self.eigenvalue))


@dataclass(frozen=True)
class EigenInfo:
    re: float
    im: float
    alg_mult: int
    block_sizes: tuple


@dataclass(frozen=True)
class SpectralData:
    A: np.ndarray
    eigenvalues: tuple
    blocks: tuple
    P: np.ndarray
    J: np.ndarray
    m_A: int
    hyperbolic: bool
    has_complex: bool
    tau_hyp: float
    tau_cluster: float
    delta: float = math.nan
    gamma_res: tuple = ()
    delta_parts: dict = field(default_factory=dict)

    @property
    def stable_blocks(self) -> list:
        return [b for b in self.blocks if b.re < -self.tau_hyp]

    @property
    def Pinv(self) -> np.ndarray:
        return np.linalg.inv(self.P)

    def reconstruction_error(self) -> float:
        scale = max(np.linalg.norm(self.A), 1e-300)
        return float(np.linalg.norm(self.A - self.P @ self.J @ np.linalg.inv(self.P)) / scale)

    def stable_real_eigenvalues(self) -> list[float]:
        return [b.re for b in self.stable_blocks]


# ---------------------------------------------------------------------------
# balance law
# ---------------------------------------------------------------------------

def balance_residual(vf: VectorField, Y: np.ndarray) -> np.ndarray:
    return evaluate_quasi(vf, Y) - np.asarray(vf.qh.alpha) / vf.qh.k * Y


def power_matrix(vf: VectorField, Y0) -> np.ndarray:
    """A = -(1/k) Lambda + Df_q(Y0)."""
    return jacobian_quasi(vf, Y0) - np.diag(np.asarray(vf.qh.alpha, dtype=float) / vf.qh.k)


def _newton(vf: VectorField, seed: np.ndarray, tol: float, max_iter: int,
            deflate: Sequence[np.ndarray] = ()) -> np.ndarray | None:
    """Newton on G(Y), optionally deflated by the roots in ``deflate``.

    Deflation multiplies G by prod_r (1/|Y - r|^2 + 1), which keeps the
    iteration from settling on a root it has already seen.
    """
    Y = np.array(seed, dtype=float)
    for _ in range(max_iter):
        G = balance_residual(vf, Y)
        if not np.all(np.isfinite(G)):
            return None
        if np.linalg.norm(G) <= tol:
            return _polish(vf, Y)
        J = power_matrix(vf, Y)
        if deflate:
            mult, grad = 1.0, np.zeros_like(Y)
            for r in deflate:
                e = Y - r
                d2 = float(e @ e)
                if d2 < 1e-24:
                    return None
                m = 1.0 / d2 + 1.0
                mult *= m
                grad += (-2.0 * e / d2 ** 2) / m
            J = mult * J + np.outer(mult * G, grad)
            G = mult * G
        if not np.all(np.isfinite(J)) or np.linalg.cond(J) > 1e14:
            raise JacobianSingularAtIterate(f"singular Jacobian at {Y.tolist()}")
        Y = Y - np.linalg.solve(J, G)
        if np.linalg.norm(Y) > 1e8:
            return None
    return None


def _polish(vf: VectorField, Y: np.ndarray, steps: int = 3) -> np.ndarray:
    best, best_res = Y, np.linalg.norm(balance_residual(vf, Y))
    for _ in range(steps):
        try:
            Y = Y - np.linalg.solve(power_matrix(vf, Y), balance_residual(vf, Y))
            res = np.linalg.norm(balance_residual(vf, Y))
        except (np.linalg.LinAlgError, DomainError):
            break
        if not res < best_res:
            break
        best, best_res = Y, res
    return best


def default_seeds(n: int, L: float = GRID_L, points: int = GRID_POINTS) -> list:
    axis = np.linspace(-L, L, points)
    return [np.array(p) for p in itertools.product(axis, repeat=n)]


def solve_balance(vf: VectorField, seeds=None, tol_newton: float = TOL_NEWTON,
                  max_iter: int = NEWTON_MAX_ITER, grid_L: float = GRID_L,
                  grid_points: int = GRID_POINTS) -> list[BalanceRoot]:
    """Nonzero roots of the balance law found by Newton from seeds or a grid."""
    seeds = [np.asarray(s, dtype=float) for s in seeds] if seeds else \
        default_seeds(vf.n, grid_L, int(grid_points))
    roots: list[BalanceRoot] = []
    failures = []

    def known(Y: np.ndarray) -> bool:
        return np.linalg.norm(Y, np.inf) < ROOT_DEDUP or any(
            np.linalg.norm(Y - r.vector, np.inf) < ROOT_DEDUP for r in roots)

    for seed in seeds:
        Y = None
        for deflated in (False, True):
            deflate = [np.zeros(vf.n)] + [r.vector for r in roots] if deflated else ()
            try:
                Y = _newton(vf, seed, tol_newton, max_iter, deflate)
            except (JacobianSingularAtIterate, DomainError, np.linalg.LinAlgError) as exc:
                failures.append((tuple(seed), str(exc)))
                log.debug("seed %s failed: %s", seed.tolist(), exc)
                Y = None
            if Y is not None and not known(Y):
                break
            Y = None
        if Y is None:
            continue
        res = float(np.linalg.norm(balance_residual(vf, Y)))
        if res > tol_newton:
            continue
        roots.append(BalanceRoot(tuple(float(v) for v in Y), res, tuple(float(s) for s in seed)))
    if not roots:
        raise NoRootFound(f"no nonzero balance root from {len(seeds)} seeds")
    roots.sort(key=lambda r: r.Y0)
    return roots


# ---------------------------------------------------------------------------
# Jordan structure
# ---------------------------------------------------------------------------

def _svd_rank(M: np.ndarray, tol: float) -> int:
    s = np.linalg.svd(M, compute_uv=False)
    band = (s > tol * 1e-2) & (s <= tol)
    if np.any(band):
        raise IllConditionedJordan(
            f"singular values {s[band].tolist()} fall in the ambiguity band below {tol:.3g}")
    return int(np.sum(s > tol))


def _null_space(M: np.ndarray, tol: float) -> np.ndarray:
    _, s, vh = np.linalg.svd(M)
    rank = int(np.sum(s > tol))
    return vh[rank:].conj().T


def _rank(M: np.ndarray, tol: float = 1e-9) -> int:
    if M.size == 0:
        return 0
    s = np.linalg.svd(M, compute_uv=False)
    return int(np.sum(s > tol * max(1.0, s[0])))


def _normalise(vec: np.ndarray) -> complex:
    """Scale making the first significant entry of ``vec`` equal to one."""
    big = np.max(np.abs(vec))
    for v in vec:
        if abs(v) > 1e-8 * big:
            return 1.0 / v
    return 1.0


def _chains(A: np.ndarray, lam: complex, mult: int, tol: float) -> list[list[np.ndarray]]:
    """Jordan chains [p_1 (eigenvector), ..., p_s] for one eigenvalue cluster."""
    n = A.shape[0]
    dtype = complex if abs(np.imag(lam)) > 0 else float
    B = A.astype(dtype) - lam * np.eye(n, dtype=dtype)
    normB = max(np.linalg.norm(B, 2), 1.0)
    ranks = [n]
    powers = [np.eye(n, dtype=dtype)]
    for p in range(1, mult + 1):
        powers.append(powers[-1] @ B)
        ranks.append(_svd_rank(powers[-1], tol * normB ** (p - 1)))
        if ranks[-1] == ranks[-2]:
            break
    at_least = [ranks[p - 1] - ranks[p] for p in range(1, len(ranks))]
    if sum(at_least) != mult:
        raise IllConditionedJordan(
            f"rank sequence {ranks} does not account for multiplicity {mult} at {lam}")
    exact = {s: at_least[s - 1] - (at_least[s] if s < len(at_least) else 0)
             for s in range(1, len(at_least) + 1)}
    kernels = {s: _null_space(powers[s], tol * normB ** (s - 1)) for s in exact}
    kernels[0] = np.zeros((n, 0), dtype=dtype)
    heads: list[tuple[np.ndarray, int]] = []
    for s in sorted(exact, reverse=True):
        existing = [np.linalg.matrix_power(B, t - s) @ h for h, t in heads if t > s]
        M = np.column_stack([kernels[s - 1], *existing]) if existing else kernels[s - 1]
        need = exact[s]
        for cand in kernels[s].T:
            if need == 0:
                break
            trial = np.column_stack([M, cand])
            if _rank(trial) > _rank(M):
                heads.append((cand, s))
                M = trial
                need -= 1
        if need:
            raise IllConditionedJordan(f"could not complete Jordan chains of size {s} at {lam}")
    chains = []
    for h, s in heads:
        chain = [np.linalg.matrix_power(B, s - 1 - q) @ h for q in range(s)]
        c = _normalise(chain[0])
        chains.append([v * c for v in chain])
    return chains


def _cluster(eigs: np.ndarray, tol: float) -> list[list[complex]]:
    groups: list[list[complex]] = []
    for ev in sorted(eigs, key=lambda z: (z.real, z.imag)):
        for g in groups:
            if abs(np.mean(g) - ev) < tol:
                g.append(ev)
                break
        else:
            groups.append([ev])
    return groups


def spectral_decompose(A, tau_hyp: float = TAU_HYP, tau_cluster: float | None = None) -> SpectralData:
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    if n > 8:
        raise ValueError("dense Jordan analysis is limited to n <= 8")
    normA = max(np.linalg.norm(A, 2), 1e-300)
    if tau_cluster is None:
        tau_cluster = TAU_CLUSTER_REL * normA
    eigs = np.linalg.eigvals(A)
    groups = _cluster(eigs, tau_cluster)

    columns: list[np.ndarray] = []
    blocks: list[JordanBlock] = []
    infos: list[EigenInfo] = []
    J = np.zeros((n, n))
    for g in groups:
        lam = complex(np.mean(g))
        mult = len(g)
        if abs(lam.imag) <= tau_cluster:
            lam_r = float(lam.real)
            chains = _chains(A, lam_r, mult, tau_cluster)
            infos.append(EigenInfo(lam_r, 0.0, mult, tuple(sorted((len(c) for c in chains), reverse=True))))
            for chain in chains:
                start = len(columns)
                columns.extend(np.real(v) for v in chain)
                s = len(chain)
                for q in range(s):
                    J[start + q, start + q] = lam_r
                    if q:
                        J[start + q - 1, start + q] = 1.0
                blocks.append(JordanBlock(lam_r, s, tuple(range(start, start + s))))
            continue
        infos.append(EigenInfo(float(lam.real), float(lam.imag), mult, ()))
        if lam.imag < 0:
            continue
        chains = _chains(A, lam, mult, tau_cluster)
        infos[-1] = replace(infos[-1], block_sizes=tuple(sorted((len(c) for c in chains), reverse=True)))
        re, im = lam.real, lam.imag
        for chain in chains:
            start = len(columns)
            for v in chain:
                columns.extend([np.real(v), np.imag(v)])
            s = len(chain)
            for q in range(s):
                a, b = start + 2 * q, start + 2 * q + 1
                J[a, a] = J[b, b] = re
                J[a, b] = im
                J[b, a] = -im
                if q:
                    J[a - 2, a] = 1.0
                    J[b - 2, b] = 1.0
            blocks.append(JordanBlock(lam, s, tuple(range(start, start + 2 * s)), True))
    # conjugate partners for complex clusters
    for i, info in enumerate(infos):
        if info.im < 0:
            partner = next((x for x in infos if x.im > 0 and abs(x.re - info.re) < tau_cluster
                            and abs(x.im + info.im) < tau_cluster), None)
            if partner is not None:
                infos[i] = replace(info, block_sizes=partner.block_sizes)
    P = np.column_stack(columns) if columns else np.zeros((n, 0))
    if P.shape != (n, n) or abs(np.linalg.det(P)) < 1e-300:
        raise IllConditionedJordan("generalised eigenvectors do not span the space")
    re_parts = np.real(eigs)
    m_A = int(np.sum(re_parts < -tau_hyp))
    hyperbolic = bool(np.min(np.abs(re_parts)) > tau_hyp)
    has_complex = any(b.is_complex for b in blocks)
    return SpectralData(A=A, eigenvalues=tuple(infos), blocks=tuple(blocks), P=P, J=J,
                        m_A=m_A, hyperbolic=hyperbolic, has_complex=has_complex,
                        tau_hyp=tau_hyp, tau_cluster=tau_cluster)


# ---------------------------------------------------------------------------
# residual degrees and the gap delta
# ---------------------------------------------------------------------------

_GAMMA_CAP = 8.0


def _residual_degree(vf: VectorField, i: int) -> float:
    expr = vf.residual[i]
    pref = -vf.qh.scaled
    args = [ThetaSeries([(ParamPoly.symbol(f"_x{l}"), pref[l], 0)]) for l in range(vf.n)]
    try:
        s = substitute(expr, args, vf.params, symbolic=True)
        return deg(s)
    except (LeadingTermNotInvertible, NonPositiveLeadingCoefficient, UnboundedTruncation):
        pass
    # placeholders that are generic positive numbers instead of symbols
    rng = np.random.default_rng(12345 + i)
    found = []
    for _ in range(3):
        xs = rng.uniform(0.5, 2.0, vf.n)
        args = [ThetaSeries([(float(xs[l]), pref[l], 0)]) for l in range(vf.n)]
        try:
            s = substitute(expr, args, vf.params, cap=_GAMMA_CAP)
        except BlowupError as exc:
            raise ResidualNotSeriesRepresentable(
                f"residual component {i + 1} cannot be expanded in theta: {exc}") from None
        found.append(deg(s))
    return min(found)


def residual_degrees(vf: VectorField) -> tuple:
    """gamma_i: leading theta-exponent of f_res,i(theta^(-alpha/k) x) for generic x."""
    return tuple(INF if is_zero(vf.residual[i]) else _residual_degree(vf, i)
                 for i in range(vf.n))


def delta_gap(vf: VectorField, spec: SpectralData) -> SpectralData:
    gammas = residual_degrees(vf)
    scaled = vf.qh.scaled
    res_gap = min((scaled[l] + gammas[l] + 1.0 for l in range(vf.n)), default=INF)
    stable = [-b.re for b in spec.stable_blocks]
    stab_gap = min(stable) if stable else INF
    delta = min(res_gap, stab_gap)
    return replace(spec, delta=float(delta), gamma_res=tuple(float(g) for g in gammas),
                   delta_parts={"residual": float(res_gap), "stable": float(stab_gap)})


def analyze_root(vf: VectorField, root: BalanceRoot, tau_hyp: float = TAU_HYP,
                 tau_cluster: float | None = None) -> SpectralData:
    spec = spectral_decompose(power_matrix(vf, root.vector), tau_hyp, tau_cluster)
    return delta_gap(vf, spec)
