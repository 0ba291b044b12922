"""Symbolic and numerical certification of blow-up expansions.

Two independent checks are offered.  The symbolic one substitutes the
expansion back into the ODE and confirms that every matched order cancels.
The numerical one integrates the original ODE with the in-repo Runge-Kutta
scheme, starting from the expansion very close to blow-up and integrating
away from it, then fits the log-log slope of the discrepancy against the
first omitted exponent.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    BlowupError,
    DegenerateFit,
    UnstableTakeoverImmediate,
)
from .expansion import BlowupExpansion, in_lattice, predict_exponent_lattice, run_expansion
from .rk import RKOptions, RKStats, integrate
from .spectral import BalanceRoot, SpectralData
from .theta_series import (
    INF,
    ThetaSeries,
    differentiate,
    eval_numeric,
    shift,
    sub,
    substitute,
)
from .vf_core import VectorField, evaluate, evaluate_quasi, evaluate_residual

log = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-9
SLOPE_TOL = 0.15
ERROR_FLOOR = 1e-11
THETA_MIN, THETA_MAX = 1e-5, 1e-2
GRID_POINTS = 16
MIN_FIT_POINTS = 2
REFERENCE_EXTRA_ORDERS = 2
REFERENCE_MAX_EXTRA = 6
TIGHTEN = 1e-2
NOISE_MARGIN = 10.0
S_EPS = 1e-6
S_START = 15.0
S_SPAN = 8.0
S_REL_TOL = 0.10


def default_grid(lo: float = THETA_MIN, hi: float = THETA_MAX, points: int = GRID_POINTS) -> np.ndarray:
    return np.logspace(math.log10(lo), math.log10(hi), points)


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------

@dataclass
class ResidualCheck:
    component: str
    degree: float           # first exponent whose coefficient survives the tolerance
    expected: float         # all exponents below this must cancel
    trunc: float            # exponent below which the residual series is exact
    largest_cancelled: float
    tolerance: float
    passed: bool


@dataclass
class SlopeFit:
    component: str
    predicted: float | None     # slope of log|y_num - y_exp| vs log theta
    lattice_next: float | None  # same, from the exponent lattice
    predicted_in_lattice: bool
    measured: float | None
    window: tuple[float, float] | None
    points: int
    max_error: float
    noise_estimate: float
    at_floor: bool
    tolerance: float
    passed: bool


@dataclass
class STimeRecord:
    decay_rate_measured: float
    min_stable_rate: float
    window: tuple[float, float]
    relative_error: float
    passed: bool


@dataclass
class ValidationReport:
    problem: str
    root: tuple
    order: int
    bindings: dict
    residual: list[ResidualCheck]
    slopes: list[SlopeFit]
    s_time: STimeRecord | None = None
    s_time_note: str | None = None
    rows: list[tuple] = field(default_factory=list)
    tolerances: dict = field(default_factory=dict)
    runtime_rk: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.residual) and all(s.passed for s in self.slopes)

    def to_json(self) -> dict:
        return {
            "problem": self.problem,
            "root": list(self.root),
            "order": self.order,
            "bindings": dict(sorted(self.bindings.items())),
            "residual": [_jsonable(asdict(c)) for c in self.residual],
            "slopes": [_jsonable(asdict(s)) for s in self.slopes],
            "s_time": _jsonable(asdict(self.s_time)) if self.s_time else None,
            "s_time_note": self.s_time_note,
            "tolerances": dict(sorted(self.tolerances.items())),
            "integrator": dict(sorted(self.runtime_rk.items())),
            "pass": self.passed,
        }


def _jsonable(d):
    if isinstance(d, dict):
        return {k: _jsonable(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_jsonable(v) for v in d]
    if isinstance(d, float) and not math.isfinite(d):
        return "inf" if d > 0 else "-inf"
    return d


# ---------------------------------------------------------------------------
# symbolic residual
# ---------------------------------------------------------------------------

def _y_series(exp: BlowupExpansion, bindings: Mapping[str, float] | None) -> list[ThetaSeries]:
    out = []
    for i in range(exp.n):
        s = exp.sum[i] if bindings is None else exp.sum[i].bind(bindings)
        out.append(shift(s, exp.prefactors[i]))
    return out


def symbolic_residual(exp: BlowupExpansion,
                      bindings: Mapping[str, float] | None = None) -> list[ThetaSeries]:
    """dy/dt - f(y) as series, with y built from the full partial sum.

    With ``bindings=None`` the free parameters stay symbolic.
    """
    y = _y_series(exp, bindings)
    cap = exp.working_trunc
    return [sub(differentiate(y[i]), substitute(e, y, exp.field.params, cap=cap))
            for i, e in enumerate(exp.field.full)]


def check_residual(exp: BlowupExpansion, bindings: Mapping[str, float] | None = None,
                   tol: float = RESIDUAL_TOL) -> list[ResidualCheck]:
    """Every term of the residual below the finality threshold must cancel."""
    r = symbolic_residual(exp, bindings)
    y = _y_series(exp, bindings)
    out = []
    for i, ri in enumerate(r):
        name = exp.field.names[i]
        expected = exp.final_below + exp.prefactors[i] - 1.0
        if exp.exact:
            # nothing is provisional: the residual must vanish as far as it is known
            expected = ri.trunc
        scale = max(differentiate(y[i]).magnitude, 1e-300)
        thresh = tol * scale
        survivors = [t for t in ri.terms if t.coeff.magnitude > thresh]
        degree = survivors[0].gamma if survivors else ri.trunc
        cancelled = [t.coeff.magnitude for t in ri.terms if t.gamma < expected - 1e-9]
        largest = max(cancelled, default=0.0) / scale
        ok = degree >= expected - 1e-9 and ri.trunc >= min(expected, INF) - 1e-9
        out.append(ResidualCheck(name, float(degree), float(expected), float(ri.trunc),
                                 float(largest), tol, bool(ok)))
    return out


# ---------------------------------------------------------------------------
# numerical comparison
# ---------------------------------------------------------------------------

def _first_omitted(ref: BlowupExpansion, i: int, threshold: float,
                   bindings: Mapping[str, float]) -> float | None:
    """First exponent at or above ``threshold`` carrying a nonzero final coefficient."""
    s = ref.sum[i].bind(bindings)
    scale = max(s.magnitude, 1e-300)
    for t in s.terms:
        if t.gamma < threshold - 1e-9:
            continue
        if t.gamma >= ref.final_below - 1e-9:
            return None
        if t.coeff.magnitude > 1e-12 * scale:
            return t.gamma
    return None


def _reference(exp: BlowupExpansion, bindings: Mapping[str, float]) -> BlowupExpansion | None:
    """Deeper expansion of the same root, used for the start value and the predicted slope.

    Terms of the lattice can vanish for particular parameter values, so the
    depth grows until every component's first omitted term is certified final.
    """
    if exp.exact:
        return exp
    ref = None
    for extra in range(REFERENCE_EXTRA_ORDERS, REFERENCE_MAX_EXTRA + 1):
        try:
            ref = run_expansion(exp.field, exp.root, exp.order + extra, exp.spectral)
        except BlowupError as err:
            log.warning("reference expansion unavailable: %s", err)
            return ref
        if ref.exact or all(_first_omitted(ref, i, exp.final_below, bindings) is not None
                            for i in range(exp.n)):
            break
    return ref


def anchor_index(spectral: SpectralData, grid: Sequence[float]) -> int:
    """Grid index where integration starts.

    Integrating away from blow-up amplifies errors along stable modes by
    (theta/theta_s)^sigma, integrating towards it amplifies the unstable ones by
    (theta_s/theta)^mu.  The anchor balances the two worst exponents in log theta.
    """
    sigma = max((-b.re for b in spectral.stable_blocks), default=0.0)
    mu = max((b.re for b in spectral.blocks if b.re > 0), default=1.0)
    lg = np.log(np.asarray(grid, dtype=float))
    cost = [max((lg[-1] - x) * sigma, (x - lg[0]) * mu) for x in lg]
    return int(np.argmin(cost))


def _integrate_from(vf: VectorField, grid: np.ndarray, idx: int, y_start: np.ndarray,
                    rk: RKOptions, stats: RKStats) -> np.ndarray:
    """Solution of dy/dtheta = -f(y) at every grid point, starting at grid[idx]."""
    rhs = lambda th, y: -evaluate(vf, y)  # noqa: E731
    out = np.empty((len(grid), len(y_start)))
    out[idx] = y_start
    if idx + 1 < len(grid):
        out[idx + 1:] = integrate(rhs, grid[idx], y_start, grid[idx + 1:], rk, stats)
    if idx > 0:
        out[:idx] = integrate(rhs, grid[idx], y_start, grid[idx - 1::-1], rk, stats)[::-1]
    return out


def numeric_compare(exp: BlowupExpansion, bindings: Mapping[str, float] | None = None,
                    theta_grid: Sequence[float] | None = None,
                    rk: RKOptions = RKOptions(), tol: float = SLOPE_TOL,
                    floor: float = ERROR_FLOOR):
    """Integrate the original ODE across the grid and fit error slopes per component.

    Blow-up is placed at t = 0, so theta = -t and the ODE reads dy/dtheta = -f(y).
    The start value at the anchor point (see ``anchor_index``) comes from a deeper
    reference expansion.  Errors are measured on the scaled variables
    Y = theta^(alpha/k) y, where the rounding floor is uniform across components;
    the reported slopes refer to y itself.

    The integration is repeated at a hundredfold tighter tolerance.  The tighter run
    is the numerical reference, and the gap between the two, scaled by the
    tolerance ratio, estimates its remaining error.  Points where that estimate is
    within a factor ``NOISE_MARGIN`` of the measured error are treated like points
    under the rounding floor.

    Returns ``(fits, rows, info)`` where rows feed the CSV output.
    """
    vf = exp.field
    b = exp.bindings(bindings)
    grid = np.sort(np.asarray(theta_grid if theta_grid is not None else default_grid(), dtype=float))
    if grid[0] <= 0:
        raise ValueError("theta grid must be positive")
    finals = [exp.final_series(i).bind(b) for i in range(exp.n)]
    pre = np.asarray(exp.prefactors, dtype=float)
    ref = _reference(exp, b)
    # the start value comes from the deeper expansion so the numerical solution is the
    # same member of the family; a start from order N alone would perturb the free
    # parameters by O(theta_s^((N+1) delta)) and leak a theta^delta mode into the error
    start = [ref.final_series(i).bind(b) for i in range(exp.n)] if ref is not None else finals

    def Y_of(series, theta: float) -> np.ndarray:
        return np.array([eval_numeric(s, theta, b) for s in series])

    idx = anchor_index(exp.spectral, grid)
    y_start = grid[idx] ** pre * Y_of(start, grid[idx])
    stats = RKStats()
    coarse = _integrate_from(vf, grid, idx, y_start, rk, stats)
    fine_opts = RKOptions(rtol=max(rk.rtol * TIGHTEN, 1e-15), atol=rk.atol * TIGHTEN,
                          max_steps=rk.max_steps)
    y_num = _integrate_from(vf, grid, idx, y_start, fine_opts, stats)
    Y_e = np.array([Y_of(finals, th) for th in grid])
    Y_n = y_num * grid[:, None] ** (-pre)
    err_Y = np.abs(Y_n - Y_e)
    noise_Y = np.abs(coarse - y_num) * grid[:, None] ** (-pre) * (fine_opts.rtol / rk.rtol)

    bound = max(exp.working_trunc, ref.final_below if ref is not None and not ref.exact else 0.0)
    lattice = predict_exponent_lattice(exp.spectral, vf, bound + 1.0, exp.root)
    threshold = exp.final_below
    fits, rows = [], []
    for i in range(exp.n):
        name = vf.names[i]
        for th, ye, yn in zip(grid, Y_e[:, i] * grid ** pre[i], y_num[:, i]):
            rows.append((float(th), name, float(ye), float(yn), float(abs(yn - ye))))
        predicted = lattice_next = None
        if not exp.exact and math.isfinite(threshold):
            lat = [g for g in lattice if g >= threshold - 1e-9]
            lattice_next = lat[0] + pre[i] if lat else None
            if ref is not None:
                p = _first_omitted(ref, i, threshold, b)
                predicted = p + pre[i] if p is not None else None
        in_lat = predicted is not None and in_lattice(predicted - pre[i], lattice)
        e = err_Y[:, i]
        noise = float(noise_Y[:, i].max())
        mask = (e > floor) & (e > NOISE_MARGIN * noise_Y[:, i])
        max_err = float(e.max())
        if not mask.any():
            fits.append(SlopeFit(name, predicted, lattice_next, in_lat, None, None, 0,
                                 max_err, noise, True, tol, True))
            continue
        if mask.sum() < MIN_FIT_POINTS or predicted is None:
            why = ("fewer than two points above the rounding floor" if predicted is not None
                   else "no omitted exponent is available to compare against")
            log.warning("component %s: %s", name, why)
            fits.append(SlopeFit(name, predicted, lattice_next, in_lat, None, None,
                                 int(mask.sum()), max_err, noise, False, tol, False))
            continue
        lt = np.log(grid[mask])
        slope = float(np.polyfit(lt, np.log(e[mask]), 1)[0]) + pre[i]
        window = (float(grid[mask].min()), float(grid[mask].max()))
        ok = abs(slope - predicted) <= tol
        fits.append(SlopeFit(name, predicted, lattice_next, in_lat, slope, window,
                             int(mask.sum()), max_err, noise, False, tol, bool(ok)))
    rk_info = {"accepted": stats.accepted, "rejected": stats.rejected,
               "evaluations": stats.evaluations, "rtol": rk.rtol, "atol": rk.atol,
               "rtol_reference": fine_opts.rtol, "anchor_theta": float(grid[idx])}
    return fits, rows, rk_info


def fit_slope(theta: Sequence[float], err: Sequence[float], floor: float = ERROR_FLOOR) -> float:
    """Least-squares slope of log err against log theta over points above the floor."""
    theta, err = np.asarray(theta, float), np.asarray(err, float)
    mask = err > floor
    if mask.sum() < 2:
        raise DegenerateFit("fewer than two points above the error floor")
    return float(np.polyfit(np.log(theta[mask]), np.log(err[mask]), 1)[0])


# ---------------------------------------------------------------------------
# s-time diagnostic
# ---------------------------------------------------------------------------

def s_time_diagnostic(vf: VectorField, root: BalanceRoot, spectral: SpectralData,
                      eps: float = S_EPS, s0: float | None = None, span: float = S_SPAN,
                      rk: RKOptions = RKOptions(rtol=1e-12, atol=1e-18)) -> STimeRecord:
    """Measure the decay rate of a stable perturbation of Y0 in logarithmic time.

    In s = -ln(theta) the scaled variables obey
    dY/ds = -(1/k) Lambda Y + f_q(Y) + e^(-s(1 + Lambda/k)) f_res(e^(s Lambda/k) Y),
    and a small kick along the slowest stable eigenvector should decay at the rate
    |Re lambda| until the unstable modes take over.  By default the start time is
    late enough that the residual forcing, decaying like e^(-g s) with g the
    residual gap, sits six orders below the kick.
    """
    stable = [blk for blk in spectral.stable_blocks if not blk.is_complex]
    if not stable:
        raise ValueError("the s-time diagnostic needs at least one stable eigenvalue")
    slow = max(stable, key=lambda blk: blk.re)
    rate = -slow.re
    vec = np.real(np.asarray(spectral.P))[:, slow.columns[0]].astype(float)
    vec = vec / np.linalg.norm(vec)
    scaled = np.asarray(vf.qh.scaled)
    Y0 = root.vector
    if s0 is None:
        gap = spectral.delta_parts.get("residual", INF)
        s0 = S_START if not math.isfinite(gap) else max(S_START, math.log(1e6 / eps) / gap)

    def rhs(s, Y):
        out = -scaled * Y + evaluate_quasi(vf, Y)
        if not vf.residual_is_zero:
            out = out + np.exp(-s * (1.0 + scaled)) * evaluate_residual(vf, np.exp(s * scaled) * Y)
        return out

    grid = np.linspace(s0, s0 + span, 161)
    traj = integrate(rhs, s0, Y0 + eps * vec, grid, rk)
    dist = np.linalg.norm(traj - Y0, axis=1)
    # stop at the first renewed growth; the saddle's unstable modes have taken over
    stop = len(dist)
    for idx in range(1, len(dist)):
        if dist[idx] >= dist[idx - 1]:
            stop = idx
            break
    if stop < 10:
        raise UnstableTakeoverImmediate(
            f"perturbation stopped decaying after {stop} samples; window too short")
    # discard the tail close to the turning point where both modes mix
    use = slice(0, max(10, int(stop * 0.6)))
    slope = float(np.polyfit(grid[use], np.log(dist[use]), 1)[0])
    measured = -slope
    rel = abs(measured - rate) / rate
    return STimeRecord(measured, rate, (float(grid[use][0]), float(grid[use][-1])), rel,
                       rel <= S_REL_TOL)


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

def validate(exp: BlowupExpansion, bindings: Mapping[str, float] | None = None,
             theta_grid: Sequence[float] | None = None, rk: RKOptions = RKOptions(),
             problem: str = "", with_s_time: bool = True) -> ValidationReport:
    b = exp.bindings(bindings)
    residual = check_residual(exp, b)
    slopes, rows, rk_info = numeric_compare(exp, b, theta_grid, rk)
    report = ValidationReport(
        problem=problem, root=tuple(exp.root.Y0), order=exp.order, bindings=b,
        residual=residual, slopes=slopes, rows=rows, runtime_rk=rk_info,
        tolerances={"residual_rel": RESIDUAL_TOL, "slope_abs": SLOPE_TOL,
                    "error_floor": ERROR_FLOOR, "s_time_rel": S_REL_TOL})
    if with_s_time:
        if exp.spectral.m_A == 0:
            report.s_time_note = "no stable eigenvalue; diagnostic not applicable"
        else:
            try:
                report.s_time = s_time_diagnostic(exp.field, exp.root, exp.spectral)
            except (UnstableTakeoverImmediate, BlowupError) as err:
                report.s_time_note = f"inconclusive: {err}"
    return report
