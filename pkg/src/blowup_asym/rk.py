"""Embedded Dormand-Prince 5(4) integrator with PI step-size control."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import IntegratorStepFailure

C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
E = B5 - B4

ORDER = 5
SAFETY = 0.9
FAC_MIN, FAC_MAX = 0.2, 10.0
# PI gains in the Gustafsson form: h *= err^-alpha * err_prev^beta
BETA = 0.04
ALPHA = 1.0 / ORDER - 0.75 * BETA


@dataclass
class RKStats:
    accepted: int = 0
    rejected: int = 0
    evaluations: int = 0


@dataclass(frozen=True)
class RKOptions:
    rtol: float = 1e-12
    atol: float = 1e-14
    h0: float | None = None
    max_steps: int = 200_000
    h_min_rel: float = 1e-15


def _error_norm(err: np.ndarray, y: np.ndarray, y_new: np.ndarray, rtol: float, atol: float) -> float:
    sc = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
    return float(np.sqrt(np.mean((err / sc) ** 2)))


def _initial_step(f, t, y, f0, direction, rtol, atol, span) -> float:
    # Hairer-Norsett-Wanner starting step heuristic
    sc = atol + rtol * np.abs(y)
    d0 = np.sqrt(np.mean((y / sc) ** 2))
    d1 = np.sqrt(np.mean((f0 / sc) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    f1 = np.asarray(f(t + direction * h0, y + direction * h0 * f0), dtype=float)
    d2 = np.sqrt(np.mean(((f1 - f0) / sc) ** 2)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / ORDER)
    return min(100 * h0, h1, span)


def integrate(f: Callable[[float, np.ndarray], Sequence[float]], t0: float, y0: Sequence[float],
              t_eval: Sequence[float], options: RKOptions = RKOptions(),
              stats: RKStats | None = None) -> np.ndarray:
    """Integrate y' = f(t, y) from t0 and return the state at every time in ``t_eval``.

    ``t_eval`` must be monotone in the direction of integration; steps are clipped so
    every output time is hit exactly rather than interpolated.
    """
    t_eval = np.asarray(t_eval, dtype=float)
    y = np.asarray(y0, dtype=float).copy()
    out = np.empty((len(t_eval), len(y)))
    if len(t_eval) == 0:
        return out
    direction = 1.0 if t_eval[-1] >= t0 else -1.0
    if np.any(direction * np.diff(np.concatenate([[t0], t_eval])) < 0):
        raise ValueError("t_eval must be monotone in the integration direction")
    stats = stats if stats is not None else RKStats()

    def rhs(t, x):
        stats.evaluations += 1
        v = np.asarray(f(t, x), dtype=float)
        if not np.all(np.isfinite(v)):
            raise IntegratorStepFailure(f"non-finite derivative at t = {t:.17g}")
        return v

    t = float(t0)
    k1 = rhs(t, y)
    span = abs(t_eval[-1] - t) or 1.0
    h = options.h0 or _initial_step(rhs, t, y, k1, direction, options.rtol, options.atol, span)
    err_prev = 1.0
    K = np.empty((7, len(y)))
    for idx, target in enumerate(t_eval):
        while direction * (target - t) > 0:
            if stats.accepted + stats.rejected >= options.max_steps:
                raise IntegratorStepFailure(f"step budget exhausted at t = {t:.17g}")
            h_min = options.h_min_rel * max(abs(t), 1.0)
            if h < h_min:
                raise IntegratorStepFailure(f"step size {h:.3g} underflow at t = {t:.17g}")
            last = h >= abs(target - t)
            step = abs(target - t) if last else h
            hs = direction * step
            K[0] = k1
            for s in range(1, 7):
                K[s] = rhs(t + C[s] * hs, y + hs * (np.asarray(A[s]) @ K[:s]))
            y_new = y + hs * (B5 @ K)
            err = _error_norm(hs * (E @ K), y, y_new, options.rtol, options.atol)
            if not np.isfinite(err):
                stats.rejected += 1
                h = step * FAC_MIN
                continue
            if err <= 1.0:
                stats.accepted += 1
                t = target if last else t + hs
                y = y_new
                k1 = K[6].copy()  # first-same-as-last
                fac = SAFETY * max(err, 1e-10) ** -ALPHA * err_prev ** BETA
                err_prev = max(err, 1e-4)
                proposed = step * min(FAC_MAX, max(FAC_MIN, fac))
                # a step clipped to hit an output time says little about the natural size
                h = max(proposed, h) if last else proposed
            else:
                stats.rejected += 1
                fac = SAFETY * err ** -(1.0 / ORDER)
                h = step * max(FAC_MIN, fac)
        out[idx] = y
    return out
