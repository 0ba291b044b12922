import math
from functools import lru_cache

import numpy as np
import pytest

from blowup_asym.expansion import run_expansion
from blowup_asym.spectral import analyze_root, solve_balance
from blowup_asym.vf_dsl import builtin_names, load_builtin

SQRT2 = math.sqrt(2.0)
SQRT3 = math.sqrt(3.0)


@lru_cache(maxsize=None)
def problem(name, **overrides):
    return load_builtin(name, overrides or None)


@lru_cache(maxsize=None)
def roots(name, **overrides):
    spec = problem(name, **overrides)
    return tuple(solve_balance(spec.field, spec.seeds or None))


def root_near(name, target, **overrides):
    """The balance root closest to ``target``."""
    rs = roots(name, **overrides)
    best = min(rs, key=lambda r: np.linalg.norm(r.vector - np.asarray(target, float)))
    assert np.linalg.norm(best.vector - np.asarray(target, float)) < 1e-6, \
        f"no root near {target}: {[r.Y0 for r in rs]}"
    return best


@lru_cache(maxsize=None)
def _expand(name, target, N, overrides):
    o = dict(overrides)
    spec = problem(name, **o)
    r = root_near(name, target, **o)
    return run_expansion(spec.field, r, N, analyze_root(spec.field, r))


def expansion(name, target, N=3, **overrides):
    return _expand(name, tuple(target), N, tuple(sorted(overrides.items())))


def all_root_cases():
    """(problem, root) pairs for every bundled example."""
    out = []
    for name in builtin_names():
        for r in roots(name):
            out.append(pytest.param(name, r.Y0, id=f"{name}-{'_'.join(f'{x:.3g}' for x in r.Y0)}"))
    return out


def coeff(series, gamma, m=0, bindings=None):
    """Numeric coefficient of theta^gamma (ln theta)^m."""
    c = series.coefficient(gamma, m)
    return c.evaluate(bindings or {}) if bindings is not None or c.is_constant else c


# acceptance lines, filled by test_acceptance and echoed in the terminal summary
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
