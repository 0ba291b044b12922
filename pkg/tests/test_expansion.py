import math

import numpy as np
import pytest

from blowup_asym.expansion import (
    in_lattice,
    predict_exponent_lattice,
    residual_generators,
    run_expansion,
    solve_linear_step,
    solve_scalar,
)
from blowup_asym.errors import ResonanceToleranceAmbiguous
from blowup_asym.spectral import analyze_root, spectral_decompose
from blowup_asym.theta_series import (
    INF,
    ThetaSeries,
    add,
    add_many,
    deg,
    differentiate,
    mul,
    primitive,
    scale,
    shift,
    sub,
    substitute,
    truncate,
)

from conftest import SQRT2, SQRT3, all_root_cases, expansion, problem, root_near

T = ThetaSeries
ROOT_CASES = [pytest.param(*c.values, id=c.id) for c in all_root_cases()]


def c_at(s, gamma, m=0, bindings=None):
    return s.coefficient(gamma, m).evaluate(bindings or {})


# -- scalar solve --------------------------------------------------------------

def test_scalar_solve_is_a_particular_solution():
    # v' = lam theta^-1 v + h with d/dt = -d/dtheta
    lam = 2.0
    h = T([(3.0, 0.5, 0), (-1.0, 1.0, 1)])
    v = solve_scalar(lam, h)
    resid = sub(sub(differentiate(v), scale(shift(v, -1.0), lam)), h)
    assert resid.magnitude < 1e-14


def test_scalar_solve_resonance_produces_a_log():
    # gamma + 1 + lam = 0 for gamma = -1/2, lam = -1/2
    v = solve_scalar(-0.5, T([(1.0, -0.5, 0)]))
    assert v.max_log_power == 1
    resid = sub(sub(differentiate(v), scale(shift(v, -1.0), -0.5)), T([(1.0, -0.5, 0)]))
    assert resid.magnitude < 1e-14


def test_scalar_solve_closed_form():
    # b = -c / (gamma + 1 + lam)
    v = solve_scalar(1.0, T([(6.0, 1.0, 0)]))
    assert v == T([(-2.0, 2.0, 0)])


def test_scalar_solve_rejects_ambiguous_resonance():
    with pytest.raises(ResonanceToleranceAmbiguous):
        solve_scalar(-0.5, T([(1.0, -0.5 + 5e-11, 0)]))


# -- goldens -------------------------------------------------------------------

def test_one_dim_cubic():
    exp = expansion("one_dim_cubic", [1 / SQRT2])
    y = exp.y_series(0)
    assert c_at(y, -0.5) == pytest.approx(1 / SQRT2, rel=1e-9)
    assert c_at(y, 0.5) == pytest.approx(1 / (2 * SQRT2), rel=1e-9)
    assert c_at(y, 1.5) == pytest.approx(0.0294628, rel=1e-6)
    # by hand: the theta^(5/2) coefficient is -1/(48 sqrt 2)
    assert c_at(y, 2.5) == pytest.approx(-1 / (48 * SQRT2), rel=1e-9)


def _cubic_recurrence(count):
    """b_n of y = theta^(-1/2) sum b_n theta^n solving y' = y^3 - y.

    Matching theta^(n - 3/2) gives -(n - 1/2) b_n = [B^3]_n - b_(n-1), with B = sum b_n theta^n.
    """
    b = [1 / SQRT2]
    for n in range(1, count):
        trial = np.array(b + [0.0])
        cube = np.convolve(np.convolve(trial, trial), trial)[n]
        # [B^3]_n = 3 b0^2 b_n + cube, so b_n (n - 1/2 + 3 b0^2) = b_(n-1) - cube
        b.append((b[n - 1] - cube) / (n - 0.5 + 3 * b[0] ** 2))
    return b


def test_one_dim_cubic_against_power_series_recurrence():
    b = _cubic_recurrence(5)
    exp = expansion("one_dim_cubic", [1 / SQRT2], N=4)
    y = exp.y_series(0)
    for n, bn in enumerate(b):
        if n - 0.5 < exp.final_below - 0.5:
            assert c_at(y, n - 0.5) == pytest.approx(bn, rel=1e-12, abs=1e-15)


def test_ishiwata_yazaki():
    a = 0.5
    exp = expansion("ishiwata_yazaki", [1.0])
    y = exp.y_series(0)
    assert c_at(y, -a) == pytest.approx(1.0, rel=1e-8)
    assert c_at(y, 1 - 2 * a) == pytest.approx(a * a / ((1 - a) * (2 - a)), rel=1e-8)
    spec = problem("ishiwata_yazaki")
    v = exp.derived_series(spec.derived["v"])
    assert c_at(v, 1 - a) == pytest.approx(-a / (1 - a), rel=1e-8)


def test_ishiwata_yazaki_zero_i_is_exact():
    a = 0.5
    exp = expansion("ishiwata_yazaki_i0", [(1 / (a + 1)) ** (a / (a + 1))])
    assert exp.exact and exp.final_below == INF
    y = exp.y_series(0)
    assert len(y) == 1
    assert c_at(y, -a / (a + 1)) == pytest.approx((1 / (a + 1)) ** (a / (a + 1)), rel=1e-8)
    assert all(not s.terms for Yj in exp.Y_terms[1:] for s in Yj)


def test_two_phase():
    rho1, rho2, c, c1 = 1.0, 2.0, 1.0, -5 / 3
    exp = expansion("two_phase", [2.0, 4.0])
    assert exp.free_params == ()
    b, v = exp.y_series(0), exp.y_series(1)
    assert c_at(b, 0.0) == pytest.approx(2.0, rel=1e-12)
    assert c_at(v, -1.0) == pytest.approx(4.0, rel=1e-12)
    K = c * rho2 + c1
    assert c_at(b, 1.0) == pytest.approx(K / 3, rel=1e-8)
    V1 = -2 * rho1 * K / (3 * (rho2 - rho1) ** 2) + c * rho2 / (rho2 - rho1)
    assert c_at(v, 0.0) == pytest.approx(V1, rel=1e-8)


def test_andrews1_ratio_of_free_coefficients():
    a = 0.25
    exp = expansion("andrews1", [1.0, 1.0])
    w, v = exp.y_series(0), exp.y_series(1)
    assert c_at(w, -0.5) == pytest.approx(math.sqrt((1 - 2 * a) / (8 * a * a)), rel=1e-8)
    assert c_at(v, -0.5) == pytest.approx(math.sqrt(1 / (2 * (1 - 2 * a))), rel=1e-8)
    g = -1.5 + 1 / (4 * a * (1 - a))
    cw = w.coefficient(g).d[(("C1", 1),)]
    cv = v.coefficient(g).d[(("C1", 1),)]
    assert cv / cw == pytest.approx(2 * a * a / ((1 - a) * (2 * a - 1)), rel=1e-8)


def test_andrews2():
    a = b = 1.0
    exp = expansion("andrews2", [1 / SQRT2, 1 / SQRT2])
    bind = {"C1": 1.0}
    u, v = exp.y_series(0), exp.y_series(1)
    e0, e1, e2 = -0.5, a / b - 1, 2 * a / b - 1.5
    assert c_at(u, e0) == pytest.approx(math.sqrt(2 * a - b) / (SQRT2 * b), rel=1e-8)
    assert c_at(u, e1, bindings=bind) == pytest.approx(1.0, rel=1e-8)
    assert c_at(u, e2, bindings=bind) == pytest.approx(
        b * (4 * a - b) * (4 * a + b) / (4 * SQRT2 * a * a * math.sqrt(2 * a - b)), rel=1e-8)
    assert c_at(v, e0) == pytest.approx(1 / math.sqrt(2 * (2 * a - b)), rel=1e-8)
    assert c_at(v, e1, bindings=bind) == pytest.approx(-b * b / (2 * a * (2 * a - b)), rel=1e-8)
    assert c_at(v, e2, bindings=bind) == pytest.approx(
        -b ** 3 * (4 * a - b) / (4 * SQRT2 * a * a * (2 * a - b) ** 1.5), rel=1e-8)


def test_keyfitz_kranser_quasi_homogeneous_saddle():
    exp = expansion("keyfitz_kranser", [3 - SQRT3, (3 - SQRT3) ** 3 / 6], eps=0.0)
    U, V = exp.sum
    g1, g2 = 2 * SQRT3 - 2, 4 * SQRT3 - 4
    C = {"C1": 1.0}
    assert c_at(U, g1, bindings=C) == pytest.approx(1.0, rel=1e-8)
    assert c_at(U, g2, bindings=C) == pytest.approx(-(3 + 4 * SQRT3) / 26, rel=1e-8)
    assert c_at(V, g1, bindings=C) == pytest.approx(3.0, rel=1e-8)
    assert c_at(V, g2, bindings=C) == pytest.approx(-(1 + 10 * SQRT3) / 26, rel=1e-8)
    # quadratic in C: scale C by 2 and the theta^g2 coefficient scales by 4
    assert c_at(U, g2, bindings={"C1": 2.0}) == pytest.approx(4 * c_at(U, g2, bindings=C), rel=1e-12)


def test_keyfitz_kranser_quasi_homogeneous_sink_is_exact():
    exp = expansion("keyfitz_kranser", [3 + SQRT3, (3 + SQRT3) ** 3 / 6], eps=0.0)
    assert exp.exact
    assert all(not s.terms for Yj in exp.Y_terms[1:] for s in Yj)


@pytest.mark.parametrize("u0, sign", [(3 - SQRT3, 1), (3 + SQRT3, -1)])
def test_keyfitz_kranser_full(u0, sign):
    exp = expansion("keyfitz_kranser", [u0, u0 ** 3 / 6])
    u, v = exp.y_series(0), exp.y_series(1)
    assert c_at(u, 1.0) == pytest.approx((3 + sign * SQRT3) / 6, rel=1e-8)
    assert c_at(v, 0.0) == pytest.approx((15 + sign * SQRT3) / 6, rel=1e-8)


def test_log_jordan():
    exp = expansion("log_jordan", [1.0, 0.0])
    u, v = exp.y_series(0), exp.y_series(1)
    assert c_at(u, 0.0) == pytest.approx(-1 / 4, rel=1e-10)
    assert c_at(u, 1.0) == pytest.approx(-1 / 144, rel=1e-10)
    assert c_at(v, -1.0) == pytest.approx(1 / 2, rel=1e-10)
    assert c_at(v, 0.0) == pytest.approx(-1 / 24, rel=1e-10)
    assert all(u.max_log_power == 0 for u in exp.sum)


def test_log2_jordan():
    exp = expansion("log2_jordan", [1.0, 0.0])
    u, v = exp.y_series(0), exp.y_series(1)
    assert c_at(u, 1.0) == pytest.approx(-1 / 9, rel=1e-10)
    assert c_at(v, 0.0) == pytest.approx(1 / 3, rel=1e-10)
    assert all(t.m == 0 for i in range(exp.n) for t in exp.final_series(i).terms)


def test_expansion_rejects_order_zero():
    spec = problem("one_dim_cubic")
    with pytest.raises(ValueError):
        run_expansion(spec.field, root_near("one_dim_cubic", [1 / SQRT2]), 0)


# -- invariants ----------------------------------------------------------------

@pytest.mark.parametrize("name, Y0", ROOT_CASES)
def test_degree_of_each_step_grows_with_delta(name, Y0):
    exp = expansion(name, Y0)
    delta = exp.spectral.delta
    for j, Yj in enumerate(exp.Y_terms[1:], start=1):
        for s in Yj:
            assert deg(s) >= j * delta - 1e-9


@pytest.mark.parametrize("name, Y0", ROOT_CASES)
def test_exponents_lie_in_predicted_lattice(name, Y0):
    # every exponent of Y is a nonnegative combination of the generators
    exp = expansion(name, Y0)
    for s in exp.sum:
        for t in s.terms:
            assert in_lattice(t.gamma, exp.lattice, 1e-9), (name, t.gamma, exp.lattice[:10])


@pytest.mark.parametrize("name, Y0", ROOT_CASES)
def test_free_parameter_count_equals_m_A(name, Y0):
    exp = expansion(name, Y0)
    assert len(exp.free_params) == exp.spectral.m_A
    symbols = set().union(*(s.symbols for s in exp.sum))
    assert symbols == set(exp.free_params)
    zero = {c: 0.0 for c in exp.free_params}
    assert all(not s.bind(zero).symbols for s in exp.sum)


@pytest.mark.parametrize("name, Y0", ROOT_CASES)
def test_final_terms_agree_across_orders(name, Y0):
    lo, hi = expansion(name, Y0, N=2), expansion(name, Y0, N=3)
    for i in range(lo.n):
        for t in lo.final_terms(i):
            other = hi.sum[i].coefficient(t.gamma, t.m)
            diff = t.coeff - other
            assert diff.magnitude <= 1e-9 * max(1.0, t.coeff.magnitude)


def test_keyfitz_kranser_lattice():
    exp = expansion("keyfitz_kranser", [3 - SQRT3, 0.3397459622])
    rho = 2 * SQRT3 - 2
    assert residual_generators(problem("keyfitz_kranser").field) == pytest.approx([2.0])
    expected = sorted({b1 * 2 + b2 * rho for b1 in range(4) for b2 in range(8)
                       if b1 * 2 + b2 * rho <= 5.0 + 1e-9})
    got = [x for x in exp.lattice if x <= 5.0 + 1e-9]
    assert got == pytest.approx(expected, abs=1e-9)


def test_lattice_without_generators_is_trivial():
    vf = problem("keyfitz_kranser", eps=0.0).field
    sd = spectral_decompose(np.diag([1.0, 2.0]))
    assert predict_exponent_lattice(sd, vf, 10.0) == [0.0]


# -- the alternative route: fundamental matrix and explicit primitives ---------

def _matrix_power_series(sd, sign):
    """theta^(sign*A) as a matrix of series, from P theta^(sign*J) P^-1."""
    n = sd.A.shape[0]
    inner = [[T.zero() for _ in range(n)] for _ in range(n)]
    for blk in sd.blocks:
        lam = blk.re
        cols = blk.columns
        for p, cp in enumerate(cols):
            for q in range(p, len(cols)):
                # theta^(sign*(lam I + N)) = theta^(sign*lam) sum (sign ln theta)^r N^r / r!
                r = q - p
                inner[cp][cols[q]] = T([((sign ** r) / math.factorial(r), sign * lam, r)])
    P, Pinv = sd.P, sd.Pinv
    out = [[T.zero() for _ in range(n)] for _ in range(n)]
    for i in range(n):
        for j in range(n):
            parts = []
            for a in range(n):
                for b in range(n):
                    w = P[i, a] * Pinv[b, j]
                    if w and inner[a][b].terms:
                        parts.append(scale(inner[a][b], w))
            out[i][j] = add_many(parts) if parts else T.zero()
    return out


def _apply(M, v, cap):
    return [add_many([mul(M[i][j], v[j], cap) for j in range(len(v))]) for i in range(len(v))]


def _primitive_series(s):
    pieces = [primitive(t) for t in s.terms]
    out = add_many(pieces) if pieces else T.zero()
    return T(out.terms, s.trunc + 1.0)


def _step_by_fundamental_matrix(sd, g, cap):
    # Z = theta^A Y solves dZ/dt = theta^A g, so Y = theta^-A primitive(theta^A g)
    plus, minus = _matrix_power_series(sd, 1.0), _matrix_power_series(sd, -1.0)
    inner = _apply(plus, g, cap + 2.0)
    z = [_primitive_series(s) for s in inner]
    return [truncate(s, cap) for s in _apply(minus, z, cap + 2.0)], inner


def _forcing(vf, S_new, S_old, Y_last, Df, cap):
    """g = theta^-1 [f_q(S_new) - f_q(S_old) - Df Y_last] + R(S_new) - R(S_old)."""
    a = vf.qh.scaled

    def R(S):
        args = [shift(s, -ai) for s, ai in zip(S, a)]
        return [shift(substitute(e, args, vf.params, cap=cap + 4.0), ai)
                for e, ai in zip(vf.residual, a)]

    def F(S):
        return [substitute(e, S, vf.params, cap=cap + 4.0) for e in vf.quasi]

    Fn, Fo, Rn, Ro = F(S_new), F(S_old), R(S_new), R(S_old)
    out = []
    for i in range(vf.n):
        lin = add_many([scale(Y_last[j], Df[i, j]) for j in range(vf.n) if Df[i, j]] or [T.zero()])
        q = shift(sub(sub(Fn[i], Fo[i]), lin), -1.0)
        out.append(truncate(add(q, sub(Rn[i], Ro[i])), cap))
    return out


def test_jordan_example_alternative_route_reproduces_first_two_orders():
    spec = problem("log_jordan")
    vf = spec.field
    root = root_near("log_jordan", [1.0, 0.0])
    sd = analyze_root(vf, root)
    assert [b.size for b in sd.blocks] == [2]
    cap = 4.0
    Y0 = [T.const(1.0), T.zero()]
    Df = sd.A + np.diag(vf.qh.scaled)

    # at order one the balance law removes the quasi part and only the residual forces
    g1 = _residual_only(vf, Y0, cap)
    Y1_alt, inner1 = _step_by_fundamental_matrix(sd, g1, cap)
    S1 = [add(a, b) for a, b in zip(Y0, Y1_alt)]
    g2 = _forcing(vf, S1, Y0, Y1_alt, Df, cap)
    Y2_alt, inner2 = _step_by_fundamental_matrix(sd, g2, cap - 1.0)

    # the intermediate products carry ln(theta); the solutions do not
    assert max(s.max_log_power for s in inner1 + inner2) >= 1
    assert all(s.max_log_power == 0 for s in Y1_alt + Y2_alt)

    Y1 = solve_linear_step(sd, g1, 1)
    exp = expansion("log_jordan", [1.0, 0.0])
    for alt, direct, lib in zip(Y1_alt, Y1, exp.Y_terms[1]):
        _same_below(alt, direct, cap - 1.0)
        _same_below(alt, lib, cap - 1.0)
    for alt, lib in zip(Y2_alt, exp.Y_terms[2]):
        _same_below(alt, lib, cap - 2.0)
    # the known values: Y1 = (-1/4 theta, 1/2 theta), Y2 = (-1/144 theta^2, -1/24 theta^2)
    assert c_at(Y1_alt[0], 1.0) == pytest.approx(-0.25, rel=1e-12)
    assert c_at(Y1_alt[1], 1.0) == pytest.approx(0.5, rel=1e-12)
    assert c_at(Y2_alt[0], 2.0) == pytest.approx(-1 / 144, rel=1e-12)
    assert c_at(Y2_alt[1], 2.0) == pytest.approx(-1 / 24, rel=1e-12)


def _residual_only(vf, Y0, cap):
    a = vf.qh.scaled
    args = [shift(s, -ai) for s, ai in zip(Y0, a)]
    return [truncate(shift(substitute(e, args, vf.params, cap=cap + 4.0), ai), cap)
            for e, ai in zip(vf.residual, a)]


def _same_below(a, b, cut):
    for t in a.terms:
        if t.gamma < cut - 1e-9:
            assert (t.coeff - b.coefficient(t.gamma, t.m)).magnitude <= 1e-12 * max(1.0, t.coeff.magnitude), (a, b)
    for t in b.terms:
        if t.gamma < cut - 1e-9:
            assert (t.coeff - a.coefficient(t.gamma, t.m)).magnitude <= 1e-12 * max(1.0, t.coeff.magnitude), (a, b)
