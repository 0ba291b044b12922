import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blowup_asym.errors import IntegratorStepFailure
from blowup_asym.rk import A, B4, B5, C, RKOptions, RKStats, integrate


def test_tableau_consistency():
    for i in range(1, 7):
        assert sum(A[i]) == pytest.approx(C[i], abs=1e-15)
    assert B5.sum() == pytest.approx(1.0, abs=1e-15)
    assert B4.sum() == pytest.approx(1.0, abs=1e-15)
    # first-same-as-last: the seventh stage is the fifth-order solution
    np.testing.assert_allclose(A[6], B5[:6], atol=0)
    # fifth-order quadrature conditions sum b c^(q-1) = 1/q
    for q in range(1, 6):
        assert float(B5 @ C ** (q - 1)) == pytest.approx(1 / q, abs=1e-14)


def test_exponential_growth():
    ts = np.linspace(0.1, 2.0, 20)
    out = integrate(lambda t, y: y, 0.0, [1.0], ts)
    np.testing.assert_allclose(out[:, 0], np.exp(ts), rtol=5e-12)


def test_backward_in_time():
    ts = np.linspace(-0.1, -3.0, 10)
    out = integrate(lambda t, y: -2.0 * y, 0.0, [1.0], ts)
    np.testing.assert_allclose(out[:, 0], np.exp(-2.0 * ts), rtol=5e-12)


def test_riccati_away_from_blowup():
    # y' = y^2, y(0) = 1 has y = 1/(1 - t), blowing up at t = 1
    ts = np.array([0.5, 0.9, 0.99])
    out = integrate(lambda t, y: y * y, 0.0, [1.0], ts)
    np.testing.assert_allclose(out[:, 0], 1 / (1 - ts), rtol=1e-10)


def test_harmonic_oscillator_two_components():
    ts = np.linspace(0.5, 10.0, 7)
    out = integrate(lambda t, y: [y[1], -y[0]], 0.0, [1.0, 0.0], ts)
    np.testing.assert_allclose(out[:, 0], np.cos(ts), atol=1e-11)
    np.testing.assert_allclose(out[:, 1], -np.sin(ts), atol=1e-11)


def test_non_autonomous():
    ts = np.array([1.0, 2.0])
    out = integrate(lambda t, y: [math.cos(t)], 0.0, [0.0], ts)
    np.testing.assert_allclose(out[:, 0], np.sin(ts), atol=1e-12)


def test_output_times_are_hit_exactly():
    ts = [0.1, 0.37, 1.0]
    out = integrate(lambda t, y: [1.0], 0.0, [0.0], ts)
    np.testing.assert_allclose(out[:, 0], ts, rtol=1e-14)


def test_stats_are_counted():
    stats = RKStats()
    integrate(lambda t, y: -y, 0.0, [1.0], [5.0], stats=stats)
    assert stats.accepted > 0
    # first stage, one probe in the starting-step heuristic, six new stages per attempt
    assert stats.evaluations == 2 + 6 * (stats.accepted + stats.rejected)


def test_tighter_tolerance_is_more_accurate():
    f = lambda t, y: [y[0] * math.cos(t)]  # noqa: E731
    exact = math.exp(math.sin(8.0))
    loose = integrate(f, 0.0, [1.0], [8.0], RKOptions(rtol=1e-6, atol=1e-8))[0, 0]
    tight = integrate(f, 0.0, [1.0], [8.0], RKOptions(rtol=1e-11, atol=1e-13))[0, 0]
    assert abs(tight - exact) < abs(loose - exact)
    assert abs(tight - exact) < 1e-9


def test_non_monotone_output_times_are_rejected():
    with pytest.raises(ValueError):
        integrate(lambda t, y: y, 0.0, [1.0], [0.5, 0.2])


def test_blowup_is_reported():
    with pytest.raises(IntegratorStepFailure):
        integrate(lambda t, y: y * y, 0.0, [1.0], [2.0])


def test_step_budget():
    with pytest.raises(IntegratorStepFailure):
        integrate(lambda t, y: [math.cos(100 * t)], 0.0, [0.0], [100.0], RKOptions(max_steps=10))


def test_empty_output():
    assert integrate(lambda t, y: y, 0.0, [1.0], []).shape == (0, 1)


@settings(max_examples=50, deadline=None)
@given(st.floats(-3.0, 3.0), st.floats(0.1, 3.0))
def test_linear_decay_property(lam, T):
    out = integrate(lambda t, y: lam * y, 0.0, [1.0], [T])
    assert out[0, 0] == pytest.approx(math.exp(lam * T), rel=1e-10)
