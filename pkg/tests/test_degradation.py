import math

import numpy as np
import pytest

from fadecast.degradation import (
    CAPACITY_FLOOR,
    DegradationParams,
    SimState,
    crossing_time,
    derivatives,
    quantify_modes,
    simulate,
)
from fadecast.errors import ContractError, OutOfRangeError


def test_derivatives_at_start():
    p = DegradationParams(k=0.01, a0=0.002, b0=0.05, c=5, t_p=10)
    dm, ds, dp = derivatives(SimState(t=0.0, M=1.0, S=0.0, P=0.0), p)
    assert dm == pytest.approx(-0.01, abs=1e-15)
    # tanh(100) == 1.0 in float64, so dS = a0 exactly
    assert ds == pytest.approx(0.002, abs=1e-15)
    assert dp == 0.0


def test_derivatives_gate_at_full_lithium_loss():
    # L = 1 halves the SEI rate: gate = 0.5*(1 + tanh(0)) = 0.5
    p = DegradationParams(k=0.01, a0=0.002, b0=0.05, c=5, t_p=10)
    dm, ds, dp = derivatives(SimState(t=20.0, M=0.5, S=0.6, P=0.4), p)
    assert ds == pytest.approx(0.5 * p.a0, abs=1e-15)
    # plating factor b(t) = 0.5*b0 shows through dP with the knee term
    knee = 1.0 + math.tanh(p.c * (20.0 - p.t_p))
    assert dp == pytest.approx(0.5 * (0.5 * p.b0) * knee, rel=1e-12)


def test_derivatives_matches_independent_evaluation():
    # Straight re-evaluation of the rate equations, written out by hand.
    p = DegradationParams(k=0.01, a0=0.002, b0=0.05, c=5, t_p=10)
    st = SimState(t=20.0, M=0.9, S=0.05, P=0.01)
    L = 0.05 + 0.01
    gate = 0.5 * (1.0 + math.tanh(100.0 * (1.0 - L)))
    b_t = 0.05 * gate
    expected_dp = 0.5 * b_t * (1.0 + math.tanh(5 * (20.0 - 10.0)))
    dm, ds, dp = derivatives(st, p)
    assert dm == pytest.approx(-0.01 * 0.9, rel=1e-14)
    assert ds == pytest.approx(0.002 * gate, rel=1e-14)
    assert dp == pytest.approx(expected_dp, rel=1e-14)


def test_derivatives_rejects_non_finite_state():
    p = DegradationParams(k=0.01, a0=0.002, b0=0.05, c=5, t_p=10)
    with pytest.raises(ContractError):
        derivatives(SimState(t=0.0, M=float("nan"), S=0.0, P=0.0), p)


def test_param_invariants_enforced():
    with pytest.raises(ContractError):
        DegradationParams(k=-0.1, a0=0, b0=0, c=1, t_p=0)
    with pytest.raises(ContractError):
        DegradationParams(k=0, a0=0, b0=0, c=0, t_p=0)
    with pytest.raises(ContractError):
        DegradationParams(k=0, a0=float("inf"), b0=0, c=1, t_p=0)


def test_simulate_zero_rates_is_constant():
    curve = simulate(DegradationParams(k=0, a0=0, b0=0, c=1, t_p=1),
                     step=0.01, time_cap=50)
    assert curve.terminated_by == "time_cap"
    assert np.all(curve.capacity == 1.0)
    assert len(curve) == 5001


def test_simulate_matches_closed_form():
    # With b0 = 0 and the gate saturated (L << 0.81, tanh(100(1-L)) == 1.0
    # in float64), S = a0*t and M = exp(-k*t) exactly solve the system.
    p = DegradationParams(k=0.002, a0=0.001, b0=0, c=1, t_p=0)
    curve = simulate(p, step=0.01, time_cap=50)
    mask = curve.lithium_loss <= 0.95
    closed = (1.0 - p.a0 * curve.t) * np.exp(-p.k * curve.t)
    assert np.abs(curve.capacity - closed)[mask].max() < 1e-6


def test_simulate_crossing_agrees_with_finer_step():
    p = DegradationParams(k=0.002, a0=0.0005, b0=0.02, c=2, t_p=15)
    coarse = simulate(p, step=0.01)
    fine = simulate(p, step=0.001)
    assert coarse.terminated_by == "capacity_floor"
    t_coarse = crossing_time(coarse, CAPACITY_FLOOR)
    t_fine = crossing_time(fine, CAPACITY_FLOOR)
    assert abs(t_coarse - t_fine) < 0.05


def test_simulate_validates_step_and_cap():
    p = DegradationParams(k=0, a0=0, b0=0, c=1, t_p=0)
    with pytest.raises(ContractError):
        simulate(p, step=0)
    with pytest.raises(ContractError):
        simulate(p, time_cap=-1)


def test_rk4_order_ratio_on_smooth_sets():
    # Smooth regime: b0 = 0 keeps the RHS C^inf; rates large enough that the
    # h^4 truncation error dominates float64 noise.
    rng = np.random.default_rng(11)
    for _ in range(3):
        p = DegradationParams(k=rng.uniform(0.2, 0.5),
                              a0=rng.uniform(0.005, 0.02),
                              b0=0.0, c=1.0, t_p=3.0)
        kw = dict(time_cap=12.0, capacity_floor=None)
        ref = simulate(p, step=0.0001, **kw)
        c1 = simulate(p, step=0.02, **kw)
        c2 = simulate(p, step=0.01, **kw)
        idx1 = np.arange(len(c1))
        err1 = np.abs(c1.capacity - ref.capacity[idx1 * 200]).max()
        err2 = np.abs(c2.capacity[idx1 * 2] - ref.capacity[idx1 * 200]).max()
        assert 12.0 <= err1 / err2 <= 20.0


def test_capacity_monotone_for_nonnegative_params():
    rng = np.random.default_rng(3)
    for _ in range(20):
        p = DegradationParams(k=rng.uniform(0, 0.02), a0=rng.uniform(0, 0.01),
                              b0=rng.uniform(0, 0.1), c=rng.uniform(0.1, 20),
                              t_p=rng.uniform(0, 40))
        curve = simulate(p, step=0.02)
        assert np.all(np.diff(curve.capacity) <= 1e-15)


def test_capacity_identity_exact():
    p = DegradationParams(k=0.005, a0=0.002, b0=0.05, c=4, t_p=8)
    curve = simulate(p)
    lhs = curve.capacity
    rhs = (1.0 - curve.lithium_loss) * curve.material
    assert np.abs(lhs - rhs).max() <= 1e-12


def test_gate_attenuation_beyond_full_loss():
    p = DegradationParams(k=0.001, a0=0.004, b0=0.06, c=3, t_p=1)
    for L in (1.0, 1.05, 1.4):
        st = SimState(t=5.0, M=0.9, S=L, P=0.0)
        _, ds, dp = derivatives(st, p)
        assert ds <= 0.5 * p.a0 + 1e-12
        knee = 1.0 + math.tanh(p.c * (st.t - p.t_p))
        b_t = dp / (0.5 * knee)
        assert b_t <= 0.5 * p.b0 + 1e-12


def test_knee_onset_delayed_by_later_tp():
    # With all else fixed, a later plating onset cannot cross a fixed
    # threshold earlier; threshold chosen below the no-plating trajectory.
    base = dict(k=0.002, a0=0.0005, b0=0.03, c=3)
    no_plating = simulate(DegradationParams(t_p=1e9, **base), capacity_floor=None)
    threshold = float(no_plating.capacity.min()) - 0.02
    crossings = []
    for t_p in (5.0, 10.0, 15.0, 20.0):
        curve = simulate(DegradationParams(t_p=t_p, **base), capacity_floor=None)
        crossings.append(crossing_time(curve, threshold))
    assert all(c is not None for c in crossings)
    assert all(b >= a - 1e-9 for a, b in zip(crossings, crossings[1:]))


def test_quantify_modes_no_lam_when_k_zero():
    curve = simulate(DegradationParams(k=0, a0=0.004, b0=0, c=1, t_p=0))
    report = quantify_modes(curve, 10.0)
    assert report.lam_fade == 0.0
    assert report.lli_fade > 0


def test_quantify_modes_initial_state():
    curve = simulate(DegradationParams(k=0.01, a0=0.001, b0=0.02, c=2, t_p=5))
    report = quantify_modes(curve, 0.0)
    assert report.lam_fade == 0.0
    assert report.lli_fade == 0.0
    assert report.capacity == 1.0


def test_quantify_modes_cross_checked_against_finer_step():
    p = DegradationParams(k=0.002, a0=0.0005, b0=0.02, c=2, t_p=15)
    curve = simulate(p, step=0.01)
    fine = simulate(p, step=0.001)
    report = quantify_modes(curve, 20.0)
    i = np.argmin(np.abs(curve.t - 20.0))
    assert report.capacity == pytest.approx(float(curve.capacity[i]), abs=0)
    fine_report = quantify_modes(fine, 20.0)
    assert report.lam_fade == pytest.approx(fine_report.lam_fade, abs=1e-4)
    assert report.lli_fade == pytest.approx(fine_report.lli_fade, abs=1e-4)
    assert report.capacity == pytest.approx(fine_report.capacity, abs=1e-4)
    assert abs(report.capacity - (1 - report.lli_fade) * (1 - report.lam_fade)) <= 1e-12


def test_quantify_modes_out_of_range():
    curve = simulate(DegradationParams(k=0.01, a0=0.001, b0=0, c=1, t_p=0))
    with pytest.raises(OutOfRangeError):
        quantify_modes(curve, curve.t_end + 1.0)
    with pytest.raises(OutOfRangeError):
        quantify_modes(curve, -1.0)
