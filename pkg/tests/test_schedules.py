import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from afldp import dp, schedules as sch

# (sensitivity, delta_b, P, gamma, T_s), evaluated at 50 digits from the
# four stage formulas with eps=0.1, b=12, sigma=30, L=10, delta=1e-3,
# theta=1/2, tau_max=4, f_gap=1
GOLDEN = [
    (223.57883816103107, 9997574.3746873046, 8.8889555722305608, 0.0011249915604528821, 1),
    (111.78941908051553, 2499449.8436718261, 8.8891556222555764, 0.0011249662425712548, 1),
    (55.894709540257767, 624918.71091795653, 8.8899558223556389, 0.0011248649824392743, 1),
]

DEFAULTS = sch.StageConfig(L=10.0, tau_max=4, b=12, sigma=30.0, epsilon0=0.1, theta=0.5, f_gap=1.0)


def _same_10_digits(a, b):
    return f"{a:.9e}" == f"{b:.9e}"


class TestRates:
    def test_audp_example(self):
        p = sch.RatePolicy("audp", L=10, tau_max=4, delta_b=3)
        assert p.inverse_rate(16) == 58
        assert sch.rate_at(p, 16) == 1 / 58

    @pytest.mark.parametrize("t", [1, 7, 10_000])
    def test_csgd_without_noise_is_constant(self, t):
        p = sch.RatePolicy("csgd", L=10, sigma=0, R=3.3, b=7)
        assert sch.rate_at(p, t) == 0.1

    def test_asgd_example(self):
        p = sch.RatePolicy("asgd", L=1, tau_max=0, sigma=1, R=1, b=1)
        assert p.inverse_rate(3) == 3

    def test_audp_v2(self):
        p = sch.RatePolicy("audp_v2", L=2, tau_max=1, delta_b=0)
        assert p.inverse_rate(4) == 2 * 5 + 2

    def test_constant(self):
        p = sch.RatePolicy("constant", L=1, gamma=0.25)
        assert [sch.rate_at(p, t) for t in (1, 100)] == [0.25, 0.25]

    @pytest.mark.parametrize("kw", [dict(kind="nope", L=1), dict(kind="csgd", L=0),
                                    dict(kind="csgd", L=1, b=0), dict(kind="csgd", L=1, tau_max=-1),
                                    dict(kind="mapa_stage", L=1), dict(kind="audp", L=math.inf)])
    def test_rejects(self, kw):
        with pytest.raises(sch.ScheduleError):
            sch.RatePolicy(**kw)

    def test_rejects_t0(self):
        with pytest.raises(sch.ScheduleError):
            sch.rate_at(sch.RatePolicy("csgd", L=1), 0)

    @settings(max_examples=200, deadline=None)
    @given(st.sampled_from(["csgd", "asgd", "audp", "audp_v2"]), st.floats(0.01, 100),
           st.integers(0, 30), st.floats(0, 50), st.floats(0.1, 50), st.integers(1, 64),
           st.floats(0, 1e6), st.integers(1, 10**6))
    def test_positive_nonincreasing(self, kind, L, tau, sigma, R, b, db, t):
        p = sch.RatePolicy(kind, L, tau, sigma, R, b, db)
        g0, g1 = sch.rate_at(p, t), sch.rate_at(p, t + 1)
        assert 0 < g1 <= g0

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0.01, 100), st.integers(0, 30), st.floats(0, 1e6), st.integers(1, 10**6))
    def test_audp_below_inverse_L(self, L, tau, db, t):
        assert sch.rate_at(sch.RatePolicy("audp", L, tau, delta_b=db), t) < 1 / L


class TestStageFormulas:
    def test_P_example(self):
        assert sch.stage_P(2, 3, 2, 1, 0.5) == 4

    def test_P_clamped(self):
        assert sch.stage_P(1e-12, 3, 2, 1, 0.5) == 1

    @pytest.mark.parametrize("theta", [0, 1, -0.5, 2])
    def test_P_rejects_theta(self, theta):
        with pytest.raises(sch.ScheduleError):
            sch.stage_P(1, 1, 1, 1, theta)

    def test_iterations_examples(self):
        assert sch.stage_iterations(4, 1, 3, 1, 2) == 512
        assert sch.stage_iterations(1, 1, 0, 2.5, 2.5) == 4

    def test_iterations_floor_and_ceil(self):
        assert sch.stage_iterations(1, 1, 0, 1e-9, 1) == 1
        assert sch.stage_iterations(1, 1, 0, 1.01, 4) == 2

    def test_next_sensitivity_example(self):
        assert sch.next_sensitivity(2, 4, 3, 2) == 0.5

    def test_delta_b_examples(self):
        assert sch.update_delta_b(30, 12, 1, 0.1) == pytest.approx(275, rel=1e-15)
        assert sch.update_delta_b(0, 3, 0, 1) == 0
        full = sch.update_delta_b(0, 1, 2.0, 0.3)
        assert sch.update_delta_b(0, 1, 1.0, 0.3) == pytest.approx(full / 4, rel=1e-15)

    @settings(max_examples=300, deadline=None)
    @given(st.floats(1e-3, 1e6), st.integers(0, 20), st.integers(1, 64), st.floats(1e-3, 1e3),
           st.floats(0.05, 0.95))
    def test_next_sensitivity_is_theta_times_current(self, db, tau, b, S, theta):
        P = sch.stage_P(db, tau, b, S, theta)
        if P == 1.0:
            return  # clamped, the identity does not apply
        got = sch.next_sensitivity(db, P, tau, b)
        want = theta * S
        assert abs(got - want) <= 4 * math.ulp(want)


class TestStages:
    def test_golden_trace(self):
        S0 = dp.initial_sensitivity(30, 12, 1e-3)
        trace = sch.stage_trace(DEFAULTS, S0, 3)
        for st_, (S, db, P, g, T) in zip(trace, GOLDEN):
            assert _same_10_digits(st_.sensitivity, S)
            assert _same_10_digits(st_.delta_b, db)
            assert _same_10_digits(st_.P, P)
            assert _same_10_digits(st_.gamma, g)
            assert st_.T_s == T

    def test_golden_against_mpmath(self):
        # same numbers from the formulas, independently at 50 digits
        with mpmath.workdps(50):
            S = 2 * mpmath.mpf(30) / (12 * mpmath.sqrt(1 - mpmath.sqrt(1 - mpmath.mpf("1e-3"))))
            for row in GOLDEN:
                assert _same_10_digits(float(S), row[0])
                S /= 2

    def test_monotone_and_hypothesis(self):
        trace = sch.stage_trace(DEFAULTS, dp.initial_sensitivity(30, 12, 1e-3), 6)
        for a, b in zip(trace, trace[1:]):
            assert b.sensitivity == a.sensitivity * 0.5
            assert b.gamma < a.gamma
            assert b.stage_index == a.stage_index + 1
        for s in trace:
            assert 1 / s.gamma >= 2 * DEFAULTS.L * (DEFAULTS.tau_max + 1)

    def test_advance_requires_completion(self):
        s = sch.make_stage(DEFAULTS, 5.0)
        with pytest.raises(sch.ScheduleError):
            sch.advance_stage(s, DEFAULTS)
        for _ in range(s.T_s):
            s = s.tick()
        nxt = sch.advance_stage(s, DEFAULTS)
        assert nxt.sensitivity == 2.5 and nxt.iterations_done_in_stage == 0

    def test_two_advances_quarter(self):
        a, _, c = sch.stage_trace(DEFAULTS, 8.0, 3)
        assert c.sensitivity == a.sensitivity / 4

    @pytest.mark.parametrize("kw", [dict(theta=1.0), dict(theta=0.0), dict(f_gap=0.0)])
    def test_config_rejects(self, kw):
        base = dict(L=1, tau_max=0, b=1, sigma=1, epsilon0=1, theta=0.5, f_gap=1)
        base.update(kw)
        with pytest.raises(sch.ScheduleError):
            sch.StageConfig(**base)


class TestBounds:
    def test_ball(self):
        assert sch.gradient_ball_bound(2, 10, 0.5, 3, 4) == pytest.approx(2 * 2 / 5 + 2 * 3 * 4 * 0.5)

    def test_averaged(self):
        R, G, tau, T, db, L, g1 = 2.0, 3.0, 4, 100, 8.0, 1.5, 0.1
        want = (R * G * tau / T + L * (db + G * G) / (2 * (db + 1)) * 25 * np.log(T) / T
                + ((4 + R * R) * 3.0 + R * R / g1) / (2 * 10))
        assert sch.averaged_error_bound(R, G, tau, T, db, L, g1) == pytest.approx(want, rel=1e-14)

    def test_averaged_decays(self):
        vals = [sch.averaged_error_bound(1, 1, 2, T, 1, 1, 0.1) for T in (10**3, 10**4, 10**5)]
        assert vals[0] > vals[1] > vals[2]
