import decimal
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from granudp.accountant import (
    DEFAULT_ORDERS,
    AccountingError,
    AccountingReport,
    BracketError,
    MechanismParams,
    PrivacyParams,
    RdpCurve,
    account,
    calibrate_noise,
    compose,
    epsilon_for,
    gaussian_rdp,
    group_privacy,
    rdp_curve,
    rdp_to_dp,
    rdp_to_dp_with_order,
    scale_epsilon_for_granularity,
    steps_for_epochs,
    subsampled_gaussian_rdp,
)


def rdp_by_integration(q, sigma, alpha):
    """E_{z~N(0, s^2)}[((1-q) + q exp((2z-1)/(2 s^2)))^alpha], by quadrature in a rescaled log domain."""

    def log_integrand(z):
        log_ratio = np.logaddexp(math.log1p(-q), math.log(q) + (2 * z - 1) / (2 * sigma**2))
        return alpha * log_ratio - z**2 / (2 * sigma**2) - math.log(sigma * math.sqrt(2 * math.pi))

    lo, hi = -12 * sigma, alpha + 12 * sigma
    shift = max(log_integrand(z) for z in np.linspace(lo, hi, 2001))
    val, _ = integrate.quad(
        lambda z: math.exp(log_integrand(z) - shift), lo, hi, limit=500, epsabs=0, epsrel=1e-12, points=[0.0, 0.5]
    )
    return (math.log(val) + shift) / (alpha - 1)


def rdp_by_plain_sum(q, sigma, alpha):
    """Direct binomial sum in 60-digit decimal arithmetic."""
    with decimal.localcontext() as ctx:
        ctx.prec = 60
        q_ = decimal.Decimal(q)
        s2 = 2 * decimal.Decimal(sigma) ** 2
        total = sum(
            math.comb(alpha, j) * (1 - q_) ** (alpha - j) * q_**j * (decimal.Decimal(j * (j - 1)) / s2).exp()
            for j in range(alpha + 1)
        )
        return float(total.ln()) / (alpha - 1)


def epsilon_oracle(sigma, q, steps, delta, orders=range(2, 65)):
    return min(steps * rdp_by_plain_sum(q, sigma, a) + math.log(1 / delta) / (a - 1) for a in orders)


class TestRdp:
    @pytest.mark.parametrize("sigma", [0.5, 1.0, 2.0, 4.0])
    def test_full_batch_is_plain_gaussian(self, sigma):
        for a in range(2, 33):
            got = subsampled_gaussian_rdp(MechanismParams(sigma, 1.0, 1), a)
            assert got == pytest.approx(a / (2 * sigma**2), rel=1e-12)

    def test_zero_sampling_is_free(self):
        assert subsampled_gaussian_rdp(MechanismParams(1.0, 0.0, 1), 7) == 0.0

    @pytest.mark.parametrize(
        "q,sigma,alpha",
        [(0.01, 1.0, 2), (0.01, 1.0, 8), (0.05, 0.8, 4), (0.1, 2.0, 16), (0.3, 1.5, 6), (0.004, 0.7, 32)],
    )
    def test_matches_numerical_integration(self, q, sigma, alpha):
        got = subsampled_gaussian_rdp(MechanismParams(sigma, q, 1), alpha)
        assert got == pytest.approx(rdp_by_integration(q, sigma, alpha), rel=1e-7)

    @given(
        q=st.floats(1e-4, 0.99),
        sigma=st.floats(0.6, 20.0),
        alpha=st.integers(2, 40),
    )
    @settings(max_examples=200, deadline=None)
    def test_matches_plain_binomial_sum(self, q, sigma, alpha):
        got = subsampled_gaussian_rdp(MechanismParams(sigma, q, 1), alpha)
        assert got == pytest.approx(rdp_by_plain_sum(q, sigma, alpha), rel=1e-9, abs=1e-15)

    def test_log_space_survives_overflowing_terms(self):
        # exp(64*63/(2*0.1^2)) overflows a double; the log-space sum must not
        v = subsampled_gaussian_rdp(MechanismParams(0.1, 0.5, 1), 64)
        assert math.isfinite(v) and v > 1000

    @given(alpha=st.integers(2, 63), q=st.floats(0.001, 0.5), sigma=st.floats(0.5, 10))
    @settings(max_examples=100, deadline=None)
    def test_monotone_in_order(self, alpha, q, sigma):
        m = MechanismParams(sigma, q, 1)
        assert subsampled_gaussian_rdp(m, alpha + 1) >= subsampled_gaussian_rdp(m, alpha) * (1 - 1e-12)

    def test_bounded_by_unsubsampled(self):
        for a in (2, 5, 20):
            for q in (0.01, 0.2, 0.9):
                assert subsampled_gaussian_rdp(MechanismParams(1.3, q, 1), a) <= gaussian_rdp(1.3, a)

    @pytest.mark.parametrize("alpha", [1, 1.5, 0, True])
    def test_rejects_bad_orders(self, alpha):
        with pytest.raises(AccountingError):
            subsampled_gaussian_rdp(MechanismParams(1.0, 0.1, 1), alpha)

    @pytest.mark.parametrize("sigma,q,steps", [(0.0, 0.1, 1), (1.0, 1.5, 1), (1.0, 0.1, 0), (1.0, 0.1, 2.5)])
    def test_mechanism_validation(self, sigma, q, steps):
        with pytest.raises(AccountingError):
            MechanismParams(sigma, q, steps)


class TestConversion:
    def test_compose_is_additive(self):
        c = rdp_curve(MechanismParams(1.1, 0.02, 1))
        c3 = compose(c, 3)
        assert all(v3 == pytest.approx(3 * v) for v, v3 in zip(c.values, c3.values))

    def test_known_curve_conversion(self):
        curve = RdpCurve((2.0, 3.0), (0.5, 0.1))
        p, order = rdp_to_dp_with_order(curve, 1e-2)
        assert order == 3.0
        assert p.epsilon == pytest.approx(0.1 + math.log(100) / 2)

    @pytest.mark.parametrize(
        "sigma,q,steps", [(1.0, 0.01, 1000), (0.8, 0.05, 1000), (4.0, 0.2, 50), (1.1, 0.04, 253), (30.0, 0.5, 10)]
    )
    def test_epsilon_matches_independent_oracle(self, sigma, q, steps):
        assert epsilon_for(sigma, q, steps, 1e-8) == pytest.approx(epsilon_oracle(sigma, q, steps, 1e-8), rel=1e-9)

    def test_empty_curve_rejected(self):
        with pytest.raises(AccountingError):
            rdp_to_dp(RdpCurve((), ()), 1e-5)

    @pytest.mark.parametrize("delta", [0.0, 1.0, -1e-3])
    def test_delta_range(self, delta):
        with pytest.raises(AccountingError):
            rdp_to_dp(RdpCurve((2.0,), (0.1,)), delta)

    def test_account_returns_params(self):
        p = account(1.0, 0.01, 100)
        assert p.delta == 1e-8 and p.epsilon == epsilon_for(1.0, 0.01, 100)

    @given(sigma=st.floats(0.6, 5.0), q=st.floats(0.001, 0.3), steps=st.integers(1, 2000))
    @settings(max_examples=60, deadline=None)
    def test_epsilon_monotone(self, sigma, q, steps):
        e = epsilon_for(sigma, q, steps)
        assert epsilon_for(sigma * 1.1, q, steps) <= e + 1e-12
        assert epsilon_for(sigma, min(q * 1.1, 1.0), steps) >= e - 1e-12
        assert epsilon_for(sigma, q, steps + 1) >= e - 1e-12


class TestCalibration:
    @pytest.mark.parametrize("target", [1.0, 10.0, 400.0])
    def test_round_trip(self, target):
        sigma = calibrate_noise(PrivacyParams(target, 1e-8), 0.05, 1000)
        eps = epsilon_for(sigma, 0.05, 1000)
        assert target * 0.99 < eps <= target

    def test_result_is_minimal_within_tolerance(self):
        sigma = calibrate_noise(PrivacyParams(2.0, 1e-8), 0.02, 500)
        assert epsilon_for(sigma / 1.002, 0.02, 500) > 2.0

    def test_unreachable_target_raises(self):
        with pytest.raises(BracketError):
            calibrate_noise(PrivacyParams(1e-4, 1e-8), 0.5, 10_000, sigma_bounds=(0.1, 2.0))

    def test_lower_bound_already_enough(self):
        assert calibrate_noise(PrivacyParams(1e6, 1e-8), 0.01, 10, sigma_bounds=(0.5, 10.0)) == 0.5

    def test_bad_bounds(self):
        with pytest.raises(AccountingError):
            calibrate_noise(PrivacyParams(1.0, 1e-8), 0.01, 10, sigma_bounds=(2.0, 1.0))


class TestGroupPrivacy:
    @pytest.mark.parametrize("k", [1, 2, 5])
    def test_formula(self, k):
        g = group_privacy(PrivacyParams(0.5, 1e-8), k)
        assert g.epsilon == pytest.approx(0.5 * k)
        assert g.delta == pytest.approx(k * math.exp((k - 1) * 0.5) * 1e-8, rel=1e-12)
        assert not g.vacuous

    @pytest.mark.parametrize("k", [40, 99, 313, 10_000])
    def test_large_groups_are_vacuous(self, k):
        g = group_privacy(PrivacyParams(1.0, 1e-8), k)
        assert g.delta == 1.0 and g.vacuous

    def test_pure_dp(self):
        g = group_privacy(PrivacyParams(1.0, 0.0), 100)
        assert g.delta == 0.0 and g.epsilon == 100.0

    def test_bad_k(self):
        with pytest.raises(AccountingError):
            group_privacy(PrivacyParams(1.0, 1e-8), 0)


def test_scale_epsilon():
    assert scale_epsilon_for_granularity(1.0, 990) == 990.0
    assert scale_epsilon_for_granularity(10.0, 313) == 3130.0
    with pytest.raises(AccountingError):
        scale_epsilon_for_granularity(1.0, 0)


def test_steps_for_epochs():
    assert steps_for_epochs(1, 100, 10) == 10
    assert steps_for_epochs(0.25, 10, 4) == 1  # 0.625 rounds up
    assert steps_for_epochs(0.01, 10, 10) == 1
    assert steps_for_epochs(2.5, 10, 4) == 6  # 6.25


def test_privacy_params_validation():
    with pytest.raises(AccountingError):
        PrivacyParams(-1.0, 1e-5)
    with pytest.raises(AccountingError):
        PrivacyParams(1.0, 2.0)


def test_report_row():
    r = AccountingReport("x", 1.0, 0.1, 10, 1e-8, 2.0)
    assert list(r.row()) == list(AccountingReport.CSV_FIELDS)


def test_default_orders():
    assert DEFAULT_ORDERS[0] == 2 and DEFAULT_ORDERS[-1] == 64
    assert np.all(np.diff(DEFAULT_ORDERS) == 1)
