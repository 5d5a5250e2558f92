import math
from decimal import Decimal, localcontext
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maple.errors import BudgetExceededError, InvalidArgumentError
from maple.privacy import (PrivacyBudget, SpendLedger, calibrate_rho, compose, even_splits, fits_within,
                           gaussian_cost, rho_of_gaussian, sigma_for_rho, split_budget, zcdp_to_approx_dp)


@pytest.mark.parametrize("sens,sigma,rho", [(1, 1, 0.5), (2, 2, 0.5), (1, 10, 0.005)])
def test_rho_of_gaussian(sens, sigma, rho):
    assert rho_of_gaussian(sens, sigma) == pytest.approx(rho, rel=1e-12)


@pytest.mark.parametrize("sens,sigma", [(0, 1), (1, 0), (-1, 1)])
def test_rho_of_gaussian_rejects(sens, sigma):
    with pytest.raises(InvalidArgumentError):
        rho_of_gaussian(sens, sigma)


def test_gaussian_cost_noiseless_is_infinite():
    assert gaussian_cost(1.0, 0.0) == math.inf


@pytest.mark.parametrize("rhos,total", [([0.1, 0.2, 0.3], 0.6), ([], 0.0), ([0.5], 0.5), ([0.1, math.inf], math.inf)])
def test_compose(rhos, total):
    assert compose(rhos) == pytest.approx(total, rel=1e-15)


def test_compose_order_independent():
    rhos = [0.1, 1e-17, 0.3, 1e-17, 0.2]
    assert compose(rhos) == compose(reversed(rhos))


def test_zcdp_to_approx_dp_examples():
    assert zcdp_to_approx_dp(0.0, 1e-5) == 0
    assert zcdp_to_approx_dp(0.5, 1e-5) == pytest.approx(5.29853, abs=1e-5)
    assert zcdp_to_approx_dp(math.inf, 1e-5) == math.inf
    with pytest.raises(InvalidArgumentError):
        zcdp_to_approx_dp(0.5, 0.0)


def test_calibrate_rho_examples():
    rho = calibrate_rho(1.0, 1 / 28846)
    # independent high-precision solve of t^2 + 2 t sqrt(ln 28846) = 1, rho = t^2
    with localcontext() as ctx:
        ctx.prec = 50
        a = Decimal(28846).ln()
        t = (a + 1).sqrt() - a.sqrt()
    assert rho == pytest.approx(float(t * t), rel=1e-12)
    assert rho == pytest.approx(0.0232257, abs=1e-7)
    assert zcdp_to_approx_dp(rho, 1 / 28846) == pytest.approx(1.0, abs=1e-9)
    assert calibrate_rho(math.inf, 1e-5) == math.inf
    rho4 = calibrate_rho(4.0, 1 / 8396)
    assert abs(zcdp_to_approx_dp(rho4, 1 / 8396) - 4.0) <= 1e-9
    with pytest.raises(InvalidArgumentError):
        calibrate_rho(0.0, 1e-5)


@settings(max_examples=300, deadline=None)
@given(st.floats(1e-6, 100.0), st.floats(1e-12, 0.1))
def test_calibrate_roundtrip_property(eps, delta):
    assert abs(zcdp_to_approx_dp(calibrate_rho(eps, delta), delta) - eps) <= 1e-9


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-4, 50.0), st.floats(1e-12, 0.1))
def test_calibrate_rho_is_monotone(eps, delta):
    assert calibrate_rho(eps, delta) < calibrate_rho(eps * 1.5, delta)


@pytest.mark.parametrize("rho,ratio,parts", [(1.0, (1, 9), (0.1, 0.9)), (0.0, (1, 9), (0, 0)),
                                              (0.5, (1, 1), (0.25, 0.25))])
def test_split_budget(rho, ratio, parts):
    a, b = split_budget(rho, ratio)
    assert a == pytest.approx(parts[0], abs=1e-15) and b == pytest.approx(parts[1], abs=1e-15)


def test_split_budget_infinite_and_invalid():
    assert split_budget(math.inf) == (math.inf, math.inf)
    with pytest.raises(InvalidArgumentError):
        split_budget(1.0, (0, 1))


@settings(max_examples=300, deadline=None)
@given(st.floats(1e-9, 1e3), st.floats(0.01, 100), st.floats(0.01, 100))
def test_split_budget_never_exceeds(rho, a, b):
    m, p = split_budget(rho, (a, b))
    assert m >= 0 and p >= 0
    assert Fraction(m) + Fraction(p) <= Fraction(rho)


@settings(max_examples=300, deadline=None)
@given(st.floats(1e-9, 1e3), st.integers(1, 50))
def test_even_splits_never_exceed(rho, parts):
    shares = even_splits(rho, parts)
    assert len(shares) == parts
    assert fits_within(shares, rho)
    assert compose(shares) == pytest.approx(rho, rel=1e-12)


def test_sigma_for_rho_examples():
    assert sigma_for_rho(1, 0.5) == pytest.approx(1.0)
    assert sigma_for_rho(1, 0.005) == pytest.approx(10.0)
    assert sigma_for_rho(1, math.inf) == 0.0
    with pytest.raises(InvalidArgumentError):
        sigma_for_rho(1, 0.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.01, 10), st.floats(1e-6, 1e3))
def test_sigma_rho_inverse(sens, rho):
    assert rho_of_gaussian(sens, sigma_for_rho(sens, rho)) == pytest.approx(rho, rel=1e-12)


def test_fits_within_is_exact():
    # 0.1 + 0.2 rounds to 0.30000000000000004 while the exact sum is below it
    assert not fits_within([0.1, 0.2], 0.3)
    assert fits_within([0.1, 0.2], 0.30000000000000004)
    assert fits_within([math.inf], math.inf)
    assert not fits_within([math.inf], 1.0)


class TestSpendLedger:
    def test_charges_and_total(self):
        ledger = SpendLedger(1.0)
        ledger.charge("a/1", 0.25)
        ledger.charge("b", 0.5)
        assert ledger.total == 0.75
        assert ledger.remaining == pytest.approx(0.25)
        assert ledger.spent("a/") == 0.25
        assert ledger.labels("a") == ["a/1"]

    def test_overspend_is_refused_and_not_recorded(self):
        ledger = SpendLedger(1.0)
        ledger.charge("a", 0.9)
        with pytest.raises(BudgetExceededError):
            ledger.charge("b", 0.2)
        assert len(ledger) == 1
        assert not ledger.can_afford(0.2) and ledger.can_afford(0.1)

    def test_negative_charge(self):
        with pytest.raises(InvalidArgumentError):
            SpendLedger().charge("x", -1.0)

    def test_roundtrip_with_infinity(self):
        ledger = SpendLedger(math.inf)
        ledger.charge("aim/init", math.inf)
        again = SpendLedger.from_dict(ledger.to_dict())
        assert again.entries == ledger.entries and again.granted == math.inf
        assert ledger.to_dict()["total"] == "inf"

    def test_uncapped(self):
        ledger = SpendLedger()
        ledger.charge("x", 5.0)
        assert ledger.remaining == math.inf


def test_privacy_budget():
    b = PrivacyBudget(1.0, 1e-5)
    assert b.is_private and b.to_rho() == calibrate_rho(1.0, 1e-5)
    assert not PrivacyBudget(math.inf, 1e-5).is_private
    with pytest.raises(InvalidArgumentError):
        PrivacyBudget(1.0, 1.0)
