import math

import mpmath as mp
import numpy as np
import pytest
import scipy.special as sps
import scipy.stats as st
from hypothesis import given, settings
from hypothesis import strategies as hs

from vmfgos.errors import DomainError
from vmfgos.special import bessel_ratio, chi2_cdf, gammainc_lower, log_bessel_i

mp.mp.dps = 40


def log_i_half(x):
    """log I_{1/2}(x) = log(sqrt(2/(pi x)) sinh x), in high precision."""
    x = mp.mpf(x)
    return float(mp.log(mp.sqrt(2 / (mp.pi * x)) * mp.sinh(x)))


def log_i_minus_half(x):
    x = mp.mpf(x)
    return float(mp.log(mp.sqrt(2 / (mp.pi * x)) * mp.cosh(x)))


def log_i_three_halves(x):
    x = mp.mpf(x)
    return float(mp.log(mp.sqrt(2 / (mp.pi * x)) * (mp.cosh(x) - mp.sinh(x) / x)))


def rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


@pytest.mark.parametrize("x", [0.5, 1.0, 10.0, 100.0, 1000.0, 1e4])
@pytest.mark.parametrize("oracle,order", [(log_i_half, 0.5), (log_i_minus_half, -0.5),
                                          (log_i_three_halves, 1.5)])
def test_half_integer_closed_forms(oracle, order, x):
    assert rel(log_bessel_i(order, x), oracle(x)) <= 1e-10


def test_half_order_values_from_closed_form():
    # independent evaluation of sqrt(2/(pi x)) sinh x at x = 1 and x = 100
    assert log_bessel_i(0.5, 1.0) == pytest.approx(-0.0643520, abs=5e-7)
    assert log_bessel_i(0.5, 100.0) == pytest.approx(96.7784764, abs=5e-7)


def test_order_zero_at_origin():
    assert log_bessel_i(0, 0.0) == 0.0
    assert log_bessel_i(2.5, 0.0) == -math.inf
    assert log_bessel_i(-0.5, 0.0) == math.inf


@pytest.mark.parametrize("order", [0.0, 1.0, 3.0, 7.5, 15.0, 31.0, 100.0, 511.0, 1499.0])
def test_matches_scipy_exponentially_scaled(order):
    x = np.logspace(-4, 4, 300)
    with np.errstate(divide="ignore"):
        ref = np.log(sps.ive(order, x)) + x
    ok = np.isfinite(ref)
    got = log_bessel_i(order, x)
    err = np.abs(got[ok] - ref[ok]) / np.maximum(1.0, np.abs(ref[ok]))
    assert err.max() <= 1e-10


def test_large_argument_does_not_overflow():
    v = log_bessel_i(3.0, 1e6)
    assert np.isfinite(v)
    assert v == pytest.approx(1e6 - 0.5 * math.log(2 * math.pi * 1e6), rel=1e-9)


def test_array_and_scalar_agree():
    xs = np.array([0.0, 0.3, 19.9, 20.1, 500.0])
    arr = log_bessel_i(4.0, xs)
    assert arr.shape == xs.shape
    for x, v in zip(xs, arr):
        assert log_bessel_i(4.0, float(x)) == v


def test_domain_errors():
    with pytest.raises(DomainError):
        log_bessel_i(1.0, -1.0)
    with pytest.raises(DomainError):
        log_bessel_i(-0.75, 1.0)
    with pytest.raises(DomainError):
        log_bessel_i(1.0, np.nan)


@settings(max_examples=200, deadline=None)
@given(nu=hs.floats(0.5, 60.0), x=hs.floats(1e-3, 3e3))
def test_three_term_recurrence(nu, x):
    # I_{nu-1}(x) - I_{nu+1}(x) = (2 nu / x) I_nu(x)
    lm, l0, lp = (log_bessel_i(nu - 1.0, x), log_bessel_i(nu, x), log_bessel_i(nu + 1.0, x))
    lhs = np.exp(lm - l0) - np.exp(lp - l0)
    assert lhs == pytest.approx(2 * nu / x, rel=1e-8)


@settings(max_examples=100, deadline=None)
@given(nu=hs.floats(0.0, 200.0), x=hs.floats(1e-2, 1e3))
def test_ratio_bounds(nu, x):
    r = bessel_ratio(nu, x)
    # Amos-type bounds: x / (nu + 1 + sqrt(x^2 + (nu+1)^2)) <= r < 1
    lower = x / (nu + 1 + math.sqrt(x * x + (nu + 1) ** 2))
    assert lower * (1 - 1e-10) <= r < 1.0


def test_ratio_against_scipy():
    for nu in (0.0, 2.0, 15.0, 31.0):
        x = np.logspace(-3, 3, 50)
        ref = sps.ive(nu + 1, x) / sps.ive(nu, x)
        np.testing.assert_allclose(bessel_ratio(nu, x), ref, rtol=1e-10)
    assert bessel_ratio(3.0, 0.0) == 0.0


@pytest.mark.parametrize("a", [0.5, 1.0, 3.5, 31.5, 200.0])
def test_incomplete_gamma_matches_scipy(a):
    x = np.concatenate([[0.0], np.logspace(-3, 3.5, 200)])
    np.testing.assert_allclose(gammainc_lower(a, x), sps.gammainc(a, x), rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("dof", [1, 2, 7, 63, 127])
def test_chi2_cdf_matches_scipy(dof):
    x = np.linspace(0, 4 * dof + 40, 400)
    np.testing.assert_allclose(chi2_cdf(x, dof), st.chi2.cdf(x, dof), rtol=1e-11, atol=1e-14)


def test_chi2_cdf_even_dof_closed_form():
    # dof = 2: F(x) = 1 - exp(-x/2)
    x = np.array([0.1, 1.0, 5.0, 30.0])
    np.testing.assert_allclose(chi2_cdf(x, 2), -np.expm1(-x / 2), rtol=1e-13)


def test_chi2_domain():
    with pytest.raises(DomainError):
        chi2_cdf(1.0, 0)
    with pytest.raises(DomainError):
        gammainc_lower(1.0, -1.0)
    assert chi2_cdf(-3.0, 4) == 0.0
