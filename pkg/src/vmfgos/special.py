"""Special functions in the log domain.

``log_bessel_i`` evaluates log I_nu(x) for real order nu >= -1/2 using the
ascending power series for small arguments and the Debye uniform asymptotic
expansion elsewhere. ``chi2_cdf`` goes through the regularized lower
incomplete gamma function (series below a+1, continued fraction above).
"""
from __future__ import annotations

from fractions import Fraction
from math import lgamma

import numpy as np

from .errors import DomainError

# Below this argument (or below the order, whichever is larger) the ascending
# series is summed; above it the Debye expansion is accurate to ~1e-11.
SERIES_CUTOFF = 20.0
DEBYE_TERMS = 12

_EPS = 1e-16
_SERIES_CHUNK = 32
_TINY = 1e-300


def _debye_polynomials(n_terms):
    """Coefficients of u_k(p), k < n_terms, by the standard recurrence

    u_{k+1}(p) = p^2 (1 - p^2) u_k'(p) / 2 + 1/8 * int_0^p (1 - 5 t^2) u_k(t) dt
    """
    polys = [[Fraction(1)]]
    for _ in range(n_terms - 1):
        u = polys[-1]
        deriv = [i * c for i, c in enumerate(u)][1:]
        nxt = [Fraction(0)] * (len(u) + 3)
        for i, c in enumerate(deriv):
            nxt[i + 2] += c / 2
            nxt[i + 4] -= c / 2
        # (1 - 5 t^2) u(t), integrated term by term
        for i, c in enumerate(u):
            nxt[i + 1] += c / 8 / (i + 1)
            nxt[i + 3] += -5 * c / 8 / (i + 3)
        while nxt and nxt[-1] == 0:
            nxt.pop()
        polys.append(nxt)
    return polys


def _shifted_coeffs(polys):
    # u_k(p) / nu^k = w^-k * sum_m c_{k,m} q^(m-k) with q = nu/w, w = sqrt(nu^2+x^2).
    out = []
    for k, u in enumerate(polys):
        c = np.array([float(u[m]) if m < len(u) else 0.0 for m in range(k, len(u))])
        out.append(c)
    return out


_DEBYE = _shifted_coeffs(_debye_polynomials(DEBYE_TERMS))


def _log_series_sum(nu, x):
    """log of sum_k (x^2/4)^k Gamma(nu+1) / (k! Gamma(k+nu+1)).

    The k=0 term is 1, so log I_nu(x) = nu*log(x/2) - lgamma(nu+1) + result.
    """
    x = np.asarray(x, dtype=float)
    q = 0.25 * x * x
    # plain summation is exact enough and much cheaper while it cannot
    # overflow; terms are generated a chunk at a time with a running product
    qmax = float(q.max(initial=0.0))
    with np.errstate(over="ignore", invalid="ignore"):
        term = np.ones_like(x)
        total = np.ones_like(x)
        k0 = 0
        while True:
            ks = np.arange(k0 + 1, k0 + _SERIES_CHUNK + 1, dtype=float)
            terms = term[..., None] * np.cumprod(q[..., None] / (ks * (ks + nu)), axis=-1)
            total = total + terms.sum(axis=-1)
            term = terms[..., -1]
            k0 += _SERIES_CHUNK
            if not np.all(np.isfinite(total)):
                break
            if k0 * (k0 + nu) > qmax and np.all(term <= total * 1e-17):
                break
    if np.all(np.isfinite(total)):
        return np.log(total)
    logq = np.log(np.maximum(q, _TINY))
    lse = np.zeros_like(x)
    lt = np.zeros_like(x)
    active = q > 0
    k = 0
    while np.any(active):
        k += 1
        lt = lt + logq - np.log(k) - np.log(k + nu)
        lse = np.where(active, np.logaddexp(lse, lt), lse)
        # stop once past the peak term and the tail is negligible
        past_peak = k * (k + nu) > q
        active = active & ~(past_peak & (lt - lse < -40.0))
        if k > 100000:  # pragma: no cover - unreachable for finite inputs
            raise RuntimeError("Bessel series failed to converge")
    return lse


def _log_bessel_debye(nu, x):
    """Debye expansion; valid for large sqrt(nu^2 + x^2), either sign of nu."""
    w = np.sqrt(nu * nu + x * x)
    s = 1.0 / w
    q = nu * s
    sk = np.ones_like(x)
    total = np.zeros_like(x)
    for k, c in enumerate(_DEBYE):
        poly = np.zeros_like(x)
        for coef in reversed(c):
            poly = poly * q + coef
        total = total + poly * sk
        sk = sk * s
    lead = w + nu * np.log(x / (nu + w)) - 0.5 * np.log(2.0 * np.pi * w)
    return lead + np.log(total)


def log_bessel_i(order, x):
    """Natural log of the modified Bessel function of the first kind.

    Parameters
    ----------
    order : float
        nu >= -0.5 (scalar).
    x : float or array_like
        Argument(s), x >= 0.

    Returns
    -------
    float or ndarray
        log I_nu(x). At x = 0 this is 0 for nu = 0, ``-inf`` for nu > 0 and
        ``+inf`` for nu = -0.5.
    """
    nu = float(order)
    if nu < -0.5:
        raise DomainError(f"Bessel order must be >= -0.5, got {nu}")
    scalar = np.ndim(x) == 0
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any(x < 0) or np.any(np.isnan(x)):
        raise DomainError("log_bessel_i requires x >= 0")
    out = np.empty_like(x)

    zero = x == 0
    if nu == 0:
        out[zero] = 0.0
    else:
        out[zero] = -np.inf if nu > 0 else np.inf

    small = (~zero) & (x < max(SERIES_CUTOFF, nu))
    if np.any(small):
        xs = x[small]
        out[small] = nu * np.log(xs / 2.0) - lgamma(nu + 1.0) + _log_series_sum(nu, xs)
    large = (~zero) & ~small
    if np.any(large):
        out[large] = _log_bessel_debye(nu, x[large])
    return float(out[0]) if scalar else out


def bessel_ratio(order, x):
    """I_{nu+1}(x) / I_nu(x), with the limit 0 at x = 0."""
    scalar = np.ndim(x) == 0
    x = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.zeros_like(x)
    pos = x > 0
    if np.any(pos):
        out[pos] = np.exp(log_bessel_i(order + 1.0, x[pos]) - log_bessel_i(order, x[pos]))
    return float(out[0]) if scalar else out


def _gamma_prefactor(a, x):
    return np.exp(a * np.log(np.maximum(x, _TINY)) - x - lgamma(a))


def gammainc_lower(a, x, max_iter=10000):
    """Regularized lower incomplete gamma P(a, x), vectorized over x."""
    if a <= 0:
        raise DomainError(f"gammainc_lower needs a > 0, got {a}")
    scalar = np.ndim(x) == 0
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any(x < 0):
        raise DomainError("gammainc_lower requires x >= 0")
    out = np.zeros_like(x)
    ser = (x > 0) & (x < a + 1.0)
    cf = x >= a + 1.0

    if np.any(ser):
        xs = x[ser]
        ap = np.full_like(xs, a)
        term = 1.0 / ap
        total = term.copy()
        live = np.ones(xs.shape, dtype=bool)
        for _ in range(max_iter):
            ap = ap + 1.0
            term = np.where(live, term * xs / ap, 0.0)
            total = total + term
            live = np.abs(term) > np.abs(total) * _EPS
            if not live.any():
                break
        out[ser] = total * _gamma_prefactor(a, xs)

    if np.any(cf):
        # modified Lentz evaluation of the continued fraction for Q(a, x)
        xc = x[cf]
        b = xc + 1.0 - a
        c = np.full_like(xc, 1.0 / _TINY)
        d = 1.0 / b
        h = d.copy()
        live = np.ones(xc.shape, dtype=bool)
        for i in range(1, max_iter):
            an = -i * (i - a)
            b = b + 2.0
            d = an * d + b
            d = np.where(np.abs(d) < _TINY, _TINY, d)
            c = b + an / c
            c = np.where(np.abs(c) < _TINY, _TINY, c)
            d = 1.0 / d
            delta = d * c
            h = np.where(live, h * delta, h)
            live = live & (np.abs(delta - 1.0) > _EPS)
            if not live.any():
                break
        out[cf] = 1.0 - _gamma_prefactor(a, xc) * h
    return float(out[0]) if scalar else out


def chi2_cdf(x, dof):
    """CDF of the chi-square distribution with ``dof`` degrees of freedom."""
    if dof <= 0:
        raise DomainError(f"dof must be positive, got {dof}")
    x = np.asarray(x, dtype=float)
    return gammainc_lower(0.5 * dof, np.maximum(x, 0.0) * 0.5)
