"""von Mises-Fisher densities, mixtures, sampling and estimation on S^{d-1}."""
from __future__ import annotations

from dataclasses import dataclass
from math import lgamma, log, pi

import numpy as np

from .errors import DegenerateInputError, DomainError, SaturationError, ShapeError
from .rng import RandomSource, as_source
from .special import _log_series_sum, bessel_ratio, log_bessel_i, SERIES_CUTOFF

KAPPA_MAX = 1e6
UNIT_TOL = 1e-9
TANGENT_RETRIES = 16


def normalize(v):
    """Scale ``v`` (or each row of a 2-D array) to unit Euclidean norm."""
    v = np.asarray(v, dtype=float)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        raise DegenerateInputError("cannot normalize a zero or non-finite vector")
    return v / norms


def _check_unit(z, name="z"):
    z = np.asarray(z, dtype=float)
    if z.ndim < 1 or z.shape[-1] < 2:
        raise ShapeError(f"{name} must have dimension >= 2")
    if np.any(np.abs(np.linalg.norm(z, axis=-1) - 1.0) > UNIT_TOL):
        raise DomainError(f"{name} must be unit-norm")
    return z


@dataclass(frozen=True)
class VmfComponent:
    mu: np.ndarray
    kappa: float

    def __post_init__(self):
        mu = _check_unit(np.array(self.mu, dtype=float), "mu")
        if mu.ndim != 1:
            raise ShapeError("mu must be a vector")
        if not self.kappa >= 0:
            raise DomainError(f"kappa must be >= 0, got {self.kappa}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "kappa", float(self.kappa))

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


@dataclass(frozen=True)
class VmfMixture:
    """Class-conditional vMF components with class priors.

    ``mus`` is (K, d), ``kappas`` and ``priors`` are length K.
    """

    mus: np.ndarray
    kappas: np.ndarray
    priors: np.ndarray

    def __post_init__(self):
        mus = np.atleast_2d(np.array(self.mus, dtype=float))
        kappas = np.atleast_1d(np.array(self.kappas, dtype=float))
        priors = np.atleast_1d(np.array(self.priors, dtype=float))
        _check_unit(mus, "mus")
        k = mus.shape[0]
        if k < 1 or kappas.shape != (k,) or priors.shape != (k,):
            raise ShapeError("mus, kappas and priors must agree on K")
        if np.any(kappas < 0):
            raise DomainError("kappas must be >= 0")
        if np.any(priors <= 0) or abs(priors.sum() - 1.0) > 1e-9:
            raise DomainError("priors must be positive and sum to 1")
        for name, arr in (("mus", mus), ("kappas", kappas), ("priors", priors)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_components(cls, components, priors):
        return cls(
            np.stack([c.mu for c in components]),
            np.array([c.kappa for c in components]),
            priors,
        )

    @property
    def num_classes(self) -> int:
        return self.mus.shape[0]

    @property
    def dim(self) -> int:
        return self.mus.shape[1]

    def component(self, y: int) -> VmfComponent:
        return VmfComponent(self.mus[y], self.kappas[y])

    @property
    def components(self):
        return [self.component(y) for y in range(self.num_classes)]


def log_norm_const(d: int, kappa):
    """log C_d(kappa), where C_d(kappa) = kappa^(d/2-1) / ((2 pi)^(d/2) I_{d/2-1}(kappa)).

    At kappa = 0 this is minus the log surface area of S^{d-1}.
    Accepts scalar or array ``kappa``.
    """
    if int(d) != d or d < 2:
        raise DomainError(f"dimension must be an integer >= 2, got {d}")
    nu = d / 2.0 - 1.0
    scalar = np.ndim(kappa) == 0
    k = np.atleast_1d(np.asarray(kappa, dtype=float))
    if np.any(k < 0) or np.any(np.isnan(k)):
        raise DomainError("kappa must be >= 0")
    base = -(d / 2.0) * log(2.0 * pi)
    out = np.empty_like(k)
    # nu*log(kappa) - log I_nu(kappa): on the series branch the kappa^nu
    # factors cancel analytically, so evaluate the cancelled form.
    small = k < max(SERIES_CUTOFF, nu)
    if np.any(small):
        out[small] = nu * log(2.0) + lgamma(nu + 1.0) - _log_series_sum(nu, k[small])
    big = ~small
    if np.any(big):
        kb = k[big]
        out[big] = nu * np.log(kb) - log_bessel_i(nu, kb)
    out += base
    return float(out[0]) if scalar else out


def log_norm_const_grad(d: int, kappa):
    """d/dkappa log C_d(kappa) = -I_{d/2}(kappa) / I_{d/2-1}(kappa)."""
    return -bessel_ratio(d / 2.0 - 1.0, kappa)


def mean_resultant_length(d: int, kappa):
    """A_d(kappa) = E[mu^T z] under vMF(mu, kappa)."""
    return bessel_ratio(d / 2.0 - 1.0, kappa)


def vmf_log_density(comp: VmfComponent, z):
    """log density of ``comp`` at unit vector(s) ``z`` (shape (d,) or (n, d))."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != comp.dim:
        raise ShapeError(f"z has dimension {z.shape[-1]}, component has {comp.dim}")
    return log_norm_const(comp.dim, comp.kappa) + comp.kappa * (z @ comp.mu)


def mixture_component_log_terms(mix: VmfMixture, z):
    """log pi_y + log vMF_y(z) for every class; shape (..., K)."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != mix.dim:
        raise ShapeError(f"z has dimension {z.shape[-1]}, mixture has {mix.dim}")
    logc = log_norm_const(mix.dim, mix.kappas)
    return np.log(mix.priors) + logc + (z @ mix.mus.T) * mix.kappas


def mixture_log_density(mix: VmfMixture, z):
    """log sum_y pi_y vMF(z | mu_y, kappa_y), max-shifted."""
    terms = mixture_component_log_terms(mix, z)
    m = terms.max(axis=-1, keepdims=True)
    out = np.squeeze(m, -1) + np.log(np.exp(terms - m).sum(axis=-1))
    return float(out) if np.ndim(out) == 0 else out


def tangent_orthonormal(mu, rng: RandomSource, size=None):
    """Uniform unit direction(s) orthogonal to ``mu`` by Gram-Schmidt on Gaussian noise.

    Returns shape (d,) when ``size`` is None, else (size, d).
    """
    rng = as_source(rng)
    mu = _check_unit(np.asarray(mu, dtype=float), "mu")
    d = mu.shape[0]
    n = 1 if size is None else int(size)
    out = np.empty((n, d))
    todo = np.arange(n)
    for _ in range(TANGENT_RETRIES + 1):
        noise = rng.normal((todo.size, d))
        noise -= np.outer(noise @ mu, mu)
        # second pass removes the residual left by rounding in the first
        noise -= np.outer(noise @ mu, mu)
        norms = np.linalg.norm(noise, axis=1)
        ok = norms >= 1e-8
        out[todo[ok]] = noise[ok] / norms[ok, None]
        todo = todo[~ok]
        if todo.size == 0:
            return out[0] if size is None else out
    raise DegenerateInputError(
        f"tangent construction failed after {TANGENT_RETRIES} retries"
    )


def _sample_cosines(kappa, d, n, rng):
    """Wood's rejection sampler for w = mu^T z."""
    m = d - 1
    if kappa == 0:
        return 1.0 - 2.0 * rng.beta(m / 2.0, m / 2.0, n)
    b = m / (2.0 * kappa + np.sqrt(4.0 * kappa**2 + m**2))
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + m * np.log(1.0 - x0**2)
    out = np.empty(n)
    todo = np.arange(n)
    while todo.size:
        z = rng.beta(m / 2.0, m / 2.0, todo.size)
        w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.uniform(size=todo.size)
        accept = kappa * w + m * np.log(1.0 - x0 * w) - c >= np.log(u)
        out[todo[accept]] = w[accept]
        todo = todo[~accept]
    return out


def sample_vmf(comp: VmfComponent, n: int, rng: RandomSource):
    """Draw ``n`` samples from ``comp``; returns an (n, d) array of unit rows."""
    if n < 1:
        raise DomainError("n must be >= 1")
    rng = as_source(rng)
    w = _sample_cosines(comp.kappa, comp.dim, n, rng)
    v = tangent_orthonormal(comp.mu, rng, size=n)
    z = w[:, None] * comp.mu + np.sqrt(np.maximum(1.0 - w**2, 0.0))[:, None] * v
    # clean up the last ulp so every row passes the unit-norm check
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def estimate_kappa(samples, mu=None, on_saturation: str = "raise"):
    """Concentration from the mean resultant length, r(d - r^2) / (1 - r^2).

    ``mu`` is accepted for interface symmetry; the estimate uses only the
    norm of the sample mean. With ``on_saturation="cap"`` a saturated cluster
    returns ``KAPPA_MAX`` instead of raising :class:`SaturationError`.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DomainError("estimate_kappa needs at least 2 samples")
    d = x.shape[1]
    if mu is not None and np.shape(mu) != (d,):
        raise ShapeError("mu dimension does not match samples")
    r = float(np.linalg.norm(x.mean(axis=0)))
    if r >= 1.0 - 1e-12:
        if on_saturation == "cap":
            return KAPPA_MAX
        raise SaturationError(
            f"mean resultant length {r!r} saturated; kappa capped at {KAPPA_MAX:g}",
            KAPPA_MAX,
        )
    kappa = r * (d - r * r) / (1.0 - r * r)
    return float(min(max(kappa, 0.0), KAPPA_MAX))


def mean_direction(samples):
    return normalize(np.asarray(samples, dtype=float).mean(axis=0))
