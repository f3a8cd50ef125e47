"""Geometry-guided virtual outlier synthesis.

Outliers are placed in a low-likelihood annulus around each class mean: a
scaled displacement xi is drawn uniformly from the upper tail of the
chi-square law with d-1 degrees of freedom, mapped to a cosine similarity
t = 1 - xi / (2 kappa), and composed with a random tangent direction,

    z = t * mu + sqrt(1 - t^2) * v_perp.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from math import sqrt

import numpy as np

from .errors import DomainError
from .rng import RandomSource, as_source
from .special import chi2_cdf
from .sphere import VmfComponent, VmfMixture, _check_unit, sample_vmf, tangent_orthonormal


@dataclass(frozen=True)
class Chi2Stats:
    dof: int
    mean: float
    std: float


@dataclass(frozen=True)
class AnnulusSpec:
    lo_sigma: float = 2.0
    hi_sigma: float = 3.0

    def __post_init__(self):
        if not (0 <= self.lo_sigma < self.hi_sigma):
            raise DomainError(
                f"annulus needs 0 <= lo < hi, got ({self.lo_sigma}, {self.hi_sigma})"
            )


@dataclass(frozen=True)
class SynthesizedOutlier:
    vector: np.ndarray
    anchor_class: int
    similarity: float
    displacement: float


@dataclass(frozen=True)
class OutlierBatch:
    """Column-oriented batch of synthesized outliers.

    Iterating yields :class:`SynthesizedOutlier` records.
    """

    vectors: np.ndarray  # (M, d)
    anchors: np.ndarray  # (M,) int
    similarities: np.ndarray  # (M,)
    displacements: np.ndarray  # (M,)

    def __len__(self):
        return self.vectors.shape[0]

    def __getitem__(self, i):
        return SynthesizedOutlier(
            self.vectors[i], int(self.anchors[i]), float(self.similarities[i]),
            float(self.displacements[i]),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def class_counts(self, num_classes):
        return np.bincount(self.anchors, minlength=num_classes)

    @classmethod
    def empty(cls, d):
        return cls(np.zeros((0, d)), np.zeros(0, dtype=int), np.zeros(0), np.zeros(0))

    @classmethod
    def from_outliers(cls, outliers, d=None):
        outliers = list(outliers)
        if not outliers:
            if d is None:
                raise DomainError("dimension required for an empty batch")
            return cls.empty(d)
        return cls(
            np.stack([o.vector for o in outliers]),
            np.array([o.anchor_class for o in outliers], dtype=int),
            np.array([o.similarity for o in outliers]),
            np.array([o.displacement for o in outliers]),
        )


def as_batch(outliers, d=None) -> OutlierBatch:
    if isinstance(outliers, OutlierBatch):
        return outliers
    return OutlierBatch.from_outliers(outliers, d)


def chi2_stats(d: int) -> Chi2Stats:
    if int(d) != d or d < 2:
        raise DomainError(f"dimension must be an integer >= 2, got {d}")
    dof = int(d) - 1
    return Chi2Stats(dof=dof, mean=float(dof), std=sqrt(2.0 * dof))


def annulus_bounds(stats: Chi2Stats, annulus: AnnulusSpec):
    return (stats.mean + annulus.lo_sigma * stats.std, stats.mean + annulus.hi_sigma * stats.std)


def sample_displacement(stats: Chi2Stats, annulus: AnnulusSpec, rng: RandomSource, size=None):
    """xi ~ Uniform(mean + lo*std, mean + hi*std)."""
    lo, hi = annulus_bounds(stats, annulus)
    return as_source(rng).uniform(lo, hi, size)


def displacement_to_similarity(xi, kappa):
    """t = clamp(1 - xi / (2 kappa), -1, 1)."""
    kappa = np.asarray(kappa, dtype=float)
    if np.any(kappa <= 0):
        raise DomainError("kappa must be > 0 for the similarity map")
    xi = np.asarray(xi, dtype=float)
    if np.any(xi < 0):
        raise DomainError("displacement must be >= 0")
    t = np.clip(1.0 - xi / (2.0 * kappa), -1.0, 1.0)
    return float(t) if t.ndim == 0 else t


def synthesize_outlier(mu_k, t, rng: RandomSource, size=None):
    """Unit vector(s) at cosine ``t`` from ``mu_k``; shape (d,) or (size, d).

    ``t`` may be an array matching ``size``.
    """
    mu_k = _check_unit(np.asarray(mu_k, dtype=float), "mu_k")
    t = np.asarray(t, dtype=float)
    if np.any(np.abs(t) > 1.0):
        raise DomainError("similarity must lie in [-1, 1]")
    v = tangent_orthonormal(mu_k, rng, size=size)
    if size is None:
        return float(t) * mu_k + sqrt(max(1.0 - float(t) ** 2, 0.0)) * v
    t = np.broadcast_to(t, (size,))
    return t[:, None] * mu_k + np.sqrt(np.maximum(1.0 - t**2, 0.0))[:, None] * v


def synthesize_balanced_batch(
    mix: VmfMixture, per_class: int, annulus: AnnulusSpec, rng: RandomSource,
    kappa_override=None,
) -> OutlierBatch:
    """``per_class`` outliers anchored on every class, regardless of priors.

    Each class draws from its own child stream of ``rng``. ``kappa_override``
    replaces the per-class kappa in the similarity map with a shared value.
    """
    if per_class < 1:
        raise DomainError("per_class must be >= 1")
    rng = as_source(rng)
    stats = chi2_stats(mix.dim)
    vecs, anchors, sims, disps = [], [], [], []
    for y in range(mix.num_classes):
        kappa = mix.kappas[y] if kappa_override is None else kappa_override
        if kappa <= 0:
            raise DomainError(f"class {y} has zero concentration; cannot synthesize outliers")
        stream = rng.child("gos", y)
        xi = sample_displacement(stats, annulus, stream, size=per_class)
        t = displacement_to_similarity(xi, kappa)
        vecs.append(synthesize_outlier(mix.mus[y], t, stream, size=per_class))
        anchors.append(np.full(per_class, y, dtype=int))
        sims.append(np.atleast_1d(t))
        disps.append(xi)
    return OutlierBatch(
        np.concatenate(vecs), np.concatenate(anchors), np.concatenate(sims), np.concatenate(disps)
    )


@dataclass(frozen=True)
class Chi2Check:
    ks: float
    d: int
    kappa: float
    n: int
    regime_warning: bool


def ks_distance(sample, cdf):
    """Two-sided Kolmogorov-Smirnov distance between a sample and a CDF."""
    x = np.sort(np.asarray(sample, dtype=float))
    n = x.size
    f = cdf(x)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - f), np.max(f - (i - 1) / n)))


def verify_chi2_equivalence(d: int, kappa: float, n: int, rng: RandomSource) -> Chi2Check:
    """KS distance between xi = 2 kappa (1 - mu^T z), z ~ vMF, and chi2_{d-1}.

    Outside the high-concentration regime (d >= 8, kappa >= 10 d) the result
    carries ``regime_warning=True``.
    """
    if n < 1:
        raise DomainError("n must be >= 1")
    if d < 2 or kappa <= 0:
        raise DomainError("need d >= 2 and kappa > 0")
    warn = d < 8 or kappa < 10 * d
    if warn:
        warnings.warn(
            f"d={d}, kappa={kappa} is outside the high-concentration regime",
            RuntimeWarning, stacklevel=2,
        )
    mu = np.zeros(d)
    mu[0] = 1.0
    z = sample_vmf(VmfComponent(mu, kappa), n, as_source(rng))
    # 1 - z_0 loses digits when z_0 ~ 1; use the tangent mass instead
    tangent_sq = np.sum(z[:, 1:] ** 2, axis=1)
    one_minus_t = tangent_sq / (1.0 + z[:, 0])
    xi = 2.0 * kappa * one_minus_t
    ks = ks_distance(xi, lambda x: chi2_cdf(x, d - 1))
    return Chi2Check(ks=ks, d=d, kappa=float(kappa), n=int(n), regime_warning=warn)
