"""Training objective: energy score, DGS, TLA, EPR and their weighted sum.

All losses return ``(value, grad)`` pairs with analytic gradients. DGS and its
Psi/Omega terms are evaluated in the log domain.

The ID and OOD terms of DGS are written with factors that cancel:

    Psi(z, j) = pi_j Z(kt_y) Z(kappa_j) / (pi_y Z(kappa_j) Z(kt_j))
    Omega(z, g) = Z(kt_y) Z(kappa_k) / (pi_y Z(kappa_k) Z(kt_g))

with kt_j = ||kappa_j mu_j + z / tau|| and kt_g = ||(g + z) / tau||. Only the
cancelled forms are computed here.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, NumericError, ShapeError
from .gos import as_batch
from .rng import RandomSource, as_source
from .sphere import VmfMixture, log_norm_const, log_norm_const_grad


@dataclass(frozen=True)
class LossWeights:
    tau: float = 0.1
    epsilon: float = 1.0
    alpha: float = 1.0
    beta: float = 0.1
    dgs: float = 1.0
    # temperature of the energy fed to the EPR head; None reuses epsilon
    epr_temperature: float | None = None
    # False swaps TLA for plain cross-entropy (uniform priors, unit temperature)
    tla_adjust: bool = True

    def __post_init__(self):
        if self.tau <= 0 or self.epsilon <= 0:
            raise DomainError("temperatures must be positive")
        if self.epr_temperature is not None and self.epr_temperature <= 0:
            raise DomainError("EPR temperature must be positive")
        if self.alpha < 0 or self.beta < 0 or self.dgs < 0:
            raise DomainError("loss weights must be non-negative")

    @property
    def energy_temperature(self) -> float:
        return self.epsilon if self.epr_temperature is None else self.epr_temperature


def _logsumexp(a, axis=-1):
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis) + np.log(np.sum(np.exp(a - m), axis=axis))


def _nll_rows(logits, target):
    """-log softmax(logits)[i, target[i]] per row.

    Written as log(1 + sum_{j != y} exp(l_j - l_y)) so a near-zero loss keeps
    its relative precision instead of cancelling two large log-sum-exps.
    """
    rows = np.arange(logits.shape[0])
    diff = logits - logits[rows, target][:, None]
    diff[rows, target] = -np.inf
    m = np.maximum(np.max(diff, axis=1), 0.0)
    s = np.sum(np.exp(diff - m[:, None]), axis=1)
    with np.errstate(over="ignore"):
        return np.where(m > 0, m + np.log(np.exp(-m) + s), np.log1p(s))


def _softmax(a, axis=-1):
    m = np.max(a, axis=axis, keepdims=True)
    e = np.exp(a - m)
    return e / e.sum(axis=axis, keepdims=True)


def _check_finite(x, what):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite {what}", component=what)


# --------------------------------------------------------------------- energy

def energy_score(logits, temperature: float = 1.0):
    """-T * logsumexp(logits / T) over the last axis."""
    if temperature <= 0:
        raise DomainError("temperature must be positive")
    logits = np.asarray(logits, dtype=float)
    _check_finite(logits, "logits")
    out = -temperature * _logsumexp(logits / temperature)
    return float(out) if np.ndim(out) == 0 else out


def energy_grad(logits, temperature: float = 1.0):
    """d energy / d logits = -softmax(logits / T)."""
    return -_softmax(np.asarray(logits, dtype=float) / temperature)


# ------------------------------------------------------------ dynamic kappas

def dynamic_kappa_id(comp, z, tau: float):
    """||kappa mu + z / tau||."""
    return float(np.linalg.norm(comp.kappa * comp.mu + np.asarray(z, dtype=float) / tau))


def dynamic_kappa_gos(z_gos, z, tau: float):
    """||z_gos + z|| / tau."""
    return float(np.linalg.norm(np.asarray(z_gos) + np.asarray(z)) / tau)


def psi_id(mix: VmfMixture, z, y: int, j: int, tau: float) -> float:
    """log Psi_id(z, j) for true class ``y``."""
    if tau <= 0:
        raise DomainError("tau must be positive")
    d = mix.dim
    kt_y = dynamic_kappa_id(mix.component(y), z, tau)
    kt_j = dynamic_kappa_id(mix.component(j), z, tau)
    return float(
        np.log(mix.priors[j]) - np.log(mix.priors[y])
        + log_norm_const(d, kt_y) - log_norm_const(d, kt_j)
    )


def omega_ood(mix: VmfMixture, z, y: int, outlier, tau: float) -> float:
    """log Omega_ood(z, outlier) for true class ``y``."""
    if tau <= 0:
        raise DomainError("tau must be positive")
    d = mix.dim
    g = outlier.vector if hasattr(outlier, "vector") else np.asarray(outlier)
    kt_y = dynamic_kappa_id(mix.component(y), z, tau)
    kt_g = dynamic_kappa_gos(g, z, tau)
    return float(-np.log(mix.priors[y]) + log_norm_const(d, kt_y) - log_norm_const(d, kt_g))


# ------------------------------------------------------------------------ DGS

def _norm_and_unit(v):
    n = np.linalg.norm(v, axis=-1)
    safe = np.where(n > 0, n, 1.0)
    return n, np.where((n > 0)[..., None], v / safe[..., None], 0.0)


def dgs_terms(mix: VmfMixture, Z, gos_vectors, tau: float):
    """Per-sample logits of the DGS softmax and their z-Jacobian factors.

    Returns ``a`` (n, K) with a_ij = log pi_j - log Z(kt_ij), ``b`` (n, M)
    with b_im = -log Z(kt_im), and the direction/derivative arrays needed for
    the gradient.
    """
    d = mix.dim
    n, K = Z.shape[0], mix.num_classes
    U = mix.kappas[:, None] * mix.mus  # (K, d)
    V = U[None, :, :] + Z[:, None, :] / tau  # (n, K, d)
    W = (gos_vectors[None, :, :] + Z[:, None, :]) / tau  # (n, M, d)
    kt, Vhat = _norm_and_unit(V)
    kg, What = _norm_and_unit(W)
    # one pass over both families keeps the Bessel evaluations batched
    both = np.concatenate([kt.ravel(), kg.ravel()])
    logz = log_norm_const(d, both)
    dlogz = log_norm_const_grad(d, both)
    split = n * K
    a = np.log(mix.priors)[None, :] - logz[:split].reshape(kt.shape)
    da = -dlogz[:split].reshape(kt.shape)  # d a / d kt >= 0
    b = -logz[split:].reshape(kg.shape)
    db = -dlogz[split:].reshape(kg.shape)
    return a, b, da, db, Vhat, What


def dgs_loss_batch(mix: VmfMixture, Z, y, outliers, tau: float):
    """Mean DGS loss over a batch of unit features and its gradient w.r.t. ``Z``.

    ``outliers`` is an :class:`~vmfgos.gos.OutlierBatch`, a list of
    :class:`~vmfgos.gos.SynthesizedOutlier`, or an (M, d) array.
    """
    if tau <= 0:
        raise DomainError("tau must be positive")
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=int))
    n, d = Z.shape
    if d != mix.dim or y.shape != (n,):
        raise ShapeError("feature/label shapes do not match the mixture")
    G = outliers if isinstance(outliers, np.ndarray) else as_batch(outliers, d).vectors
    G = np.asarray(G, dtype=float).reshape(-1, d)
    a, b, da, db, Vhat, What = dgs_terms(mix, Z, G, tau)
    logits = np.concatenate([a, b], axis=1)
    rows = np.arange(n)
    losses = _nll_rows(logits, y)
    p = _softmax(logits, axis=1)
    ga = p[:, : a.shape[1]].copy()
    ga[rows, y] -= 1.0
    gb = p[:, a.shape[1]:]
    # d kt / d z = unit(V) / tau for both families
    grad = (np.einsum("nk,nkd->nd", ga * da, Vhat) + np.einsum("nm,nmd->nd", gb * db, What)) / tau
    return float(losses.mean()), grad / n, losses


def dgs_loss(mix: VmfMixture, z, y: int, outliers, tau: float):
    """Single-sample DGS loss and its gradient w.r.t. ``z``."""
    value, grad, _ = dgs_loss_batch(mix, np.asarray(z, dtype=float)[None, :], [y], outliers, tau)
    return value, grad[0]


# ------------------------------------------------------------------------ TLA

def tla_loss_batch(logits, y, priors, epsilon: float):
    """Mean logit-adjusted cross-entropy and its gradient w.r.t. ``logits``."""
    if epsilon <= 0:
        raise DomainError("epsilon must be positive")
    logits = np.atleast_2d(np.asarray(logits, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=int))
    priors = np.asarray(priors, dtype=float)
    _check_finite(logits, "logits")
    if priors.shape != (logits.shape[1],):
        raise ShapeError("priors must have one entry per class")
    if np.any(priors[y] <= 0):
        raise DomainError("true class has zero prior")
    with np.errstate(divide="ignore"):
        s = np.log(priors)[None, :] + logits / epsilon
    n = logits.shape[0]
    rows = np.arange(n)
    losses = _logsumexp(s, axis=1) - s[rows, y]
    g = _softmax(s, axis=1)
    g[rows, y] -= 1.0
    return float(losses.mean()), g / (epsilon * n)


def tla_loss(logits, y: int, priors, epsilon: float):
    value, grad = tla_loss_batch(np.asarray(logits, dtype=float)[None, :], [y], priors, epsilon)
    return value, grad[0]


# ------------------------------------------------------------------------ EPR

def _relu(x):
    return np.maximum(x, 0.0)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class EnergyHead:
    """Scalar MLP  e -> w2 . relu(w1 e + b1) + b2."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray = field(default_factory=lambda: np.zeros(1))

    @classmethod
    def init(cls, rng: RandomSource, width: int = 16, scale: float = 1.0):
        """Random hidden layer, zero output layer (so the head starts at 0)."""
        rng = as_source(rng)
        return cls(
            w1=scale * rng.normal(width),
            b1=scale * rng.normal(width),
            w2=np.zeros(width),
            b2=np.zeros(1),
        )

    @property
    def width(self) -> int:
        return self.w1.shape[0]

    def params(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def forward(self, e):
        e = np.asarray(e, dtype=float)
        pre = e[..., None] * self.w1 + self.b1
        return _relu(pre) @ self.w2 + self.b2[0], pre

    def __call__(self, e):
        return self.forward(e)[0]


@dataclass
class EprResult:
    value: float
    grad_head: dict
    grad_id: np.ndarray
    grad_gos: np.ndarray
    empty_side: bool


def epr_loss(head: EnergyHead, id_energies, gos_energies) -> EprResult:
    """mean_gos softplus(-phi(E)) + mean_id softplus(phi(E)).

    Equivalent to -log sigma(phi) on outliers and -log(1 - sigma(phi)) on ID.
    An empty side contributes zero and sets ``empty_side``.
    """
    e_id = np.atleast_1d(np.asarray(id_energies, dtype=float))
    e_gos = np.atleast_1d(np.asarray(gos_energies, dtype=float))
    _check_finite(e_id, "id_energies")
    _check_finite(e_gos, "gos_energies")
    gh = {k: np.zeros_like(v) for k, v in head.params().items()}
    value = 0.0
    grads = []
    for e, sign in ((e_gos, -1.0), (e_id, 1.0)):
        if e.size == 0:
            grads.append(np.zeros(0))
            continue
        out, pre = head.forward(e)
        value += float(_softplus(sign * out).mean())
        dout = sign * _sigmoid(sign * out) / e.size
        act = pre > 0
        gh["w2"] += _relu(pre).T @ dout
        gh["b2"] += dout.sum()
        dpre = dout[:, None] * head.w2[None, :] * act
        gh["w1"] += dpre.T @ e
        gh["b1"] += dpre.sum(axis=0)
        grads.append(dpre @ head.w1)
    return EprResult(value, gh, grads[1], grads[0], e_id.size == 0 or e_gos.size == 0)


# ---------------------------------------------------------------------- total

def total_loss(dgs: float, tla: float, epr: float, weights: LossWeights) -> float:
    """dgs_weight * L_dgs + alpha * L_tla + beta * L_epr."""
    parts = np.array([dgs, tla, epr], dtype=float)
    _check_finite(parts, "loss parts")
    return float(weights.dgs * dgs + weights.alpha * tla + weights.beta * epr)
