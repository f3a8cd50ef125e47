"""A tiny encoder/classifier with hand-written reverse-mode gradients.

The graph is fixed::

    x -> relu(W1 x + b1) -> W2 h + b2 = v -> z = v / |v| -> logits = Wc z + bc
                                                            energy -> head

so backpropagation is written out directly rather than through a tape.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateInputError, DomainError, NumericError, ShapeError, VmfGosError
from .gos import AnnulusSpec, OutlierBatch, synthesize_balanced_batch
from .losses import (
    EnergyHead, LossWeights, dgs_loss_batch, energy_grad, energy_score, epr_loss,
    tla_loss_batch, total_loss,
)
from .rng import RandomSource, as_source
from .sphere import KAPPA_MAX, VmfMixture, estimate_kappa

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"VGOS"
CHECKPOINT_VERSION = 1
DEGENERATE_NUDGE = 1e-12

PARAM_ORDER = (
    "enc_w1", "enc_b1", "enc_w2", "enc_b2", "cls_w", "cls_b",
    "head_w1", "head_b1", "head_w2", "head_b2",
)


class TinyNet:
    """One-hidden-layer encoder onto S^{d-1}, linear classifier, energy head."""

    def __init__(self, params: dict):
        missing = set(PARAM_ORDER) - set(params)
        if missing:
            raise ShapeError(f"missing parameters: {sorted(missing)}")
        self.params = {k: np.array(params[k], dtype=float) for k in PARAM_ORDER}
        p = self.params
        h_e, d_in = p["enc_w1"].shape
        d, h_e2 = p["enc_w2"].shape
        k, d2 = p["cls_w"].shape
        if h_e2 != h_e or d2 != d or p["enc_b1"].shape != (h_e,) or p["enc_b2"].shape != (d,) \
                or p["cls_b"].shape != (k,):
            raise ShapeError("inconsistent parameter shapes")
        self.dims = (d_in, h_e, d, k, p["head_w1"].shape[0])

    @classmethod
    def init(cls, d_in: int, hidden: int, d: int, num_classes: int, rng, head_width: int = 16):
        rng = as_source(rng)
        enc = rng.child("encoder")
        head = EnergyHead.init(rng.child("head"), head_width)
        params = {
            "enc_w1": enc.normal((hidden, d_in)) * np.sqrt(2.0 / d_in),
            "enc_b1": np.zeros(hidden),
            "enc_w2": enc.normal((d, hidden)) * np.sqrt(1.0 / hidden),
            "enc_b2": np.zeros(d),
            "cls_w": rng.child("classifier").normal((num_classes, d)) * np.sqrt(1.0 / d),
            "cls_b": np.zeros(num_classes),
            "head_w1": head.w1, "head_b1": head.b1, "head_w2": head.w2, "head_b2": head.b2,
        }
        return cls(params)

    @property
    def d_in(self):
        return self.dims[0]

    @property
    def feature_dim(self):
        return self.dims[2]

    @property
    def num_classes(self):
        return self.dims[3]

    @property
    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    @property
    def head(self) -> EnergyHead:
        p = self.params
        return EnergyHead(p["head_w1"], p["head_b1"], p["head_w2"], p["head_b2"])

    def copy(self) -> "TinyNet":
        return TinyNet({k: v.copy() for k, v in self.params.items()})

    # ---------------------------------------------------------------- forward

    def forward_batch(self, X, strict: bool = False):
        """Features, logits and the cache needed by :meth:`backward`."""
        p = self.params
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.d_in:
            raise ShapeError(f"input has dimension {X.shape[1]}, expected {self.d_in}")
        a1 = X @ p["enc_w1"].T + p["enc_b1"]
        h = np.maximum(a1, 0.0)
        v = h @ p["enc_w2"].T + p["enc_b2"]
        r = np.linalg.norm(v, axis=1)
        bad = r == 0
        if np.any(bad):
            if strict:
                raise DegenerateInputError("encoder produced a zero feature vector")
            v[bad, 0] += DEGENERATE_NUDGE
            r[bad] = DEGENERATE_NUDGE
        Z = v / r[:, None]
        logits = Z @ p["cls_w"].T + p["cls_b"]
        return Z, logits, {"X": X, "a1": a1, "h": h, "r": r, "Z": Z}

    def forward(self, x, strict: bool = False):
        """(unit feature, logits) for a single input vector."""
        Z, logits, _ = self.forward_batch(np.asarray(x, dtype=float)[None, :], strict)
        return Z[0], logits[0]

    def features(self, X):
        return self.forward_batch(X)[0]

    def logits(self, X):
        return self.forward_batch(X)[1]

    # --------------------------------------------------------------- backward

    def backward(self, cache, dZ=None, dlogits=None):
        """Parameter gradients and input gradient from upstream gradients.

        ``dZ`` is taken w.r.t. the unit feature; it is pushed through the
        normalization Jacobian (I - z z^T) / |v|.
        """
        p = self.params
        Z = cache["Z"]
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        dZ = np.zeros_like(Z) if dZ is None else np.array(dZ, dtype=float)
        if dlogits is not None:
            grads["cls_w"] = dlogits.T @ Z
            grads["cls_b"] = dlogits.sum(axis=0)
            dZ = dZ + dlogits @ p["cls_w"]
        dv = (dZ - Z * np.sum(Z * dZ, axis=1, keepdims=True)) / cache["r"][:, None]
        grads["enc_w2"] = dv.T @ cache["h"]
        grads["enc_b2"] = dv.sum(axis=0)
        da1 = (dv @ p["enc_w2"]) * (cache["a1"] > 0)
        grads["enc_w1"] = da1.T @ cache["X"]
        grads["enc_b1"] = da1.sum(axis=0)
        dX = da1 @ p["enc_w1"]
        return grads, dX

    # ------------------------------------------------------------- digest/io

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in PARAM_ORDER])

    def digest(self) -> str:
        return hashlib.sha256(self.flat().astype("<f8").tobytes()).hexdigest()


# ------------------------------------------------------------------ objective

@dataclass
class LossParts:
    dgs: float
    tla: float
    epr: float
    total: float


def loss_and_grad(net: TinyNet, X, y, mix: VmfMixture, gos: OutlierBatch, weights: LossWeights,
                  class_priors=None):
    """Joint loss on one batch and gradients for every parameter.

    Synthesized outliers are constants: they reach the loss only through the
    classifier and energy head. ``class_priors`` defaults to ``mix.priors``.
    """
    y = np.asarray(y, dtype=int)
    Z, logits, cache = net.forward_batch(X)
    K = net.num_classes
    priors = mix.priors if class_priors is None else np.asarray(class_priors, dtype=float)

    dgs, dZ, _ = dgs_loss_batch(mix, Z, y, gos, weights.tau)
    dZ = weights.dgs * dZ

    if weights.tla_adjust:
        tla, g_logits = tla_loss_batch(logits, y, priors, weights.epsilon)
    else:
        tla, g_logits = tla_loss_batch(logits, y, np.full(K, 1.0 / K), 1.0)
    dlogits = weights.alpha * g_logits

    T = weights.energy_temperature
    p = net.params
    G = gos.vectors
    logits_g = G @ p["cls_w"].T + p["cls_b"]
    e_id = energy_score(logits, T)
    e_g = energy_score(logits_g, T) if len(G) else np.zeros(0)
    epr = epr_loss(net.head, e_id, e_g)
    dlogits = dlogits + weights.beta * epr.grad_id[:, None] * energy_grad(logits, T)

    grads, _ = net.backward(cache, dZ, dlogits)
    if len(G):
        dlg = weights.beta * epr.grad_gos[:, None] * energy_grad(logits_g, T)
        grads["cls_w"] += dlg.T @ G
        grads["cls_b"] += dlg.sum(axis=0)
    for name, g in epr.grad_head.items():
        grads["head_" + name] = weights.beta * g

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}", component=name)
    parts = LossParts(dgs, tla, epr.value, total_loss(dgs, tla, epr.value, weights))
    return parts, grads


# ----------------------------------------------------------------- optimizers

class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params, grads):
        for k in PARAM_ORDER:
            params[k] -= self.lr * grads[k]


class Adam:
    def __init__(self, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k in PARAM_ORDER:
            g = grads[k]
            m = self.m.get(k, np.zeros_like(g))
            v = self.v.get(k, np.zeros_like(g))
            m = self.b1 * m + (1.0 - self.b1) * g
            v = self.b2 * v + (1.0 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str, lr: float):
    if name in ("adam", "adaptive-moment"):
        return Adam(lr)
    if name in ("sgd", "plain-gradient"):
        return SGD(lr)
    raise DomainError(f"unknown optimizer {name!r}")


# ------------------------------------------------------------------- training

@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 7
    weights: LossWeights = field(default_factory=LossWeights)
    annulus: AnnulusSpec = field(default_factory=AnnulusSpec)
    outliers_per_class: int = 4
    # shared kappa for the similarity map instead of per-class estimates
    kappa_override: float | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.outliers_per_class < 1:
            raise DomainError("epochs, batch_size and outliers_per_class must be positive")
        if self.learning_rate <= 0:
            raise DomainError("learning_rate must be positive")
        make_optimizer(self.optimizer, self.learning_rate)


@dataclass
class EpochRecord:
    epoch: int
    dgs: float
    tla: float
    epr: float
    total: float
    kappas: list


@dataclass
class TrainReport:
    epochs: list
    parameter_digest: str
    num_parameters: int
    wall_clock: float = field(default=0.0, compare=False)

    def to_dict(self):
        return asdict(self)

    @property
    def totals(self):
        return [e.total for e in self.epochs]


def refresh_mixture(net: TinyNet, X, y, num_classes: int) -> VmfMixture:
    """Per-class mean directions and concentrations of the current features."""
    Z = net.features(X)
    y = np.asarray(y, dtype=int)
    counts = np.bincount(y, minlength=num_classes)
    if np.any(counts == 0):
        raise DomainError(f"classes without samples: {np.flatnonzero(counts == 0).tolist()}")
    kappa_global = estimate_kappa(Z, on_saturation="cap")
    mus, kappas = [], []
    for c in range(num_classes):
        Zc = Z[y == c]
        m = Zc.mean(axis=0)
        n = np.linalg.norm(m)
        mus.append(m / n if n > 0 else Zc[0])
        if len(Zc) < 2:
            log.info("class %d has %d sample(s); using global kappa %.3g", c, len(Zc), kappa_global)
            kappas.append(kappa_global)
        else:
            kappas.append(estimate_kappa(Zc, on_saturation="cap"))
    kappas = np.clip(np.array(kappas), 1e-6, KAPPA_MAX)
    return VmfMixture(np.stack(mus), kappas, counts / counts.sum())


def train(net: TinyNet, X, y, config: TrainConfig, progress=None) -> TrainReport:
    """Optimize the joint objective in place; returns the per-epoch report.

    Class statistics are refreshed from a clean forward pass at the start of
    each epoch. ``progress`` is an optional callable receiving each
    :class:`EpochRecord`.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if X.shape[0] == 0:
        raise DomainError("empty training set")
    K = net.num_classes
    rng = RandomSource(config.seed)
    opt = make_optimizer(config.optimizer, config.learning_rate)
    start = time.perf_counter()
    records = []
    n = X.shape[0]
    for epoch in range(config.epochs):
        mix = refresh_mixture(net, X, y, K)
        order = rng.child("shuffle", epoch).permutation(n)
        sums = np.zeros(3)
        nb = 0
        for b0 in range(0, n, config.batch_size):
            idx = order[b0:b0 + config.batch_size]
            gos = synthesize_balanced_batch(
                mix, config.outliers_per_class, config.annulus,
                rng.child("gos", epoch, nb), kappa_override=config.kappa_override,
            )
            parts, grads = loss_and_grad(net, X[idx], y[idx], mix, gos, config.weights)
            opt.step(net.params, grads)
            sums += (parts.dgs, parts.tla, parts.epr)
            nb += 1
        dgs, tla, epr = (sums / nb).tolist()
        rec = EpochRecord(epoch, dgs, tla, epr, total_loss(dgs, tla, epr, config.weights),
                          mix.kappas.tolist())
        records.append(rec)
        if progress is not None:
            progress(rec)
    return TrainReport(records, net.digest(), net.num_parameters, time.perf_counter() - start)


# ---------------------------------------------------------------- checkpoints

class CheckpointError(VmfGosError):
    pass


def save_checkpoint(net: TinyNet, path, config: dict | None = None, seed: int | None = None):
    """Binary parameter file plus a JSON sidecar (``<path>.json``)."""
    path = Path(path)
    header = CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION) + struct.pack("<5I", *net.dims)
    payload = net.flat().astype("<f8").tobytes()
    path.write_bytes(header + payload)
    sidecar = {"config": config or {}, "seed": seed, "dims": list(net.dims),
               "parameter_digest": net.digest()}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_checkpoint(path) -> TinyNet:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a VGOS checkpoint")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    d_in, h_e, d, k, h = struct.unpack_from("<5I", raw, 8)
    shapes = {
        "enc_w1": (h_e, d_in), "enc_b1": (h_e,), "enc_w2": (d, h_e), "enc_b2": (d,),
        "cls_w": (k, d), "cls_b": (k,), "head_w1": (h,), "head_b1": (h,), "head_w2": (h,),
        "head_b2": (1,),
    }
    flat = np.frombuffer(raw, dtype="<f8", offset=28)
    need = sum(int(np.prod(s)) for s in shapes.values())
    if flat.size != need:
        raise CheckpointError(f"checkpoint holds {flat.size} values, expected {need}")
    params, i = {}, 0
    for name in PARAM_ORDER:
        size = int(np.prod(shapes[name]))
        params[name] = flat[i:i + size].reshape(shapes[name]).astype(float)
        i += size
    return TinyNet(params)
