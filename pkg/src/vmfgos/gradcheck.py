"""Central finite-difference checks of every analytic gradient.

Each checker draws a random configuration, evaluates the analytic gradient,
and compares it to central differences. The error for one gradient array is
max|analytic - numeric| / max(max|numeric|, 1e-8).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gos import AnnulusSpec, OutlierBatch, synthesize_balanced_batch
from .losses import EnergyHead, LossWeights, dgs_loss_batch, epr_loss, tla_loss_batch
from .metrics import log_softmax_at_prediction, odin_input_grad
from .nn import PARAM_ORDER, TinyNet, loss_and_grad, refresh_mixture
from .rng import RandomSource
from .sphere import VmfMixture, normalize

STEP = 1e-5


def rel_error(analytic, numeric) -> float:
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    scale = max(float(np.max(np.abs(numeric), initial=0.0)), 1e-8)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def numeric_grad(f, x, step=STEP):
    """Central differences of scalar ``f`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    for i in range(x.size):
        old = x.flat[i]
        x.flat[i] = old + step
        fp = f()
        x.flat[i] = old - step
        fm = f()
        x.flat[i] = old
        g.flat[i] = (fp - fm) / (2 * step)
    return g


def random_mixture(rng: RandomSource, d: int, K: int) -> VmfMixture:
    priors = rng.uniform(0.2, 1.0, K)
    return VmfMixture(normalize(rng.normal((K, d))), rng.uniform(1.0, 30.0, K), priors / priors.sum())


def _random_outliers(rng, mix, M):
    per = max(1, -(-M // mix.num_classes))
    return synthesize_balanced_batch(mix, per, AnnulusSpec(), rng).vectors[:M]


# ------------------------------------------------------------ single checks

def check_dgs(rng, d=8, K=4, M=6, n=3, grad_fn=dgs_loss_batch):
    mix = random_mixture(rng, d, K)
    Z = normalize(rng.normal((n, d)))
    y = rng.generator.integers(0, K, n)
    G = _random_outliers(rng, mix, M)
    tau = float(rng.uniform(0.1, 1.0))
    _, grad, _ = grad_fn(mix, Z, y, G, tau)
    num = numeric_grad(lambda: dgs_loss_batch(mix, Z, y, G, tau)[0], Z)
    return {"z": rel_error(grad, num)}


def check_tla(rng, K=4, n=3, grad_fn=tla_loss_batch):
    logits = rng.normal((n, K)) * 2.0
    y = rng.generator.integers(0, K, n)
    priors = rng.uniform(0.05, 1.0, K)
    priors /= priors.sum()
    eps = float(rng.uniform(0.3, 2.0))
    _, grad = grad_fn(logits, y, priors, eps)
    num = numeric_grad(lambda: tla_loss_batch(logits, y, priors, eps)[0], logits)
    return {"logits": rel_error(grad, num)}


def check_epr(rng, width=8, n_id=5, n_gos=6, grad_fn=epr_loss):
    head = EnergyHead(rng.normal(width), rng.normal(width), rng.normal(width), rng.normal(1))
    e_id = rng.normal(n_id) * 2.0 - 3.0
    e_gos = rng.normal(n_gos) * 2.0 - 1.0
    res = grad_fn(head, e_id, e_gos)
    f = lambda: epr_loss(head, e_id, e_gos).value  # noqa: E731
    out = {f"head.{k}": rel_error(res.grad_head[k], numeric_grad(f, v)) for k, v in head.params().items()}
    out["id_energies"] = rel_error(res.grad_id, numeric_grad(f, e_id))
    out["gos_energies"] = rel_error(res.grad_gos, numeric_grad(f, e_gos))
    return out


def random_net(rng, d_in=8, hidden=8, d=8, K=4, head_width=8):
    net = TinyNet.init(d_in, hidden, d, K, rng.child("net"), head_width=head_width)
    # zero biases let a sample hit the non-differentiable zero-feature point,
    # and a zero output layer would hide head gradients
    for name in ("enc_b1", "enc_b2", "cls_b", "head_b1"):
        net.params[name] = 0.5 * rng.normal(net.params[name].shape)
    net.params["head_w2"] = rng.normal(head_width)
    net.params["head_b2"] = rng.normal(1)
    return net


def check_total(rng, d=8, K=4, M=6, n=6, coords=3, grad_fn=loss_and_grad):
    """Whole-network check of the combined objective.

    Differencing every weight of the network costs hundreds of loss
    evaluations per trial, so each parameter array is probed at ``coords``
    random entries plus one random unit direction. Errors are scaled by the
    largest analytic entry of that array.
    """
    net = random_net(rng, d=d, K=K)
    X = rng.normal((n, net.d_in))
    y = np.arange(n) % K
    mix = refresh_mixture(net, X, y, K)
    G = _random_outliers(rng, mix, M)
    gos = OutlierBatch(G, np.zeros(len(G), int), np.zeros(len(G)), np.zeros(len(G)))
    w = LossWeights(tau=float(rng.uniform(0.2, 1.0)), epsilon=float(rng.uniform(0.5, 2.0)),
                    alpha=float(rng.uniform(0.1, 1.0)), beta=float(rng.uniform(0.1, 1.0)))
    _, grads = grad_fn(net, X, y, mix, gos, w)

    def f():
        return loss_and_grad(net, X, y, mix, gos, w)[0].total

    out = {}
    for name in PARAM_ORDER:
        p = net.params[name]
        g = np.asarray(grads[name], dtype=float)
        scale = max(float(np.max(np.abs(g))), 1e-8)
        worst = 0.0
        picks = rng.permutation(p.size)[:coords]
        for i in picks:
            old = p.flat[i]
            p.flat[i] = old + STEP
            fp = f()
            p.flat[i] = old - STEP
            fm = f()
            p.flat[i] = old
            worst = max(worst, abs(g.flat[i] - (fp - fm) / (2 * STEP)) / scale)
        u = rng.normal(p.shape)
        u /= np.linalg.norm(u)
        base = p.copy()
        p[...] = base + STEP * u
        fp = f()
        p[...] = base - STEP * u
        fm = f()
        p[...] = base
        worst = max(worst, abs(float(np.sum(g * u)) - (fp - fm) / (2 * STEP)) / scale)
        out[name] = float(worst)
    return out


def check_odin(rng, d_in=8, K=4, n=4, temp=None, grad_fn=odin_input_grad):
    net = random_net(rng, d_in=d_in, K=K)
    X = rng.normal((n, d_in))
    temp = float(rng.uniform(0.5, 10.0)) if temp is None else temp
    grad = grad_fn(net, X, temp)
    num = np.zeros_like(X)
    # the predicted class is held fixed while differencing
    _, pred = log_softmax_at_prediction(net, X, temp)
    for r in range(n):
        x = X[r:r + 1].copy()

        def f():
            logits = net.logits(x)[0] / temp
            m = logits.max()
            return logits[pred[r]] - (m + np.log(np.exp(logits - m).sum()))
        num[r] = numeric_grad(f, x)[0]
    return {"input": rel_error(grad, num)}


CHECKS = {
    "dgs": check_dgs,
    "tla": check_tla,
    "epr": check_epr,
    "total": check_total,
    "odin": check_odin,
}


@dataclass
class GradcheckReport:
    tol: float
    trials: int
    max_error: dict = field(default_factory=dict)  # component -> parameter -> worst error

    @property
    def passed(self) -> dict:
        return {c: all(e <= self.tol for e in errs.values()) for c, errs in self.max_error.items()}

    @property
    def all_passed(self) -> bool:
        return all(self.passed.values())

    def failures(self):
        return [c for c, ok in self.passed.items() if not ok]

    def to_dict(self):
        return {"tol": self.tol, "trials": self.trials, "passed": self.passed,
                "max_relative_error": self.max_error}


def run_gradcheck(trials: int = 100, tol: float = 1e-4, seed: int = 0, checks=None) -> GradcheckReport:
    """Run every checker ``trials`` times; ``checks`` can override the table."""
    checks = dict(CHECKS if checks is None else checks)
    rep = GradcheckReport(tol, trials)
    root = RandomSource(seed).child("gradcheck")
    for name, fn in checks.items():
        worst = {}
        for t in range(trials):
            for k, e in fn(root.child(name, t)).items():
                worst[k] = max(worst.get(k, 0.0), e)
        rep.max_error[name] = worst
    return rep
