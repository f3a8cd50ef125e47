"""Post-hoc OOD scoring (ODIN perturbation + energy) and detection metrics.

Metric functions take *detection* scores: higher means more likely OOD, and
OOD is the positive class. A sample is flagged OOD when ``score >= t``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import DomainError, NumericError
from .losses import energy_score
from .rng import RandomSource

AS_IS = "as-is"
FLIPPED = "flipped"
ACC_AT_FPR_LEVELS = (0.0, 0.001, 0.01, 0.1)
_LEVEL_SLACK = 1e-9


@dataclass(frozen=True)
class OdinConfig:
    eta: float = 0.0
    temp: float = 1.0

    def __post_init__(self):
        if self.eta < 0:
            raise DomainError("eta must be >= 0")
        if self.temp <= 0:
            raise DomainError("ODIN temperature must be positive")


@dataclass(frozen=True)
class ScoredSet:
    id_scores: np.ndarray
    ood_scores: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.id_scores, dtype=float).ravel()
        b = np.asarray(self.ood_scores, dtype=float).ravel()
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise NumericError("scores must be finite", component="scores")
        object.__setattr__(self, "id_scores", a)
        object.__setattr__(self, "ood_scores", b)

    def negated(self) -> "ScoredSet":
        return ScoredSet(-self.id_scores, -self.ood_scores)

    def _require(self):
        if self.id_scores.size == 0 or self.ood_scores.size == 0:
            raise DomainError("both score populations must be non-empty")


# ----------------------------------------------------------------------- ODIN

def _softmax(a):
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_at_prediction(net, X, temp):
    """log p(y_hat | x; temp) with y_hat the argmax of the logits."""
    logits = net.logits(X)
    s = logits / temp
    pred = np.argmax(logits, axis=1)
    m = s.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(s - m).sum(axis=1, keepdims=True)))[:, 0]
    return s[np.arange(len(s)), pred] - lse, pred


def odin_input_grad(net, X, temp: float):
    """Gradient of log p(y_hat | x; temp) w.r.t. each input row."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    _, logits, cache = net.forward_batch(X)
    pred = np.argmax(logits, axis=1)
    g = -_softmax(logits / temp)
    g[np.arange(len(X)), pred] += 1.0
    _, dX = net.backward(cache, None, g / temp)
    if not np.all(np.isfinite(dX)):
        raise NumericError("non-finite ODIN input gradient", component="odin")
    return dX


def odin_perturb(net, X, cfg: OdinConfig):
    """x_hat = x - eta * sign(-grad); returns ``X`` unchanged when eta = 0."""
    X = np.asarray(X, dtype=float)
    if cfg.eta == 0:
        return X.copy()
    single = X.ndim == 1
    g = odin_input_grad(net, np.atleast_2d(X), cfg.temp)
    out = np.atleast_2d(X) - cfg.eta * np.sign(-g)
    return out[0] if single else out


def ood_score(net, X_hat, cfg: OdinConfig):
    """S = -temp * log sum_j exp(logit_j / temp) on the (perturbed) input."""
    X_hat = np.asarray(X_hat, dtype=float)
    single = X_hat.ndim == 1
    s = energy_score(net.logits(np.atleast_2d(X_hat)), cfg.temp)
    return float(np.atleast_1d(s)[0]) if single else np.atleast_1d(s)


def odin_scores(net, X, cfg: OdinConfig):
    return ood_score(net, odin_perturb(net, np.atleast_2d(X), cfg), cfg)


# ------------------------------------------------------------------- metrics

def _pair_counts(scored: ScoredSet):
    """(#pairs ood > id, #pairs ood == id) as exact integers."""
    ids = np.sort(scored.id_scores)
    lt = np.searchsorted(ids, scored.ood_scores, side="left")
    le = np.searchsorted(ids, scored.ood_scores, side="right")
    return int(lt.sum()), int((le - lt).sum())


def auroc(scored: ScoredSet) -> float:
    """Probability an OOD sample outscores an ID sample, ties counted half."""
    scored._require()
    wins, ties = _pair_counts(scored)
    return (2 * wins + ties) / (2 * scored.id_scores.size * scored.ood_scores.size)


def _descending_counts(scored: ScoredSet):
    """Distinct thresholds (descending) with cumulative TP and FP counts."""
    scores = np.concatenate([scored.ood_scores, scored.id_scores])
    is_pos = np.concatenate([np.ones(scored.ood_scores.size, int), np.zeros(scored.id_scores.size, int)])
    order = np.argsort(-scores, kind="stable")
    scores, is_pos = scores[order], is_pos[order]
    last = np.r_[scores[1:] != scores[:-1], True]
    tp = np.cumsum(is_pos)[last]
    fp = np.cumsum(1 - is_pos)[last]
    return scores[last], tp, fp


def aupr(scored: ScoredSet) -> float:
    """Non-interpolated area under precision-recall (average precision)."""
    scored._require()
    _, tp, fp = _descending_counts(scored)
    n_pos = scored.ood_scores.size
    dtp = np.diff(np.r_[0, tp])
    keep = dtp > 0
    # exact rational sum, rounded once, so ties and long curves lose nothing
    total = sum((Fraction(int(a) * int(b), int(c)) for a, b, c in zip(dtp[keep], tp[keep], (tp + fp)[keep])),
                Fraction(0))
    return float(total / n_pos)


def tpr_threshold(scored: ScoredSet, level: float) -> float:
    """Largest threshold whose OOD detection rate reaches ``level``."""
    if not 0 < level <= 1:
        raise DomainError("level must be in (0, 1]")
    scored._require()
    need = max(1, math.ceil(level * scored.ood_scores.size - _LEVEL_SLACK))
    return float(np.sort(scored.ood_scores)[::-1][need - 1])


def fpr_at_tpr(scored: ScoredSet, level: float = 0.95) -> float:
    t = tpr_threshold(scored, level)
    return int(np.sum(scored.id_scores >= t)) / scored.id_scores.size


def _accuracy(mask, predictions, labels):
    if not np.any(mask):
        return None
    hit = np.asarray(predictions)[mask] == np.asarray(labels)[mask]
    return int(hit.sum()) / int(mask.sum())


def acc_at_tpr(scored: ScoredSet, predictions, labels, level: float = 0.95):
    """Accuracy on ID samples kept (score below the TPR-``level`` threshold).

    Returns None when no ID sample survives.
    """
    t = tpr_threshold(scored, level)
    return _accuracy(scored.id_scores < t, predictions, labels)


def fpr_threshold(id_scores, level: float) -> float:
    """Smallest threshold rejecting at most ``level`` of the ID samples."""
    if not 0 <= level <= 1:
        raise DomainError("level must be in [0, 1]")
    ids = np.asarray(id_scores, dtype=float)
    allowed = math.floor(level * ids.size + _LEVEL_SLACK)
    values = np.unique(ids)[::-1]
    rejected = ids.size - np.searchsorted(np.sort(ids), values, side="left")
    ok = np.flatnonzero(rejected <= allowed)
    return float(values[ok[-1]]) if ok.size else math.inf


def acc_at_fpr(scored: ScoredSet, predictions, labels, level: float = 0.0):
    """Accuracy on ID samples retained when at most ``level`` of them are rejected.

    Level 0 is plain accuracy; returns None when nothing is retained.
    """
    if scored.id_scores.size == 0:
        raise DomainError("no ID samples")
    t = fpr_threshold(scored.id_scores, level)
    return _accuracy(scored.id_scores < t, predictions, labels)


# --------------------------------------------------------------- orientation

@dataclass(frozen=True)
class Orientation:
    orientation: str
    auroc: float

    def detection(self, raw: ScoredSet) -> ScoredSet:
        """Turn raw S-scores into OOD-high detection scores."""
        return raw.negated() if self.orientation == AS_IS else raw


def orientation_selftest(raw: ScoredSet) -> Orientation:
    """Pick the sign of S that ranks OOD above ID.

    ``raw`` holds S values, read as "higher means ID" (``as-is``). If negating
    them ranks OOD below ID, the orientation is ``flipped``; an exact 0.5
    keeps ``as-is``.
    """
    raw._require()
    a = auroc(raw.negated())
    if a >= 0.5:
        return Orientation(AS_IS, a)
    return Orientation(FLIPPED, 1.0 - a)


def calibration_split(n: int, rng: RandomSource, fraction: float = 0.5):
    """Boolean mask selecting a seeded calibration subset of ``n`` items."""
    mask = np.zeros(n, dtype=bool)
    k = max(1, int(round(n * fraction))) if n else 0
    mask[rng.permutation(n)[:k]] = True
    return mask


def metric_report(scored: ScoredSet, predictions, labels, orientation: str,
                  config_digest: str | None = None) -> dict:
    """Metric dictionary with the fixed report keys."""
    return {
        "auroc": auroc(scored),
        "aupr": aupr(scored),
        "fpr@0.95": fpr_at_tpr(scored, 0.95),
        "acc@tpr": {"0.95": acc_at_tpr(scored, predictions, labels, 0.95)},
        "acc@fpr": {f"{lv:g}": acc_at_fpr(scored, predictions, labels, lv) for lv in ACC_AT_FPR_LEVELS},
        "orientation": orientation,
        "config_digest": config_digest,
    }


def average_reports(reports: list) -> dict:
    """Element-wise mean of numeric entries across per-OOD-set reports."""
    def mean(vals):
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    out = {k: mean([r[k] for r in reports]) for k in ("auroc", "aupr", "fpr@0.95")}
    for fam in ("acc@tpr", "acc@fpr"):
        out[fam] = {lv: mean([r[fam][lv] for r in reports]) for lv in reports[0][fam]}
    orients = {r["orientation"] for r in reports}
    out["orientation"] = orients.pop() if len(orients) == 1 else "mixed"
    out["config_digest"] = reports[0]["config_digest"]
    return out


def evaluate(net, id_X, id_labels, ood_sets: dict, cfg: OdinConfig, seed: int = 0,
             config_digest: str | None = None, calibration_fraction: float = 0.5) -> dict:
    """Score ID and each OOD set, fix the orientation on a calibration split,
    and report metrics per set plus an ``Average`` block."""
    rng = RandomSource(seed).child("calibration")
    s_id = odin_scores(net, id_X, cfg)
    preds = np.argmax(net.logits(id_X), axis=1)
    out = {}
    for name, X in ood_sets.items():
        s_ood = odin_scores(net, X, cfg)
        m_id = calibration_split(s_id.size, rng.child(name, "id"), calibration_fraction)
        m_ood = calibration_split(s_ood.size, rng.child(name, "ood"), calibration_fraction)
        orient = orientation_selftest(ScoredSet(s_id[m_id], s_ood[m_ood]))
        det = orient.detection(ScoredSet(s_id, s_ood))
        out[name] = metric_report(det, preds, id_labels, orient.orientation, config_digest)
    if len(out) > 1:
        out["Average"] = average_reports(list(out.values()))
    return out
