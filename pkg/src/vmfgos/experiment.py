"""End-to-end pipeline: synthetic data -> training -> scoring -> metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .data import LabeledFeatureSet, exponential_class_counts, generate_long_tailed_vmf, generate_ood_set
from .gos import AnnulusSpec
from .metrics import evaluate
from .nn import TinyNet, TrainReport, train
from .rng import RandomSource


@dataclass
class Datasets:
    train: LabeledFeatureSet
    id_test: LabeledFeatureSet
    ood: dict
    means: np.ndarray


def build_datasets(cfg: RunConfig) -> Datasets:
    spec = cfg.long_tail_spec()
    train_set, test_set, means = generate_long_tailed_vmf(spec)
    ood = {
        kind: generate_ood_set(kind, cfg["ood_count"], spec.feature_dim, cfg["seed"],
                               id_means=means, kappa=spec.kappa)
        for kind in cfg.ood_kinds()
    }
    return Datasets(train_set, test_set, ood, means)


def build_net(cfg: RunConfig, d_in: int, num_classes: int) -> TinyNet:
    return TinyNet.init(d_in, cfg["hidden_dim"], cfg["embed_dim"], num_classes,
                        RandomSource(cfg["seed"]).child("init"), head_width=cfg["head_width"])


def train_model(cfg: RunConfig, train_set: LabeledFeatureSet, progress=None):
    net = build_net(cfg, train_set.dim, train_set.num_classes)
    report = train(net, train_set.features, train_set.labels, cfg.train_config(), progress)
    return net, report


def tail_classes(counts, fraction: float = 1 / 3):
    """Indices of the smallest ``fraction`` of classes by training count."""
    counts = np.asarray(counts)
    k = max(1, int(len(counts) * fraction))
    return np.argsort(counts, kind="stable")[::-1][-k:]


def class_accuracy(net: TinyNet, test: LabeledFeatureSet, classes=None) -> float:
    pred = np.argmax(net.logits(test.features), axis=1)
    mask = np.ones(test.n, bool) if classes is None else np.isin(test.labels, classes)
    return float(np.mean(pred[mask] == test.labels[mask]))


def evaluate_model(cfg: RunConfig, net: TinyNet, data: Datasets) -> dict:
    return evaluate(net, data.id_test.features, data.id_test.labels, data.ood, cfg.odin(),
                    seed=cfg["seed"], config_digest=cfg.digest())


@dataclass
class RunSummary:
    metrics: dict
    accuracy: float
    tail_accuracy: float
    report: TrainReport
    net: TinyNet


def run(cfg: RunConfig, data: Datasets | None = None) -> RunSummary:
    """Train on the configured benchmark and evaluate every OOD set."""
    data = data or build_datasets(cfg)
    net, report = train_model(cfg, data.train)
    tails = tail_classes(exponential_class_counts(cfg.long_tail_spec()))
    return RunSummary(
        evaluate_model(cfg, net, data), class_accuracy(net, data.id_test),
        class_accuracy(net, data.id_test, tails), report, net,
    )


def ablation_config(cfg: RunConfig, dgs=True, tla=True, epr=True) -> RunConfig:
    """Copy of ``cfg`` with loss modules switched off.

    DGS and EPR are removed by zeroing their weights; without TLA the
    classification term falls back to plain cross-entropy.
    """
    out = RunConfig(cfg.echo())
    if not dgs:
        out.set("dgs_weight", 0.0)
    if not epr:
        out.set("beta", 0.0)
    if not tla:
        out.set("tla", False)
    return out


def annulus_config(cfg: RunConfig, lo: float, hi: float) -> RunConfig:
    AnnulusSpec(lo, hi)
    out = RunConfig(cfg.echo())
    out.set("annulus_lo", float(lo))
    out.set("annulus_hi", float(hi))
    return out
