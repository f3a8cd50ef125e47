import math

import numpy as np
import pytest

from vmfgos.errors import DomainError, NumericError
from vmfgos.losses import energy_score
from vmfgos.metrics import (
    AS_IS, FLIPPED, OdinConfig, ScoredSet, acc_at_fpr, acc_at_tpr, aupr, auroc, calibration_split,
    evaluate, fpr_at_tpr, odin_input_grad, odin_perturb, odin_scores, ood_score, orientation_selftest,
    tpr_threshold,
)
from vmfgos.nn import TinyNet
from vmfgos.rng import RandomSource

from oracles import bf_acc_at_fpr, bf_acc_at_tpr, bf_aupr, bf_auroc, bf_fpr, random_sets


@pytest.mark.parametrize("chunk", range(4))
def test_metrics_match_brute_force(chunk):
    sets = list(random_sets())[chunk * 50:(chunk + 1) * 50]
    for ids, oods, preds, labels in sets:
        s = ScoredSet(ids, oods)
        il, ol = ids.tolist(), oods.tolist()
        assert auroc(s) == float(bf_auroc(il, ol))
        assert aupr(s) == float(bf_aupr(il, ol))
        for level in (0.95, 0.8, 0.5):
            assert fpr_at_tpr(s, level) == bf_fpr(il, ol, level)
            assert acc_at_tpr(s, preds, labels, level) == bf_acc_at_tpr(il, ol, preds, labels, level)
        for level in (0.0, 0.001, 0.01, 0.1):
            assert acc_at_fpr(s, preds, labels, level) == bf_acc_at_fpr(il, ol, preds, labels, level)
        assert acc_at_fpr(s, preds, labels, 0.0) == np.mean(preds == labels)


# ---------------------------------------------------------------- examples

def test_auroc_examples():
    assert auroc(ScoredSet([0.1, 0.4], [0.3, 0.9])) == 0.75
    assert auroc(ScoredSet([0, 1, 2], [5, 6])) == 1.0
    assert auroc(ScoredSet([3.0] * 4, [3.0] * 7)) == 0.5


def test_auroc_monotone_invariance():
    ids, oods, _, _ = next(random_sets(1, seed=3))
    a = auroc(ScoredSet(ids, oods))
    assert auroc(ScoredSet(np.exp(ids), np.exp(oods))) == a
    assert auroc(ScoredSet(3 * ids - 1, 3 * oods - 1)) == a


def test_aupr_examples():
    assert aupr(ScoredSet([0, 1], [2, 3])) == 1.0
    assert aupr(ScoredSet([1.0] * 6, [1.0] * 4)) == pytest.approx(0.4, abs=1e-15)
    # thresholds 4, 3, 2.5: (R, P) = (1/2, 1), (1/2, 1/2), (1, 2/3)
    assert aupr(ScoredSet([1, 2, 3], [2.5, 4])) == pytest.approx(5 / 6, abs=1e-15)


def test_fpr_examples():
    assert fpr_at_tpr(ScoredSet([0, 1, 2], [3, 4, 5]), 0.95) == 0.0
    same = [0.1, 0.2, 0.3, 0.4]
    assert fpr_at_tpr(ScoredSet(same, same), 0.95) == bf_fpr(same, same, 0.95) == 1.0
    assert tpr_threshold(ScoredSet([0, 1], [0.5]), 0.95) == 0.5


def test_fpr_non_decreasing_in_level():
    ids, oods, _, _ = next(random_sets(1, seed=5))
    s = ScoredSet(ids, oods)
    vals = [fpr_at_tpr(s, lv) for lv in np.linspace(0.01, 1.0, 60)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))


def test_acc_at_tpr_examples():
    s = ScoredSet([0, 1, 2, 3], [10, 11])
    assert acc_at_tpr(s, [1, 2, 3, 4], [1, 2, 3, 4]) == 1.0
    assert acc_at_tpr(s, [1, 2, 3, 4], [1, 2, 0, 0]) == 0.5
    # six samples: ids 0.1..0.5 plus OOD [0.35, 0.6]; TPR 0.95 needs both OOD, t = 0.35
    s6 = ScoredSet([0.1, 0.2, 0.3, 0.4], [0.35, 0.6])
    assert acc_at_tpr(s6, [0, 1, 1, 0], [0, 1, 0, 0], 0.95) == pytest.approx(2 / 3)


def test_acc_at_fpr_examples():
    ids = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
    preds = [0, 0, 0, 0, 0, 0, 0, 0, 0, 1]
    labels = [0, 0, 0, 0, 0, 1, 1, 0, 0, 0]
    s = ScoredSet(ids, [1.0])
    assert acc_at_fpr(s, preds, labels, 0.0) == pytest.approx(0.7)
    # level 0.1 of 10 rejects exactly the top ID sample (the wrong prediction)
    assert acc_at_fpr(s, preds, labels, 0.1) == pytest.approx(7 / 9)
    assert acc_at_fpr(s, preds, labels, 1.0) is None


def test_scored_set_validation():
    with pytest.raises(NumericError):
        ScoredSet([np.nan], [1.0])
    with pytest.raises(DomainError):
        auroc(ScoredSet([], [1.0]))
    with pytest.raises(DomainError):
        fpr_at_tpr(ScoredSet([1.0], [1.0]), 0.0)


def test_metric_suite_is_bit_stable():
    ids, oods, preds, labels = next(random_sets(1, seed=11))
    runs = [(auroc(ScoredSet(ids, oods)), aupr(ScoredSet(ids, oods)),
             fpr_at_tpr(ScoredSet(ids, oods)), acc_at_fpr(ScoredSet(ids, oods), preds, labels, 0.01))
            for _ in range(2)]
    assert runs[0] == runs[1]


# -------------------------------------------------------------- orientation

def test_orientation_examples():
    up = orientation_selftest(ScoredSet([5, 6, 7], [1, 2]))
    assert up.orientation == AS_IS and up.auroc == 1.0
    down = orientation_selftest(ScoredSet([1, 2], [5, 6, 7]))
    assert down.orientation == FLIPPED and down.auroc == 1.0
    tie = orientation_selftest(ScoredSet([1, 1, 2, 2], [1, 2, 1, 2]))
    assert tie.orientation == AS_IS and tie.auroc == 0.5


def test_orientation_detection_scores():
    raw = ScoredSet([5.0, 6.0], [1.0])
    det = orientation_selftest(raw).detection(raw)
    assert auroc(det) == 1.0


def test_calibration_split_is_seeded():
    a = calibration_split(101, RandomSource(2))
    b = calibration_split(101, RandomSource(2))
    assert np.array_equal(a, b) and a.sum() == 50


# --------------------------------------------------------------------- ODIN

def odin_net(seed=0, K=10):
    net = TinyNet.init(6, 12, 5, K, RandomSource(seed))
    rs = RandomSource(seed + 1)
    net.params["enc_b1"] = 0.3 * rs.child("b1").normal(12)
    net.params["cls_b"] = 0.3 * rs.child("cb").normal(K)
    return net


def test_zero_logits_score():
    net = odin_net()
    net.params["cls_w"][:] = 0
    net.params["cls_b"][:] = 0
    x = np.ones(6)
    assert ood_score(net, x, OdinConfig(temp=1.0)) == pytest.approx(-2.3025851, abs=5e-8)
    assert ood_score(net, x, OdinConfig(temp=2.0)) == pytest.approx(2 * -math.log(10), rel=1e-15)


def test_eta_zero_is_energy():
    net = odin_net()
    X = RandomSource(4).normal((1000, 6))
    for temp in (1.0, 10.0):
        s = odin_scores(net, X, OdinConfig(0.0, temp))
        e = energy_score(net.logits(X), temp)
        assert np.max(np.abs(s - e)) <= 1e-12
    np.testing.assert_array_equal(odin_perturb(net, X, OdinConfig(0.0)), X)


def test_perturbation_moves_each_coordinate_by_eta():
    net = odin_net()
    X = RandomSource(5).normal((50, 6))
    cfg = OdinConfig(0.004, 10.0)
    Xh = odin_perturb(net, X, cfg)
    delta = np.abs(Xh - X)
    assert np.all(np.isclose(delta, 0.004, rtol=0, atol=1e-15) | (delta == 0))
    g = odin_input_grad(net, X, 10.0)
    nz = g != 0
    np.testing.assert_allclose(delta[nz], 0.004, rtol=0, atol=1e-15)
    # the step follows the gradient of log p(y_hat), i.e. it raises the softmax score
    np.testing.assert_array_equal(np.sign(Xh - X), np.sign(g))
    one = odin_perturb(net, X[0], cfg)
    np.testing.assert_allclose(one, Xh[0], rtol=0, atol=1e-15)


def test_odin_input_gradient_matches_finite_differences():
    net = odin_net(K=4)
    X = RandomSource(6).normal((8, 6))
    temp = 3.0
    g = odin_input_grad(net, X, temp)
    pred = np.argmax(net.logits(X), axis=1)

    def logp(Xq):
        s = net.logits(Xq) / temp
        m = s.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(s - m).sum(axis=1))
        return s[np.arange(len(s)), pred] - lse

    h = 1e-6
    num = np.zeros_like(X)
    for j in range(X.shape[1]):
        e = np.zeros(X.shape[1])
        e[j] = h
        num[:, j] = (logp(X + e) - logp(X - e)) / (2 * h)
    err = np.max(np.abs(num - g)) / np.max(np.abs(num))
    assert err <= 1e-4


def test_odin_config_validation():
    with pytest.raises(DomainError):
        OdinConfig(eta=-1.0)
    with pytest.raises(DomainError):
        OdinConfig(temp=0.0)


# ----------------------------------------------------------------- evaluate

def test_evaluate_report_schema_and_average():
    net = odin_net(K=3)
    rs = RandomSource(8)
    X_id = rs.child("id").normal((60, 6))
    labels = rs.child("lab").generator.integers(0, 3, 60)
    oods = {"a": rs.child("a").normal((40, 6)) * 3, "b": rs.child("b").normal((30, 6)) + 2}
    out = evaluate(net, X_id, labels, oods, OdinConfig(), seed=1, config_digest="abcd1234")
    assert set(out) == {"a", "b", "Average"}
    for block in out.values():
        assert set(block) == {"auroc", "aupr", "fpr@0.95", "acc@tpr", "acc@fpr", "orientation",
                              "config_digest"}
        assert set(block["acc@tpr"]) == {"0.95"}
        assert set(block["acc@fpr"]) == {"0", "0.001", "0.01", "0.1"}
        assert block["config_digest"] == "abcd1234"
    assert out["Average"]["auroc"] == pytest.approx((out["a"]["auroc"] + out["b"]["auroc"]) / 2)
    preds = np.argmax(net.logits(X_id), axis=1)
    assert out["a"]["acc@fpr"]["0"] == np.mean(preds == labels)
    again = evaluate(net, X_id, labels, oods, OdinConfig(), seed=1, config_digest="abcd1234")
    assert again == out
    single = evaluate(net, X_id, labels, {"a": oods["a"]}, OdinConfig(), seed=1)
    assert "Average" not in single
