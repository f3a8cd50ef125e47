import functools
import json

import numpy as np
import pytest

from vmfgos import __version__, cli
from vmfgos import gradcheck as gc
from vmfgos.config import RunConfig
from vmfgos.data import load_features, load_outliers
from vmfgos.losses import tla_loss_batch
from vmfgos.nn import load_checkpoint

SMALL = """
num_classes = 3
head_count = 60
imbalance_ratio = 10
feature_dim = 8
test_per_class = 10
ood_count = 30
hidden_dim = 8
embed_dim = 8
head_width = 4
epochs = 2
batch_size = 32
gradcheck_trials = 2
"""


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "small.cfg"
    p.write_text(SMALL)
    return p


def run(*argv):
    return cli.main([str(a) for a in argv])


def read(path):
    return json.loads(path.read_text())


@pytest.fixture
def dataset(tmp_path, small_cfg):
    out = tmp_path / "run"
    assert run("synth-data", "--config", small_cfg, "--out", out) == 0
    return out


def test_synth_data_writes_three_files_and_manifest(dataset, small_cfg):
    names = sorted(p.name for p in dataset.iterdir())
    assert names == ["id-test.vgfs", "manifest.json", "ood-test.vgfs", "train.vgfs"]
    man = read(dataset / "manifest.json")
    assert man["command"] == "synth-data" and man["version"] == __version__
    assert man["config_digest"] == RunConfig.load(small_cfg).digest()
    assert man["result"]["class_counts"] == [60, 19, 6]
    assert load_features(dataset / "train.vgfs").class_counts.tolist() == [60, 19, 6]
    assert load_features(dataset / "ood-test.vgfs").labels is None


def test_balanced_dataset_when_ratio_one(tmp_path, small_cfg):
    assert run("synth-data", "--config", small_cfg, "--set", "imbalance_ratio=1", "--out", tmp_path) == 0
    assert read(tmp_path / "manifest.json")["result"]["class_counts"] == [60, 60, 60]


def test_invalid_config_key_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("not_a_key = 1\n")
    assert run("synth-data", "--config", bad, "--out", tmp_path) == 2
    assert "not_a_key" in capsys.readouterr().err
    assert run("synth-data", "--set", "epochs", "--out", tmp_path) == 2


def test_missing_config_or_dataset_exits_3(tmp_path, small_cfg, capsys):
    assert run("synth-data", "--config", tmp_path / "nope.cfg", "--out", tmp_path) == 3
    assert run("train", "--config", small_cfg, "--out", tmp_path / "empty") == 3
    assert "missing dataset file" in capsys.readouterr().err


def test_train_eval_and_digests(dataset, small_cfg):
    assert run("train", "--config", small_cfg, "--out", dataset) == 0
    rep = read(dataset / "train_report.json")
    assert len(rep["result"]["epochs"]) == 2
    net = load_checkpoint(dataset / "checkpoint.vgck")
    assert rep["result"]["parameter_digest"] == net.digest()
    assert read(dataset / "checkpoint.vgck.json")["parameter_digest"] == net.digest()

    assert run("eval", "--config", small_cfg, "--out", dataset) == 0
    m = read(dataset / "metrics.json")
    block = m["result"]["metrics"]["uniform-sphere"]
    for key in ("auroc", "aupr", "fpr@0.95", "acc@tpr", "acc@fpr", "orientation", "config_digest"):
        assert key in block
    spot = m["result"]["energy_spot_check"]
    assert spot["samples"] == 8 and spot["max_abs_diff"] <= 1e-12
    digest = RunConfig.load(small_cfg).digest()
    assert {rep["config_digest"], m["config_digest"], block["config_digest"]} == {digest}


def test_train_is_byte_deterministic(tmp_path, dataset, small_cfg):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("train", "--config", small_cfg, "--data", dataset, "--out", a) == 0
    assert run("train", "--config", small_cfg, "--data", dataset, "--out", b) == 0
    assert (a / "checkpoint.vgck").read_bytes() == (b / "checkpoint.vgck").read_bytes()
    ra, rb = read(a / "train_report.json"), read(b / "train_report.json")
    assert ra["config_digest"] == rb["config_digest"]
    ra["result"].pop("wall_clock"), rb["result"].pop("wall_clock")
    ra["result"].pop("checkpoint"), rb["result"].pop("checkpoint")
    assert ra == rb


@pytest.mark.parametrize("flag,key,value", [
    ("--no-dgs", "dgs_weight", 0.0), ("--no-epr", "beta", 0.0), ("--no-tla", "tla", False),
])
def test_ablation_flags(tmp_path, dataset, small_cfg, flag, key, value):
    out = tmp_path / flag
    assert run("train", "--config", small_cfg, "--data", dataset, "--out", out, flag) == 0
    rep = read(out / "train_report.json")
    assert rep["config"][key] == value
    assert rep["config_digest"] != RunConfig.load(small_cfg).digest()


def test_eval_with_two_ood_sets_has_average(tmp_path, small_cfg):
    out = tmp_path / "two"
    kinds = "ood_kinds=uniform-sphere,shifted-mixture"
    assert run("synth-data", "--config", small_cfg, "--set", kinds, "--out", out) == 0
    assert (out / "ood-test-shifted-mixture.vgfs").exists()
    assert run("train", "--config", small_cfg, "--set", kinds, "--out", out) == 0
    assert run("eval", "--config", small_cfg, "--set", kinds, "--out", out, "--eta", "0.002",
               "--temp", "10") == 0
    m = read(out / "metrics.json")["result"]["metrics"]
    assert set(m) == {"uniform-sphere", "shifted-mixture", "Average"}
    assert m["Average"]["auroc"] == pytest.approx(
        (m["uniform-sphere"]["auroc"] + m["shifted-mixture"]["auroc"]) / 2)


def test_eval_missing_checkpoint_exits_3(dataset, small_cfg):
    assert run("eval", "--config", small_cfg, "--out", dataset) == 3


def test_synthesize_outliers(tmp_path, dataset, small_cfg):
    out = tmp_path / "gos"
    assert run("synthesize-outliers", "--config", small_cfg, "--out", out, "--per-class", 5) == 0
    vec, anchors, sims = load_outliers(out / "outliers.vgfs")
    assert vec.shape == (15, 8) and np.bincount(anchors).tolist() == [5, 5, 5]
    assert read(out / "outliers.json")["result"]["mixture_source"] == "generator"
    assert run("train", "--config", small_cfg, "--out", dataset) == 0
    out2 = tmp_path / "gos2"
    assert run("synthesize-outliers", "--config", small_cfg, "--data", dataset, "--out", out2,
               "--checkpoint", dataset / "checkpoint.vgck") == 0
    assert read(out2 / "outliers.json")["result"]["mixture_source"] == "checkpoint"


def test_verify_theorem_modes(tmp_path, small_cfg):
    out = tmp_path / "thm"
    code = run("verify-theorem", "--out", out, "--d", 8, "--kappa", 5000, "--n", 20000)
    rep = read(out / "theorem.json")["result"]
    assert code == 0 and rep["passed"] and not rep["checks"][0]["regime_warning"]
    with pytest.warns(RuntimeWarning, match="regime"):
        code = run("verify-theorem", "--out", out, "--d", 64, "--kappa", 100, "--n", 2000)
    rep = read(out / "theorem.json")["result"]
    assert code == 1 and rep["checks"][0]["regime_warning"]
    assert run("verify-theorem", "--out", out, "--d", 8, "--n", 5000, "--kappas", "500,5000") in (0, 1)
    lines = (out / "theorem_sweep.csv").read_text().splitlines()
    assert lines[0] == "kappa,ks" and len(lines) == 3


def test_sweep_annulus(tmp_path, small_cfg):
    out = tmp_path / "sweep"
    assert run("sweep-annulus", "--config", small_cfg, "--out", out, "--set", "epochs=1") == 0
    lines = (out / "sweep_annulus.csv").read_text().splitlines()
    assert lines[0] == "lo_sigma,hi_sigma,auroc,acc" and len(lines) == 5
    assert [tuple(map(float, ln.split(",")[:2])) for ln in lines[1:]] == [(0, 1), (1, 2), (2, 3), (3, 4)]


@pytest.mark.parametrize("grid", ["0-1", "2:1", "a:b", ""])
def test_malformed_grid_exits_2(tmp_path, small_cfg, grid):
    assert run("sweep-annulus", "--config", small_cfg, "--out", tmp_path, "--grid", grid) == 2


def test_gradcheck_passes_and_lists_parameters(tmp_path, small_cfg):
    assert run("gradcheck", "--config", small_cfg, "--out", tmp_path) == 0
    rep = read(tmp_path / "gradcheck.json")["result"]
    assert rep["failed"] == [] and rep["tol"] == 1e-4
    assert set(rep["max_relative_error"]["total"]) >= {"enc_w1", "cls_w", "head_w1"}


def test_gradcheck_sign_bug_names_component(tmp_path, small_cfg, monkeypatch, capsys):
    def flipped(*args, **kwargs):
        loss, grad = tla_loss_batch(*args, **kwargs)
        return loss, -grad

    monkeypatch.setitem(gc.CHECKS, "tla", functools.partial(gc.check_tla, grad_fn=flipped))
    assert run("gradcheck", "--config", small_cfg, "--out", tmp_path) == 1
    assert "gradcheck failed: tla" in capsys.readouterr().err
    assert read(tmp_path / "gradcheck.json")["result"]["failed"] == ["tla"]


def test_report_merges_eval_outputs(tmp_path, dataset, small_cfg):
    assert run("train", "--config", small_cfg, "--out", dataset) == 0
    assert run("eval", "--config", small_cfg, "--out", dataset) == 0
    out = tmp_path / "rep"
    metrics = dataset / "metrics.json"
    assert run("report", metrics, metrics, "--names", "full", "copy", "--out", out) == 0
    lines = (out / "summary.csv").read_text().splitlines()
    assert lines[0].startswith("method,ood_set,auroc") and len(lines) == 3
    digests = read(out / "summary.json")["result"]["input_digests"]
    assert digests["full"] == digests["copy"] == RunConfig.load(small_cfg).digest()
    assert run("report", tmp_path / "missing.json", "--out", out) == 3
    assert run("report", dataset / "manifest.json", "--out", out) == 2


def test_numeric_failure_exits_4(tmp_path, dataset, small_cfg, monkeypatch):
    from vmfgos.errors import NumericError

    def boom(*a, **k):
        raise NumericError("non-finite gradient for cls_w", component="cls_w")

    monkeypatch.setattr(cli, "train_model", boom)
    assert run("train", "--config", small_cfg, "--out", dataset) == 4


def test_thread_limit_env(tmp_path, small_cfg, monkeypatch):
    monkeypatch.setenv("VGOS_THREADS", "1")
    assert run("synth-data", "--config", small_cfg, "--out", tmp_path) == 0
    monkeypatch.setenv("VGOS_THREADS", "zero")
    assert run("synth-data", "--config", small_cfg, "--out", tmp_path) == 2


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--version"])
    assert exc.value.code == 0 and __version__ in capsys.readouterr().out
