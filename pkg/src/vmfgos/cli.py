"""``vmfgos`` command-line tool.

Every command reads a flat ``key = value`` config (``--config``), applies
``--seed`` and ``--set key=value`` overrides, and writes its JSON/CSV output
into ``--out``. Each JSON report carries the resolved config, its digest and
the package version.

Exit codes: 0 success, 1 a verification ran but did not pass, 2 config
error, 3 I/O error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, parse_grid
from .data import (
    FeatureFileError,
    LabeledFeatureSet,
    load_features,
    save_features,
    save_outliers,
)
from .errors import ConfigError, DomainError, NumericError, RecipeError, VmfGosError
from .experiment import (
    ablation_config,
    annulus_config,
    build_datasets,
    class_accuracy,
    evaluate_model,
    train_model,
)
from .gos import synthesize_balanced_batch, verify_chi2_equivalence
from .gradcheck import run_gradcheck
from .losses import energy_score
from .metrics import evaluate, odin_scores
from .nn import CheckpointError, load_checkpoint, refresh_mixture, save_checkpoint
from .rng import RandomSource
from .sphere import VmfMixture

log = logging.getLogger("vmfgos")

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

TRAIN_FILE = "train.vgfs"
ID_TEST_FILE = "id-test.vgfs"
MANIFEST_FILE = "manifest.json"
CHECKPOINT_FILE = "checkpoint.vgck"
SPOT_CHECK_SAMPLES = 8


class DataIOError(VmfGosError):
    """A required input file is missing or unreadable."""


# ------------------------------------------------------------------ helpers

def ood_file_name(kind: str, n_kinds: int) -> str:
    return "ood-test.vgfs" if n_kinds == 1 else f"ood-test-{kind}.vgfs"


def envelope(command: str, cfg: RunConfig, result) -> dict:
    return {
        "command": command,
        "version": __version__,
        "config_digest": cfg.digest(),
        "config": cfg.echo(),
        "result": result,
    }


def write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_csv(path: Path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value.strip())
    if args.seed is not None:
        cfg.set("seed", int(args.seed))
    return cfg


def data_dir(cfg: RunConfig, args) -> Path:
    if getattr(args, "data", None):
        return Path(args.data)
    return Path(cfg["data_dir"]) if cfg["data_dir"] else Path(args.out)


def read_features(path: Path) -> LabeledFeatureSet:
    if not path.is_file():
        raise DataIOError(f"missing dataset file: {path}")
    return load_features(path)


def ood_files(directory: Path) -> dict:
    """OOD file names keyed by set name, from the manifest when present."""
    manifest = directory / MANIFEST_FILE
    if manifest.is_file():
        entries = json.loads(manifest.read_text())["result"]["files"]["ood"]
        return {name: directory / fname for name, fname in entries.items()}
    found = sorted(directory.glob("ood-test*.vgfs"))
    if not found:
        raise DataIOError(f"no OOD files in {directory}")
    return {p.stem.replace("ood-test-", "") if p.stem != "ood-test" else "ood": p for p in found}


@contextlib.contextmanager
def thread_limit():
    """Honour ``VGOS_THREADS`` through threadpoolctl when it is installed."""
    raw = os.environ.get("VGOS_THREADS")
    if not raw:
        yield
        return
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"VGOS_THREADS must be a positive integer, got {raw!r}") from None
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        log.info("threadpoolctl not installed; VGOS_THREADS=%d not enforced", n)
        yield
        return
    with threadpool_limits(limits=n):
        yield


# ----------------------------------------------------------------- commands

def cmd_synth_data(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = build_datasets(cfg)
    save_features(data.train, out / TRAIN_FILE)
    save_features(data.id_test, out / ID_TEST_FILE)
    ood = {}
    for kind, X in data.ood.items():
        fname = ood_file_name(kind, len(data.ood))
        save_features(LabeledFeatureSet(X, None, data.train.num_classes), out / fname)
        ood[kind] = fname
    result = {
        "files": {"train": TRAIN_FILE, "id_test": ID_TEST_FILE, "ood": ood},
        "class_counts": data.train.class_counts.tolist(),
        "n_train": data.train.n,
        "n_id_test": data.id_test.n,
        "n_ood": {k: int(v.shape[0]) for k, v in data.ood.items()},
    }
    write_json(out / MANIFEST_FILE, envelope("synth-data", cfg, result))
    return EXIT_OK


def apply_ablation(cfg: RunConfig, args) -> RunConfig:
    return ablation_config(cfg, dgs=not args.no_dgs, tla=not args.no_tla, epr=not args.no_epr)


def cmd_train(cfg: RunConfig, args) -> int:
    cfg = apply_ablation(cfg, args)
    train_set = read_features(data_dir(cfg, args) / TRAIN_FILE)
    if train_set.labels is None:
        raise DataIOError("training file has no labels")

    def progress(rec):
        log.info("epoch %d total %.5f (dgs %.5f tla %.5f epr %.5f)",
                 rec.epoch, rec.total, rec.dgs, rec.tla, rec.epr)

    net, report = train_model(cfg, train_set, progress)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / CHECKPOINT_FILE
    save_checkpoint(net, ckpt, cfg.echo(), cfg["seed"])
    result = report.to_dict()
    result["checkpoint"] = str(ckpt)
    write_json(out / "train_report.json", envelope("train", cfg, result))
    return EXIT_OK


def energy_spot_check(net, X, cfg: RunConfig, k: int = SPOT_CHECK_SAMPLES) -> dict:
    """Compare reported scores against the plain energy of the logits."""
    X = X[:k]
    scores = odin_scores(net, X, cfg.odin())
    energies = energy_score(net.logits(X), cfg["odin_temp"])
    diff = float(np.max(np.abs(scores - energies))) if len(X) else 0.0
    return {"samples": int(len(X)), "odin_eta": cfg["odin_eta"], "max_abs_diff": diff,
            "scores": scores.tolist(), "energies": np.asarray(energies).tolist()}


def cmd_eval(cfg: RunConfig, args) -> int:
    if args.eta is not None:
        cfg.set("odin_eta", float(args.eta))
    if args.temp is not None:
        cfg.set("odin_temp", float(args.temp))
    directory = data_dir(cfg, args)
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(args.out) / CHECKPOINT_FILE
    if not ckpt.is_file():
        raise DataIOError(f"missing checkpoint: {ckpt}")
    net = load_checkpoint(ckpt)
    id_test = read_features(directory / ID_TEST_FILE)
    ood = {}
    for name, path in ood_files(directory).items():
        ood[name] = read_features(path).features
    metrics = evaluate(net, id_test.features, id_test.labels, ood, cfg.odin(),
                       seed=cfg["seed"], config_digest=cfg.digest())
    result = {
        "metrics": metrics,
        "accuracy": class_accuracy(net, id_test),
        "energy_spot_check": energy_spot_check(net, id_test.features, cfg),
        "checkpoint": str(ckpt),
    }
    write_json(Path(args.out) / "metrics.json", envelope("eval", cfg, result))
    return EXIT_OK


def cmd_synthesize_outliers(cfg: RunConfig, args) -> int:
    if args.checkpoint:
        train_set = read_features(data_dir(cfg, args) / TRAIN_FILE)
        net = load_checkpoint(args.checkpoint)
        mix = refresh_mixture(net, train_set.features, train_set.labels, train_set.num_classes)
        source = "checkpoint"
    else:
        data = build_datasets(cfg)
        K = cfg["num_classes"]
        counts = data.train.class_counts
        mix = VmfMixture(data.means, np.full(K, cfg["data_kappa"]), counts / counts.sum())
        source = "generator"
    per_class = args.per_class if args.per_class is not None else cfg["outliers_per_class"]
    rng = RandomSource(cfg["seed"]).child("synthesize-outliers")
    batch = synthesize_balanced_batch(mix, per_class, cfg.annulus(), rng,
                                      kappa_override=cfg["kappa_override"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_outliers(batch, mix.num_classes, out / "outliers.vgfs")
    result = {"file": "outliers.vgfs", "count": len(batch), "per_class": per_class,
              "mixture_source": source, "kappas": mix.kappas.tolist()}
    write_json(out / "outliers.json", envelope("synthesize-outliers", cfg, result))
    return EXIT_OK


def cmd_verify_theorem(cfg: RunConfig, args) -> int:
    for key, val in (("theorem_d", args.d), ("theorem_kappa", args.kappa), ("theorem_n", args.n)):
        if val is not None:
            cfg.set(key, val)
    if args.kappas is not None:
        cfg.set("theorem_kappas", args.kappas)
    d, n = cfg["theorem_d"], cfg["theorem_n"]
    kappas = cfg.theorem_kappas()
    out = Path(args.out)
    root = RandomSource(cfg["seed"])
    # every kappa uses the same stream so sweep rows are matched on seed
    checks = [verify_chi2_equivalence(d, k, n, root.child("theorem"))
              for k in (kappas or [cfg["theorem_kappa"]])]
    rows = [{"kappa": c.kappa, "ks": c.ks, "regime_warning": c.regime_warning} for c in checks]
    passed = all(c.ks < args.ks_tol for c in checks)
    result = {"d": d, "n": n, "ks_tolerance": args.ks_tol, "checks": rows, "passed": passed}
    if kappas:
        write_csv(out / "theorem_sweep.csv", ["kappa", "ks"], [(r["kappa"], r["ks"]) for r in rows])
        result["csv"] = "theorem_sweep.csv"
    write_json(out / "theorem.json", envelope("verify-theorem", cfg, result))
    return EXIT_OK if passed else EXIT_CHECK_FAILED


def cmd_sweep_annulus(cfg: RunConfig, args) -> int:
    if args.grid is not None:
        cfg.set("sweep_grid", args.grid)
    grid = parse_grid(cfg["sweep_grid"])
    data = build_datasets(cfg)
    rows = []
    for lo, hi in grid:
        cell = annulus_config(cfg, lo, hi)
        net, _ = train_model(cell, data.train)
        metrics = evaluate_model(cell, net, data)
        block = metrics.get("Average") or next(iter(metrics.values()))
        rows.append({"lo_sigma": lo, "hi_sigma": hi, "auroc": block["auroc"],
                     "acc": class_accuracy(net, data.id_test)})
        log.info("annulus (%g, %g): auroc %.4f", lo, hi, block["auroc"])
    out = Path(args.out)
    write_csv(out / "sweep_annulus.csv", ["lo_sigma", "hi_sigma", "auroc", "acc"],
              [(r["lo_sigma"], r["hi_sigma"], r["auroc"], r["acc"]) for r in rows])
    best = max(rows, key=lambda r: r["auroc"])
    result = {"rows": rows, "best": [best["lo_sigma"], best["hi_sigma"]], "csv": "sweep_annulus.csv"}
    write_json(out / "sweep_annulus.json", envelope("sweep-annulus", cfg, result))
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    if args.trials is not None:
        cfg.set("gradcheck_trials", int(args.trials))
    if args.tol is not None:
        cfg.set("gradcheck_tol", float(args.tol))
    rep = run_gradcheck(cfg["gradcheck_trials"], cfg["gradcheck_tol"], seed=cfg["seed"])
    result = rep.to_dict()
    result["failed"] = rep.failures()
    write_json(Path(args.out) / "gradcheck.json", envelope("gradcheck", cfg, result))
    for name in rep.failures():
        print(f"gradcheck failed: {name}", file=sys.stderr)
    return EXIT_OK if rep.all_passed else EXIT_CHECK_FAILED


def summarize(reports: dict) -> tuple:
    """Rows of (method, set, auroc, aupr, fpr95, acc95, acc) from eval reports."""
    rows = []
    for method, rep in reports.items():
        res = rep.get("result", {})
        if "metrics" not in res:
            raise ConfigError(f"{method}: not an eval report")
        for set_name, m in res["metrics"].items():
            rows.append([method, set_name, m["auroc"], m["aupr"], m["fpr@0.95"],
                         m["acc@tpr"]["0.95"], m["acc@fpr"]["0"]])
    return ["method", "ood_set", "auroc", "aupr", "fpr@0.95", "acc@tpr0.95", "acc"], rows


def cmd_report(cfg: RunConfig, args) -> int:
    reports = {}
    for i, path in enumerate(args.inputs):
        p = Path(path)
        if not p.is_file():
            raise DataIOError(f"missing report: {p}")
        try:
            obj = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise DataIOError(f"{p}: not valid JSON ({exc})") from exc
        name = args.names[i] if args.names and i < len(args.names) else p.parent.name or p.stem
        reports[name] = obj
    header, rows = summarize(reports)
    out = Path(args.out)
    write_csv(out / "summary.csv", header, rows)
    digests = {k: v.get("config_digest") for k, v in reports.items()}
    result = {"header": header, "rows": rows, "inputs": list(map(str, args.inputs)),
              "input_digests": digests}
    write_json(out / "summary.json", envelope("report", cfg, result))
    return EXIT_OK


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "synthesize-outliers": cmd_synthesize_outliers,
    "verify-theorem": cmd_verify_theorem,
    "sweep-annulus": cmd_sweep_annulus,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="key = value config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the config seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--set", action="append", default=argparse.SUPPRESS, metavar="KEY=VALUE",
                        help="override a single config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="vmfgos", parents=[common],
                                     description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text)

    add("synth-data", "write train / id-test / ood-test feature files and a manifest")

    p = add("train", "train the network and write a checkpoint plus report")
    p.add_argument("--data", help="directory holding the dataset files")
    p.add_argument("--checkpoint", help="checkpoint path (default OUT/checkpoint.vgck)")
    p.add_argument("--no-dgs", action="store_true", help="drop the DGS term")
    p.add_argument("--no-tla", action="store_true", help="plain cross-entropy instead of TLA")
    p.add_argument("--no-epr", action="store_true", help="drop the EPR term")

    p = add("eval", "score ID and OOD test sets with a checkpoint")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--eta", type=float, help="ODIN perturbation magnitude")
    p.add_argument("--temp", type=float, help="ODIN temperature")

    p = add("synthesize-outliers", "dump a balanced outlier batch to a feature file")
    p.add_argument("--data")
    p.add_argument("--checkpoint", help="estimate the mixture from this model's features")
    p.add_argument("--per-class", type=int)

    p = add("verify-theorem", "KS distance of the scaled displacement to chi-square")
    p.add_argument("--d", type=int)
    p.add_argument("--kappa", type=float)
    p.add_argument("--n", type=int)
    p.add_argument("--kappas", help="comma-separated list; writes a (kappa, ks) CSV")
    p.add_argument("--ks-tol", type=float, default=0.02)

    p = add("sweep-annulus", "train and evaluate across annulus bounds")
    p.add_argument("--grid", help='e.g. "0:1,1:2,2:3,3:4"')

    p = add("gradcheck", "finite-difference check of every analytic gradient")
    p.add_argument("--trials", type=int)
    p.add_argument("--tol", type=float)

    p = add("report", "merge eval reports into one summary table")
    p.add_argument("inputs", nargs="+", help="metrics.json files")
    p.add_argument("--names", nargs="*", help="method name for each input")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("config", None), ("seed", None), ("out", "."), ("set", None),
                          ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with thread_limit():
            cfg = resolve_config(args)
            return COMMANDS[args.command](cfg, args)
    except (ConfigError, DomainError, RecipeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, DataIOError, FeatureFileError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, FloatingPointError) as exc:
        where = f" [{exc.component}]" if getattr(exc, "component", None) else ""
        print(f"numeric failure{where}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
