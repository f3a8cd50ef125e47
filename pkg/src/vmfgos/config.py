"""Flat ``key = value`` run configuration.

Every key has a default; unknown keys are rejected. The digest is the CRC-32C
of the canonical text (sorted ``key=value`` lines) of the resolved config.
"""
from __future__ import annotations

from pathlib import Path

import crc32c

from .data import LongTailSpec
from .errors import ConfigError, DomainError
from .gos import AnnulusSpec
from .losses import LossWeights
from .metrics import OdinConfig
from .nn import TrainConfig

DEFAULTS = {
    "seed": 7,
    # data
    "num_classes": 10,
    "head_count": 1000,
    "imbalance_ratio": 100.0,
    "feature_dim": 32,
    "data_kappa": 16.0,
    "test_per_class": 200,
    "ood_kinds": "uniform-sphere",
    "ood_count": 2000,
    # model
    "hidden_dim": 64,
    "embed_dim": 32,
    "head_width": 16,
    # training
    "epochs": 100,
    "batch_size": 128,
    "learning_rate": 1e-3,
    "optimizer": "adam",
    "outliers_per_class": 4,
    "kappa_override": None,
    # loss
    "tau": 0.1,
    "epsilon": 1.0,
    "alpha": 1.0,
    "beta": 0.1,
    "dgs_weight": 1.0,
    "epr_temperature": None,
    "tla": True,
    # synthesis
    "annulus_lo": 2.0,
    "annulus_hi": 3.0,
    # scoring
    "odin_eta": 0.0,
    "odin_temp": 1.0,
    # theorem check
    "theorem_d": 64,
    "theorem_kappa": 500.0,
    "theorem_n": 100000,
    "theorem_kappas": "",
    # sweeps and checks
    "sweep_grid": "0:1,1:2,2:3,3:4",
    "gradcheck_trials": 100,
    "gradcheck_tol": 1e-4,
    "data_dir": "",
}

# keys whose default is None still need a value type
_OPTIONAL_FLOATS = {"kappa_override", "epr_temperature"}


def _coerce(key, raw):
    default = DEFAULTS[key]
    text = str(raw).strip()
    try:
        if key in _OPTIONAL_FLOATS:
            return None if text.lower() in ("", "none") else float(text)
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return text


def _canon(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    def __init__(self, values: dict | None = None):
        self.values = dict(DEFAULTS)
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key, value):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key: {key}")
        self.values[key] = _coerce(key, value) if isinstance(value, str) else value

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            cfg.set(key, value)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.parse(Path(path).read_text())

    def canonical_text(self) -> str:
        return "".join(f"{k}={_canon(self.values[k])}\n" for k in sorted(self.values))

    def digest(self) -> str:
        return f"{crc32c.crc32c(self.canonical_text().encode('utf-8')):08x}"

    def echo(self) -> dict:
        return {k: self.values[k] for k in sorted(self.values)}

    # ------------------------------------------------------------ builders

    def _build(self, fn):
        try:
            return fn()
        except DomainError as exc:
            raise ConfigError(str(exc)) from exc

    def long_tail_spec(self) -> LongTailSpec:
        v = self.values
        return self._build(lambda: LongTailSpec(
            num_classes=v["num_classes"], head_count=v["head_count"],
            imbalance_ratio=v["imbalance_ratio"], feature_dim=v["feature_dim"],
            kappa=v["data_kappa"], test_per_class=v["test_per_class"], seed=v["seed"],
        ))

    def loss_weights(self) -> LossWeights:
        v = self.values
        return self._build(lambda: LossWeights(
            tau=v["tau"], epsilon=v["epsilon"], alpha=v["alpha"], beta=v["beta"],
            dgs=v["dgs_weight"], epr_temperature=v["epr_temperature"], tla_adjust=v["tla"],
        ))

    def annulus(self) -> AnnulusSpec:
        return self._build(lambda: AnnulusSpec(self["annulus_lo"], self["annulus_hi"]))

    def train_config(self) -> TrainConfig:
        v = self.values
        return self._build(lambda: TrainConfig(
            epochs=v["epochs"], batch_size=v["batch_size"], learning_rate=v["learning_rate"],
            optimizer=v["optimizer"], seed=v["seed"], weights=self.loss_weights(),
            annulus=self.annulus(), outliers_per_class=v["outliers_per_class"],
            kappa_override=v["kappa_override"],
        ))

    def odin(self) -> OdinConfig:
        return self._build(lambda: OdinConfig(self["odin_eta"], self["odin_temp"]))

    def ood_kinds(self):
        return [k.strip() for k in self["ood_kinds"].split(",") if k.strip()]

    def sweep_grid(self):
        return parse_grid(self["sweep_grid"])

    def theorem_kappas(self):
        text = self["theorem_kappas"].strip()
        if not text:
            return []
        try:
            return [float(k) for k in text.split(",")]
        except ValueError:
            raise ConfigError(f"bad theorem_kappas: {text!r}") from None


def parse_grid(text: str):
    """``"0:1,1:2"`` -> [(0.0, 1.0), (1.0, 2.0)]."""
    cells = []
    for item in str(text).split(","):
        item = item.strip()
        if not item:
            continue
        parts = item.split(":")
        if len(parts) != 2:
            raise ConfigError(f"malformed annulus grid entry {item!r}")
        try:
            lo, hi = float(parts[0]), float(parts[1])
            AnnulusSpec(lo, hi)
        except (ValueError, DomainError):
            raise ConfigError(f"malformed annulus grid entry {item!r}") from None
        cells.append((lo, hi))
    if not cells:
        raise ConfigError("empty annulus grid")
    return cells
