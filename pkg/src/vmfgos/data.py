"""Synthetic long-tailed hyperspherical data and the feature file format.

Feature file layout (little-endian)::

    b"VGFS" | version u32 | n u64 | d u32 | K u32 | flags u32
    | n*d float64 row-major | [n uint32 labels] | CRC-32C u32 of everything before

flags: bit0 rows are unit-norm, bit1 labels present, bit2 the last column is
an auxiliary similarity column (synthesized-outlier dumps).
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from math import floor
from pathlib import Path

import crc32c
import numpy as np

from .errors import DomainError, RecipeError, ShapeError, VmfGosError
from .gos import OutlierBatch
from .rng import RandomSource
from .sphere import VmfComponent, normalize, sample_vmf, tangent_orthonormal

FILE_MAGIC = b"VGFS"
FILE_VERSION = 1
FLAG_NORMALIZED = 1
FLAG_LABELS = 2
FLAG_AUX_SIMILARITY = 4
_HEADER = struct.Struct("<4sIQIII")

MIN_SEPARATION_COS = 0.5  # 60 degrees
OOD_SHIFT_COS = np.cos(np.pi / 4)
SEPARATION_ATTEMPTS = 10_000


class FeatureFileError(VmfGosError):
    pass


class VersionMismatchError(FeatureFileError):
    pass


class ChecksumError(FeatureFileError):
    pass


class TruncationError(FeatureFileError):
    pass


@dataclass(frozen=True)
class LongTailSpec:
    num_classes: int = 10
    head_count: int = 1000
    imbalance_ratio: float = 100.0
    feature_dim: int = 32
    kappa: float = 16.0
    test_per_class: int = 200
    seed: int = 7
    # optional explicit generator; otherwise the "random-wellseparated" recipe
    means: np.ndarray | None = field(default=None, compare=False)
    kappas: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.num_classes < 1 or self.feature_dim < 2:
            raise DomainError("need K >= 1 and d >= 2")
        if self.imbalance_ratio < 1:
            raise DomainError("imbalance ratio must be >= 1")
        if self.head_count < 1 or self.test_per_class < 0:
            raise DomainError("counts must be positive")


@dataclass
class LabeledFeatureSet:
    features: np.ndarray
    labels: np.ndarray | None
    num_classes: int
    normalized: bool = True

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        if self.features.ndim != 2:
            raise ShapeError("features must be an (n, d) matrix")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.features.shape[0],):
                raise ShapeError("one label per row required")
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise DomainError("labels out of range")
        if self.normalized and self.features.size:
            if np.any(np.abs(np.linalg.norm(self.features, axis=1) - 1.0) > 1e-6):
                raise DomainError("normalized flag set but rows are not unit-norm")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def class_counts(self) -> np.ndarray:
        if self.labels is None:
            return np.zeros(self.num_classes, dtype=int)
        return np.bincount(self.labels, minlength=self.num_classes)


# ------------------------------------------------------------------- counts

def exponential_class_counts(spec: LongTailSpec) -> np.ndarray:
    """N_y = round(N_1 * rho^(-y/(K-1))) for y = 0..K-1 (half-up rounding)."""
    K, n1, rho = spec.num_classes, spec.head_count, spec.imbalance_ratio
    if K == 1:
        return np.array([n1])
    y = np.arange(K)
    counts = np.array([floor(n1 * rho ** (-i / (K - 1)) + 0.5) for i in y], dtype=int)
    counts[0] = n1
    if counts[-1] < 1:
        raise RecipeError(f"tail class would be empty (N_1={n1}, rho={rho})")
    return counts


# --------------------------------------------------------------- generation

def well_separated_means(K: int, d: int, rng: RandomSource, max_cos=MIN_SEPARATION_COS):
    """K uniform random unit vectors with pairwise cosine <= ``max_cos``."""
    means = []
    for _ in range(SEPARATION_ATTEMPTS):
        cand = normalize(rng.normal(d))
        if all(cand @ m <= max_cos for m in means):
            means.append(cand)
            if len(means) == K:
                return np.stack(means)
    raise RecipeError(
        f"could not place {K} means {np.degrees(np.arccos(max_cos)):.0f} degrees apart in "
        f"d={d} after {SEPARATION_ATTEMPTS} attempts; use fewer classes or a larger dimension"
    )


def _generator(spec: LongTailSpec, rng: RandomSource):
    if spec.means is not None:
        means = normalize(np.asarray(spec.means, dtype=float))
    else:
        means = well_separated_means(spec.num_classes, spec.feature_dim, rng.child("means"))
    kappas = (np.full(spec.num_classes, spec.kappa) if spec.kappas is None
              else np.asarray(spec.kappas, dtype=float))
    return means, kappas


def generate_long_tailed_vmf(spec: LongTailSpec):
    """(train, id_test, means): exponential-count train split and a balanced test split.

    Train and test draw from disjoint child streams of the spec seed.
    """
    rng = RandomSource(spec.seed)
    means, kappas = _generator(spec, rng)
    counts = exponential_class_counts(spec)

    def draw(split, per_class):
        feats, labels = [], []
        for y, n_y in enumerate(per_class):
            if n_y == 0:
                continue
            comp = VmfComponent(means[y], kappas[y])
            feats.append(sample_vmf(comp, int(n_y), rng.child(split, y)))
            labels.append(np.full(n_y, y))
        if not feats:
            return LabeledFeatureSet(np.zeros((0, spec.feature_dim)), np.zeros(0, int), spec.num_classes)
        return LabeledFeatureSet(np.concatenate(feats), np.concatenate(labels), spec.num_classes)

    train = draw("train", counts)
    test = draw("test", [spec.test_per_class] * spec.num_classes)
    return train, test, means


def shifted_means(id_means, rng: RandomSource, max_cos=OOD_SHIFT_COS, attempts=SEPARATION_ATTEMPTS):
    """One mean per ID mean, rotated away until its cosine to every ID mean <= ``max_cos``."""
    id_means = np.atleast_2d(id_means)
    out = []
    for mu in id_means:
        for _ in range(attempts):
            v = tangent_orthonormal(mu, rng)
            angle = rng.uniform(np.pi / 4, np.pi / 2)
            m = np.cos(angle) * mu + np.sin(angle) * v
            if np.max(id_means @ m) <= max_cos:
                out.append(m / np.linalg.norm(m))
                break
        else:
            raise RecipeError("could not rotate an OOD mean 45 degrees away from every ID mean")
    return np.stack(out)


def generate_ood_set(kind: str, n: int, d: int, seed: int, id_means=None, kappa: float = 16.0):
    """OOD features: ``uniform-sphere`` or ``shifted-mixture`` (needs ``id_means``)."""
    rng = RandomSource(seed).child("ood", kind)
    if n == 0:
        return np.zeros((0, d))
    if kind == "uniform-sphere":
        return normalize(rng.normal((n, d)))
    if kind == "shifted-mixture":
        if id_means is None:
            raise RecipeError("shifted-mixture needs the ID means")
        centers = shifted_means(id_means, rng.child("centers"))
        which = rng.child("assign").generator.integers(0, len(centers), n)
        out = np.empty((n, d))
        for c in range(len(centers)):
            idx = np.flatnonzero(which == c)
            if idx.size:
                out[idx] = sample_vmf(VmfComponent(centers[c], kappa), idx.size, rng.child("draw", c))
        return out
    raise DomainError(f"unknown OOD kind {kind!r}")


# ---------------------------------------------------------------- file I/O

def _encode(features, labels, num_classes, flags):
    features = np.ascontiguousarray(features, dtype="<f8")
    n, d = features.shape
    if labels is not None:
        flags |= FLAG_LABELS
    body = _HEADER.pack(FILE_MAGIC, FILE_VERSION, n, d, num_classes, flags) + features.tobytes()
    if labels is not None:
        body += np.asarray(labels, dtype="<u4").tobytes()
    return body + struct.pack("<I", crc32c.crc32c(body))


def save_features(fs: LabeledFeatureSet, path):
    flags = FLAG_NORMALIZED if fs.normalized else 0
    Path(path).write_bytes(_encode(fs.features, fs.labels, fs.num_classes, flags))


def _decode(raw: bytes):
    if len(raw) < _HEADER.size:
        raise TruncationError("file shorter than the header")
    magic, version, n, d, K, flags = _HEADER.unpack_from(raw)
    if magic != FILE_MAGIC:
        raise FeatureFileError(f"bad magic {magic!r}")
    if version != FILE_VERSION:
        raise VersionMismatchError(f"feature file version {version}, expected {FILE_VERSION}")
    has_labels = bool(flags & FLAG_LABELS)
    expected = _HEADER.size + 8 * n * d + (4 * n if has_labels else 0) + 4
    if len(raw) < expected:
        raise TruncationError(f"header promises {n} rows; file has {len(raw)} of {expected} bytes")
    if len(raw) > expected:
        raise FeatureFileError("trailing bytes after checksum")
    (stored,) = struct.unpack_from("<I", raw, expected - 4)
    if crc32c.crc32c(raw[: expected - 4]) != stored:
        raise ChecksumError("CRC-32C mismatch")
    off = _HEADER.size
    feats = np.frombuffer(raw, dtype="<f8", count=n * d, offset=off).reshape(n, d).astype(float)
    labels = None
    if has_labels:
        labels = np.frombuffer(raw, dtype="<u4", count=n, offset=off + 8 * n * d).astype(np.int64)
        if labels.size and labels.max() >= K:
            raise FeatureFileError(f"label {labels.max()} out of range for K={K}")
    return feats, labels, K, flags


def load_features(path) -> LabeledFeatureSet:
    feats, labels, K, flags = _decode(Path(path).read_bytes())
    if flags & FLAG_AUX_SIMILARITY:
        raise FeatureFileError("file holds an outlier dump; use load_outliers")
    return LabeledFeatureSet(feats, labels, K, normalized=bool(flags & FLAG_NORMALIZED))


def save_outliers(batch: OutlierBatch, num_classes: int, path):
    """Outlier vectors with the similarity as an extra column and anchors as labels."""
    table = np.column_stack([batch.vectors, batch.similarities])
    Path(path).write_bytes(_encode(table, batch.anchors, num_classes, FLAG_AUX_SIMILARITY))


def load_outliers(path):
    """Returns (vectors, anchors, similarities)."""
    feats, labels, K, flags = _decode(Path(path).read_bytes())
    if not flags & FLAG_AUX_SIMILARITY:
        raise FeatureFileError("file is not an outlier dump")
    return feats[:, :-1], labels, feats[:, -1]


def export_csv(fs: LabeledFeatureSet, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(fs.dim)] + ["label"])
        for i in range(fs.n):
            lab = "" if fs.labels is None else int(fs.labels[i])
            w.writerow([f"{v:.17g}" for v in fs.features[i]] + [lab])


def import_csv(path, num_classes: int | None = None, normalized: bool | None = None) -> LabeledFeatureSet:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][-1] != "label":
        raise FeatureFileError("CSV header must be f0,...,f{d-1},label")
    d = len(rows[0]) - 1
    body = rows[1:]
    feats = np.array([[float(v) for v in r[:d]] for r in body]).reshape(len(body), d)
    raw_labels = [r[d] for r in body]
    labels = None if all(v == "" for v in raw_labels) else np.array([int(v) for v in raw_labels])
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels is not None and labels.size else 1
    if normalized is None:
        normalized = bool(feats.size) and bool(np.all(np.abs(np.linalg.norm(feats, axis=1) - 1) <= 1e-6))
    return LabeledFeatureSet(feats, labels, num_classes, normalized)
