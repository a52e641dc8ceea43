"""Datasets, file formats, splitting and synthetic generators.

Feature datasets are frozen-backbone feature vectors plus integer labels.
On disk they use a little-endian binary layout (magic ``FDS1``):

    FDS1 | u32 N | u32 D | u32 C | N x (D x f32 features, u32 label)

Probability matrices interchange through a second layout (magic ``PRB1``):

    PRB1 | u32 N | u32 C | N*C x f32 (row-major)

Files store 32-bit floats; in memory everything is 64-bit. A plain-text CSV
importer (header ``f0,...,f{D-1},label``) is provided for interoperability.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError, StratificationError
from .metrics import PredictionSet
from .numerics import RngStream

FDS_MAGIC = b"FDS1"
PRB_MAGIC = b"PRB1"


@dataclass(eq=False)
class FeatureDataset:
    """Frozen features plus labels; immutable after construction."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = ""

    def __post_init__(self):
        features = np.ascontiguousarray(self.features, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if features.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {features.shape}")
        n = features.shape[0]
        if n < 1:
            raise DataError("a dataset needs at least one sample")
        if labels.shape != (n,):
            raise DataError(
                f"labels shape {labels.shape} does not match {n} feature rows"
            )
        if self.num_classes < 1:
            raise DataError(f"class count must be >= 1, got {self.num_classes}")
        bad = np.nonzero((labels < 0) | (labels >= self.num_classes))[0]
        if bad.size:
            i = int(bad[0])
            raise DataError(
                f"label {int(labels[i])} at index {i} outside [0, {self.num_classes})"
            )
        # enforce the read-only contract: training must never mutate features
        features.setflags(write=False)
        labels.setflags(write=False)
        self.features = features
        self.labels = labels

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class SynthSpec:
    """Gaussian-cluster generator parameters."""

    num_classes: int
    dim: int
    num_samples: int
    cluster_separation: float
    label_noise: float
    seed: int

    def __post_init__(self):
        if self.num_classes < 1 or self.dim < 1 or self.num_samples < 1:
            raise ConfigError("num_classes, dim and num_samples must all be >= 1")
        if self.cluster_separation < 0.0:
            raise ConfigError(f"cluster separation must be >= 0, got {self.cluster_separation}")
        if not 0.0 <= self.label_noise < 1.0:
            raise ConfigError(f"label noise must be in [0, 1), got {self.label_noise}")
        if self.label_noise > 0.0 and self.num_classes < 2:
            raise ConfigError("label noise needs at least two classes")


@dataclass
class MiscalSpec:
    """Fixture with a known confidence level and true accuracy; the expected
    calibration error is |confidence_level - true_accuracy|."""

    num_samples: int
    num_classes: int
    confidence_level: float
    true_accuracy: float
    seed: int

    def __post_init__(self):
        if self.num_samples < 1 or self.num_classes < 1:
            raise ConfigError("num_samples and num_classes must be >= 1")
        if not 0.0 < self.confidence_level <= 1.0:
            raise ConfigError(f"confidence level must be in (0, 1], got {self.confidence_level}")
        if not 0.0 <= self.true_accuracy <= 1.0:
            raise ConfigError(f"true accuracy must be in [0, 1], got {self.true_accuracy}")
        if self.true_accuracy < 1.0 and self.num_classes < 2:
            raise ConfigError("imperfect accuracy needs at least two classes")


def _dataset_record_dtype(dim: int) -> np.dtype:
    return np.dtype([("f", "<f4", (dim,)), ("y", "<u4")])


def save_dataset(dataset: FeatureDataset, path) -> None:
    records = np.empty(dataset.n, dtype=_dataset_record_dtype(dataset.dim))
    records["f"] = dataset.features.astype("<f4")
    records["y"] = dataset.labels.astype("<u4")
    header = FDS_MAGIC + struct.pack("<III", dataset.n, dataset.dim, dataset.num_classes)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(records.tobytes())


def load_dataset(path) -> FeatureDataset:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != FDS_MAGIC:
        raise FormatError(f"{path}: bad magic, expected {FDS_MAGIC!r}", offset=0)
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    n, dim, num_classes = struct.unpack("<III", raw[4:16])
    if n < 1 or dim < 1 or num_classes < 1:
        raise FormatError(f"{path}: N={n}, D={dim}, C={num_classes} must all be >= 1", offset=4)
    record_size = 4 * dim + 4
    expected = 16 + n * record_size
    if len(raw) != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes, found {len(raw)}",
            offset=min(len(raw), expected),
        )
    records = np.frombuffer(raw, dtype=_dataset_record_dtype(dim), count=n, offset=16)
    labels = records["y"].astype(np.int64)
    bad = np.nonzero(labels >= num_classes)[0]
    if bad.size:
        i = int(bad[0])
        raise FormatError(
            f"{path}: label {int(labels[i])} at record {i} >= C={num_classes}",
            offset=16 + i * record_size + 4 * dim,
        )
    return FeatureDataset(
        features=records["f"].astype(np.float64),
        labels=labels,
        num_classes=num_classes,
        name=Path(path).stem,
    )


def import_csv(path, num_classes: int | None = None) -> FeatureDataset:
    """Read ``f0,...,f{D-1},label`` rows; C defaults to max(label)+1."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        dim = len(header) - 1
        if dim < 1 or header != [f"f{i}" for i in range(dim)] + ["label"]:
            raise FormatError(f"{path}: header must be f0,...,f{{D-1}},label")
        features, labels = [], []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != dim + 1:
                raise FormatError(f"{path}: line {line_no} has {len(row)} fields, expected {dim + 1}")
            try:
                features.append([float(v) for v in row[:dim]])
                labels.append(int(row[dim]))
            except ValueError as exc:
                raise FormatError(f"{path}: line {line_no}: {exc}") from None
    if not features:
        raise FormatError(f"{path}: no data rows")
    labels_arr = np.asarray(labels, dtype=np.int64)
    if num_classes is None:
        num_classes = int(labels_arr.max()) + 1
    return FeatureDataset(
        features=np.asarray(features, dtype=np.float64),
        labels=labels_arr,
        num_classes=num_classes,
        name=Path(path).stem,
    )


def save_probs(probs: np.ndarray, path) -> None:
    probs = np.ascontiguousarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise DataError(f"probability matrix must be 2-D, got shape {probs.shape}")
    n, c = probs.shape
    with open(path, "wb") as fh:
        fh.write(PRB_MAGIC + struct.pack("<II", n, c))
        fh.write(probs.astype("<f4").tobytes())


def load_probs(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != PRB_MAGIC:
        raise FormatError(f"{path}: bad magic, expected {PRB_MAGIC!r}", offset=0)
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    n, c = struct.unpack("<II", raw[4:12])
    expected = 12 + 4 * n * c
    if len(raw) != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes, found {len(raw)}",
            offset=min(len(raw), expected),
        )
    flat = np.frombuffer(raw, dtype="<f4", count=n * c, offset=12)
    return flat.astype(np.float64).reshape(n, c)


def split(dataset: FeatureDataset, val_fraction: float, seed: int):
    """Stratified train/validation split.

    Each class is shuffled with the seeded stream and contributes a validation
    share within half a sample of val_fraction (so always within +-1). Returns
    (train, val); the two are disjoint and their union is the input.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError(f"val fraction must be in (0, 1), got {val_fraction}")
    stream = RngStream(seed)
    train_idx, val_idx = [], []
    for c in range(dataset.num_classes):
        class_idx = np.nonzero(dataset.labels == c)[0]
        n_c = class_idx.shape[0]
        if n_c < 2:
            raise StratificationError(
                f"class {c} has {n_c} sample(s); stratified split needs >= 2"
            )
        n_val = min(int(round(val_fraction * n_c)), n_c - 1)
        shuffled = class_idx[stream.permutation(n_c)]
        val_idx.append(shuffled[:n_val])
        train_idx.append(shuffled[n_val:])
    train_sel = np.sort(np.concatenate(train_idx))
    val_sel = np.sort(np.concatenate(val_idx))

    def subset(sel, tag):
        return FeatureDataset(
            features=dataset.features[sel].copy(),
            labels=dataset.labels[sel].copy(),
            num_classes=dataset.num_classes,
            name=f"{dataset.name}-{tag}" if dataset.name else tag,
        )

    return subset(train_sel, "train"), subset(val_sel, "val")


def synth_clusters(spec: SynthSpec) -> FeatureDataset:
    """Balanced Gaussian clusters.

    Class centers sit on a sphere of radius cluster_separation (random
    directions), samples have unit variance around their center, and a
    label_noise fraction of labels is reassigned uniformly to a different
    class. The features keep their original cluster, so the best achievable
    accuracy at large separation is roughly 1 - label_noise.
    """
    stream = RngStream(spec.seed)
    c, d, n = spec.num_classes, spec.dim, spec.num_samples
    if spec.cluster_separation > 0.0:
        directions = stream.standard_normal((c, d))
        norms = np.linalg.norm(directions, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        centers = spec.cluster_separation * directions / norms
    else:
        centers = np.zeros((c, d))
    labels = np.arange(n, dtype=np.int64) % c
    features = centers[labels] + stream.standard_normal((n, d))
    if spec.label_noise > 0.0:
        num_noisy = int(round(spec.label_noise * n))
        noisy = stream.permutation(n)[:num_noisy]
        offsets = stream.integers(1, c, num_noisy)
        labels = labels.copy()
        labels[noisy] = (labels[noisy] + offsets) % c
    return FeatureDataset(
        features=features,
        labels=labels,
        num_classes=c,
        name=f"clusters-c{c}-d{d}-n{n}-s{spec.seed}",
    )


def synth_cluster_pair(spec: SynthSpec, test_samples: int):
    """Matched train/test datasets sharing one cluster geometry.

    A single draw of num_samples + test_samples is carved into a training set
    (first num_samples rows) and a test set (the rest), so both come from the
    same clusters while sharing no samples.
    """
    if test_samples < 1:
        raise ConfigError(f"test sample count must be >= 1, got {test_samples}")
    full_spec = SynthSpec(
        num_classes=spec.num_classes,
        dim=spec.dim,
        num_samples=spec.num_samples + test_samples,
        cluster_separation=spec.cluster_separation,
        label_noise=spec.label_noise,
        seed=spec.seed,
    )
    full = synth_clusters(full_spec)
    n = spec.num_samples

    def carve(sel, tag):
        return FeatureDataset(
            features=full.features[sel].copy(),
            labels=full.labels[sel].copy(),
            num_classes=full.num_classes,
            name=f"clusters-c{spec.num_classes}-d{spec.dim}-s{spec.seed}-{tag}",
        )

    return carve(slice(0, n), "train"), carve(slice(n, None), "test")


def synth_miscalibrated_predictions(spec: MiscalSpec) -> PredictionSet:
    """Prediction set with constant confidence and a known hit rate.

    Every sample reports confidence_level; the label matches the prediction
    with probability true_accuracy, otherwise it is a uniformly random other
    class.
    """
    stream = RngStream(spec.seed)
    n, c = spec.num_samples, spec.num_classes
    predicted = stream.integers(0, c, n).astype(np.int64)
    hit = stream.random(n) < spec.true_accuracy
    labels = predicted.copy()
    if c > 1:
        miss = ~hit
        offsets = stream.integers(1, c, n)  # drawn for all samples to keep the stream aligned
        labels[miss] = (predicted[miss] + offsets[miss]) % c
    return PredictionSet(
        predicted_class=predicted,
        confidence=np.full(n, spec.confidence_level, dtype=np.float64),
        labels=labels,
    )


def chance_level_bound(num_classes: int, n: int, sigmas: float = 3.0) -> float:
    """Upper bound on accuracy achievable by guessing: 1/C plus a binomial
    deviation allowance of `sigmas` standard errors."""
    p = 1.0 / num_classes
    return p + sigmas * math.sqrt(p * (1.0 - p) / n)
