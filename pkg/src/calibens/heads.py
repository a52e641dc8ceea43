"""Seeded linear classifier heads trained on frozen features.

Each head is a single fully connected layer trained with mini-batch SGD on
softmax cross-entropy. The validation loss drives a reduce-on-plateau
learning-rate schedule and early stopping, and the parameters returned are
the snapshot with the lowest validation loss seen. A family of m heads
differs only in its seeds (head i uses base_seed + i), so members can be
trained concurrently with bit-identical results.

Head files (magic ``HDW1``) are little-endian:

    HDW1 | u32 D | u32 C | u64 seed | C*D x f32 weights (row-major) | C x f32 bias
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import FeatureDataset
from .errors import CalibensError, ConfigError, DataError, DimensionError, FormatError, TrainingError
from .numerics import (
    EarlyStopper,
    PlateauScheduler,
    RngStream,
    SgdState,
    backward_linear,
    cross_entropy,
    derive_seed,
    linear_forward,
    sgd_step,
    softmax,
)

HEAD_MAGIC = b"HDW1"

# history entries are (epoch, train_loss, val_loss, learning_rate)
EpochRecord = tuple[int, float, float, float]


@dataclass(eq=False)
class LinearHead:
    weights: np.ndarray  # (C, D)
    bias: np.ndarray  # (C,)
    seed: int
    training_history: list[EpochRecord] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def param_count(self) -> int:
        return self.weights.size + self.bias.size


@dataclass
class HeadTrainConfig:
    initial_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    max_epochs: int = 100
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    early_stop_patience: int = 15
    seed: int = 0

    def __post_init__(self):
        if self.initial_lr <= 0.0:
            raise ConfigError(f"initial learning rate must be positive, got {self.initial_lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 0:
            raise ConfigError(f"max epochs must be >= 0, got {self.max_epochs}")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ConfigError("patiences must be >= 1")


def _init_params(dim: int, num_classes: int, stream: RngStream):
    bound = 1.0 / np.sqrt(dim)
    weights = stream.uniform(-bound, bound, (num_classes, dim))
    bias = np.zeros(num_classes)
    return weights, bias


def init_head(dim: int, num_classes: int, seed: int) -> LinearHead:
    """Fresh head: weights uniform in [-1/sqrt(D), 1/sqrt(D)], bias zero."""
    if dim < 1 or num_classes < 1:
        raise ConfigError(f"dim and num_classes must be >= 1, got {dim}, {num_classes}")
    weights, bias = _init_params(dim, num_classes, RngStream(seed))
    return LinearHead(weights=weights, bias=bias, seed=int(seed))


def head_predict(head: LinearHead, features: np.ndarray) -> np.ndarray:
    """Logits for a feature batch; apply softmax downstream as needed."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != head.dim:
        raise DimensionError(
            f"features {features.shape} do not match head weights {head.weights.shape}"
        )
    return linear_forward(features, head.weights, head.bias)


def _validation_loss(weights, bias, dataset: FeatureDataset) -> float:
    probs = softmax(linear_forward(dataset.features, weights, bias))
    return cross_entropy(probs, dataset.labels)


def train_head(train: FeatureDataset, val: FeatureDataset, cfg: HeadTrainConfig) -> LinearHead:
    """Train one head; returns the snapshot with the lowest validation loss."""
    if train.dim != val.dim or train.num_classes != val.num_classes:
        raise DataError(
            f"train (D={train.dim}, C={train.num_classes}) and "
            f"val (D={val.dim}, C={val.num_classes}) must share D and C"
        )
    stream = RngStream(cfg.seed)
    weights, bias = _init_params(train.dim, train.num_classes, stream)
    if cfg.max_epochs == 0:
        return LinearHead(weights=weights, bias=bias, seed=cfg.seed)

    sgd = SgdState.for_params([weights, bias], cfg.initial_lr, cfg.momentum, cfg.weight_decay)
    sched = PlateauScheduler(factor=cfg.plateau_factor, patience=cfg.plateau_patience)
    stopper = EarlyStopper(patience=cfg.early_stop_patience)
    best_val = float("inf")
    best_weights, best_bias = weights.copy(), bias.copy()
    history: list[EpochRecord] = []

    for epoch in range(1, cfg.max_epochs + 1):
        lr_used = sgd.learning_rate
        order = stream.permutation(train.n)
        loss_sum = 0.0
        for start in range(0, train.n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            loss, d_w, d_b = backward_linear(
                train.features[batch], weights, bias, train.labels[batch]
            )
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch}", epoch=epoch)
            sgd_step([weights, bias], [d_w, d_b], sgd)
            loss_sum += loss * batch.shape[0]
        train_loss = loss_sum / train.n
        val_loss = _validation_loss(weights, bias, val)
        if not np.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}", epoch=epoch)
        history.append((epoch, train_loss, val_loss, lr_used))
        if val_loss < best_val:
            best_val = val_loss
            best_weights, best_bias = weights.copy(), bias.copy()
        sgd.learning_rate = sched.step(val_loss, sgd.learning_rate)
        if stopper.step(val_loss):
            break

    return LinearHead(
        weights=best_weights, bias=best_bias, seed=cfg.seed, training_history=history
    )


def train_head_family(
    train: FeatureDataset,
    val: FeatureDataset,
    m: int,
    base_seed: int,
    cfg: HeadTrainConfig,
    jobs: int = 1,
) -> list[LinearHead]:
    """Train m heads on identical data, head i seeded with base_seed + i.

    Heads are independent, so jobs > 1 trains them concurrently; results are
    returned in index order and are bit-identical to a sequential run.
    """
    if m < 1:
        raise ConfigError(f"head count must be >= 1, got {m}")

    def train_one(i: int) -> LinearHead:
        try:
            return train_head(train, val, replace(cfg, seed=derive_seed(base_seed, i)))
        except CalibensError as exc:
            raise TrainingError(f"head {i}: {exc}") from exc

    if jobs <= 1 or m == 1:
        return [train_one(i) for i in range(m)]
    with ThreadPoolExecutor(max_workers=min(jobs, m)) as pool:
        return list(pool.map(train_one, range(m)))


def save_head(head: LinearHead, path) -> None:
    header = HEAD_MAGIC + struct.pack("<IIQ", head.dim, head.num_classes, head.seed)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(head.weights.astype("<f4").tobytes())
        fh.write(head.bias.astype("<f4").tobytes())


def load_head(path) -> LinearHead:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != HEAD_MAGIC:
        raise FormatError(f"{path}: bad magic, expected {HEAD_MAGIC!r}", offset=0)
    if len(raw) < 20:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    dim, num_classes, seed = struct.unpack("<IIQ", raw[4:20])
    expected = 20 + 4 * (num_classes * dim + num_classes)
    if len(raw) != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes, found {len(raw)}",
            offset=min(len(raw), expected),
        )
    weights = np.frombuffer(raw, dtype="<f4", count=num_classes * dim, offset=20)
    bias = np.frombuffer(raw, dtype="<f4", count=num_classes, offset=20 + 4 * num_classes * dim)
    return LinearHead(
        weights=weights.astype(np.float64).reshape(num_classes, dim),
        bias=bias.astype(np.float64),
        seed=seed,
    )
