"""Combine the outputs of m heads into a single prediction.

Two parameter-free rules (probability averaging, majority voting) and four
trainable combiner models:

* ``SL``   one fully connected layer over the m*C concatenated head outputs
* ``DL``   two layers with ReLU and dropout, hidden width ceil(m*C / 2)
* ``DLL``  like DL with hidden width m*C
* ``SLpC`` one m-input layer per class, wired only to that class's m values

Combiner model files (magic ``MMD1``) are little-endian:

    MMD1 | u8 kind | u32 m | u32 C | u32 h (0 when unused) | f32 dropout_p |
    u64 seed | parameter blocks as f32 (each layer: weights row-major, then bias)
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DimensionError, FormatError, TrainingError
from .metrics import PredictionSet, predictions_from_probs
from .numerics import (
    PlateauScheduler,
    RngStream,
    SgdState,
    _softmax_ce_grad,
    backward_linear,
    backward_mlp,
    cross_entropy,
    dropout_mask,
    linear_forward,
    relu,
    sgd_step,
    softmax,
)

KINDS = ("SL", "DL", "DLL", "SLpC")
KIND_TAGS = {"SL": 0, "DL": 1, "DLL": 2, "SLpC": 3}
META_MAGIC = b"MMD1"


@dataclass(eq=False)
class HeadOutputs:
    """The m per-head output matrices, all shaped (N, C).

    rows_are_probs marks whether rows are probability vectors (the default)
    or raw logits; averaging and voting require probabilities.
    """

    per_head: list
    rows_are_probs: bool = True

    def __post_init__(self):
        if not self.per_head:
            raise DataError("need at least one head output")
        mats = [np.ascontiguousarray(p, dtype=np.float64) for p in self.per_head]
        shape = mats[0].shape
        if len(shape) != 2:
            raise DimensionError(f"head outputs must be 2-D, got shape {shape}")
        for i, mat in enumerate(mats):
            if mat.shape != shape:
                raise DimensionError(
                    f"head {i} output {mat.shape} does not match head 0 output {shape}"
                )
        if self.rows_are_probs:
            for i, mat in enumerate(mats):
                if np.any(mat < 0.0) or np.any(np.abs(mat.sum(axis=1) - 1.0) > 1e-9):
                    raise DataError(f"head {i} rows are not probability vectors")
        self.per_head = mats

    @property
    def m(self) -> int:
        return len(self.per_head)

    @property
    def n(self) -> int:
        return self.per_head[0].shape[0]

    @property
    def num_classes(self) -> int:
        return self.per_head[0].shape[1]

    def stacked(self) -> np.ndarray:
        """(m, N, C) view of the head outputs."""
        return np.stack(self.per_head, axis=0)

    def concatenated(self) -> np.ndarray:
        """(N, m*C) head-major concatenation: head 0's C columns, then head 1's, ..."""
        return np.concatenate(self.per_head, axis=1)


def _mean_over_heads(stacked: np.ndarray) -> np.ndarray:
    # sort per cell before summing so head order never affects the rounding
    return np.sort(stacked, axis=0).sum(axis=0) / stacked.shape[0]


def combine_average(outputs: HeadOutputs, labels) -> PredictionSet:
    """Mean of the head probability matrices."""
    if not outputs.rows_are_probs:
        raise DataError("averaging is defined on probability outputs")
    return predictions_from_probs(_mean_over_heads(outputs.stacked()), labels)


def combine_vote(outputs: HeadOutputs, labels) -> PredictionSet:
    """Majority vote over the heads' argmax classes.

    Vote ties go to the tied class with the higher mean head probability, then
    to the lowest class index. The reported confidence is the mean over all
    heads of their probability for the winning class.
    """
    if not outputs.rows_are_probs:
        raise DataError("voting is defined on probability outputs")
    stacked = outputs.stacked()
    n, c = outputs.n, outputs.num_classes
    votes = np.argmax(stacked, axis=2)  # (m, N)
    counts = np.zeros((n, c), dtype=np.int64)
    rows = np.arange(n)
    for i in range(outputs.m):
        counts[rows, votes[i]] += 1
    mean_probs = _mean_over_heads(stacked)
    tied = counts == counts.max(axis=1, keepdims=True)
    # tied classes score 1+meanprob > any untied score 0; argmax keeps lowest index on exact ties
    winner = np.argmax(np.where(tied, 1.0 + mean_probs, 0.0), axis=1)
    return PredictionSet(
        predicted_class=winner,
        confidence=mean_probs[rows, winner],
        labels=np.asarray(labels, dtype=np.int64),
    )


def hidden_width(kind: str, m: int, num_classes: int) -> int:
    if kind == "DL":
        return math.ceil(m * num_classes / 2)
    if kind == "DLL":
        return m * num_classes
    return 0


def param_count(kind: str, m: int, num_classes: int) -> int:
    """Closed-form trainable parameter count per combiner kind."""
    if kind == "SL":
        return m * num_classes * num_classes + num_classes
    if kind in ("DL", "DLL"):
        h = hidden_width(kind, m, num_classes)
        return m * num_classes * h + h + h * num_classes + num_classes
    if kind == "SLpC":
        return num_classes * (m + 1)
    raise ConfigError(f"unknown combiner kind {kind!r}; expected one of {KINDS}")


@dataclass(eq=False)
class Metamodel:
    """Trainable combiner; `layers` holds (weights, bias) pairs per kind:
    SL and SLpC one pair, DL and DLL two."""

    kind: str
    num_heads: int
    num_classes: int
    hidden: int
    dropout_p: float
    seed: int
    layers: list = field(default_factory=list)
    training_history: list = field(default_factory=list)

    @property
    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)


def build_metamodel(
    kind: str, m: int, num_classes: int, seed: int, dropout_p: float = 0.5
) -> Metamodel:
    """Initialize a combiner; each layer's weights and bias are drawn uniformly
    from [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    if kind not in KINDS:
        raise ConfigError(f"unknown combiner kind {kind!r}; expected one of {KINDS}")
    if m < 1 or num_classes < 1:
        raise ConfigError(f"m and num_classes must be >= 1, got {m}, {num_classes}")
    if kind in ("DL", "DLL") and not 0.0 <= dropout_p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {dropout_p}")
    stream = RngStream(seed)

    def layer(fan_in, out_width, in_width):
        bound = 1.0 / np.sqrt(fan_in)
        return (
            stream.uniform(-bound, bound, (out_width, in_width)),
            stream.uniform(-bound, bound, out_width),
        )

    h = hidden_width(kind, m, num_classes)
    if kind == "SL":
        layers = [layer(m * num_classes, num_classes, m * num_classes)]
    elif kind in ("DL", "DLL"):
        layers = [
            layer(m * num_classes, h, m * num_classes),
            layer(h, num_classes, h),
        ]
    else:  # SLpC: weight row c holds class c's m head inputs
        layers = [layer(m, num_classes, m)]
    meta = Metamodel(
        kind=kind,
        num_heads=m,
        num_classes=num_classes,
        hidden=h,
        dropout_p=dropout_p if kind in ("DL", "DLL") else 0.0,
        seed=int(seed),
        layers=layers,
    )
    assert meta.param_count == param_count(kind, m, num_classes)
    return meta


def _check_outputs(meta: Metamodel, outputs: HeadOutputs) -> None:
    if outputs.m != meta.num_heads or outputs.num_classes != meta.num_classes:
        raise DimensionError(
            f"outputs (m={outputs.m}, C={outputs.num_classes}) do not match "
            f"{meta.kind} model (m={meta.num_heads}, C={meta.num_classes})"
        )


def _slpc_logits(weights, bias, stacked):
    # logit[n, c] = sum_i weights[c, i] * stacked[i, n, c] + bias[c]
    return np.einsum("cm,mnc->nc", weights, stacked) + bias


def metamodel_forward(
    meta: Metamodel,
    outputs: HeadOutputs,
    training_mode: bool = False,
    rng: RngStream | None = None,
) -> np.ndarray:
    """Logits of the combiner. Dropout applies only when training_mode is set
    (DL/DLL); evaluation mode ignores rng entirely."""
    _check_outputs(meta, outputs)
    if meta.kind == "SL":
        (w, b), = meta.layers
        return linear_forward(outputs.concatenated(), w, b)
    if meta.kind in ("DL", "DLL"):
        (w1, b1), (w2, b2) = meta.layers
        hidden = relu(linear_forward(outputs.concatenated(), w1, b1))
        if training_mode and meta.dropout_p > 0.0:
            if rng is None:
                raise ConfigError("training-mode dropout needs an RngStream")
            hidden = hidden * dropout_mask(hidden.shape, meta.dropout_p, rng)
        return linear_forward(hidden, w2, b2)
    (w, b), = meta.layers
    return _slpc_logits(w, b, outputs.stacked())


def combine_metamodel(meta: Metamodel, outputs: HeadOutputs, labels) -> PredictionSet:
    """Evaluation-mode combiner predictions."""
    probs = softmax(metamodel_forward(meta, outputs))
    return predictions_from_probs(probs, labels)


def metamodel_gradients(meta: Metamodel, outputs: HeadOutputs, labels, mask=None):
    """Loss and per-layer gradients of mean softmax cross-entropy.

    mask is a precomputed dropout mask over the hidden layer (DL/DLL training)
    or None for evaluation mode. Returns (loss, [(d_w, d_b), ...]).
    """
    _check_outputs(meta, outputs)
    labels = np.asarray(labels, dtype=np.int64)
    if meta.kind == "SL":
        (w, b), = meta.layers
        loss, d_w, d_b = backward_linear(outputs.concatenated(), w, b, labels)
        return loss, [(d_w, d_b)]
    if meta.kind in ("DL", "DLL"):
        (w1, b1), (w2, b2) = meta.layers
        loss, d_w1, d_b1, d_w2, d_b2 = backward_mlp(
            outputs.concatenated(), w1, b1, w2, b2, labels, mask=mask
        )
        return loss, [(d_w1, d_b1), (d_w2, d_b2)]
    (w, b), = meta.layers
    stacked = outputs.stacked()
    loss, dz = _softmax_ce_grad(_slpc_logits(w, b, stacked), labels)
    d_w = np.einsum("nc,mnc->cm", dz, stacked)
    d_b = dz.sum(axis=0)
    return loss, [(d_w, d_b)]


@dataclass
class MetaTrainConfig:
    epochs: int = 20
    initial_lr: float = 2e-4
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 128
    plateau_factor: float = 0.5
    plateau_patience: int = 3
    dropout_p: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.initial_lr <= 0.0:
            raise ConfigError(f"initial learning rate must be positive, got {self.initial_lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")


def _subset_outputs(outputs: HeadOutputs, idx: np.ndarray) -> HeadOutputs:
    sub = HeadOutputs.__new__(HeadOutputs)
    sub.per_head = [p[idx] for p in outputs.per_head]
    sub.rows_are_probs = outputs.rows_are_probs
    return sub


def train_metamodel(
    meta: Metamodel,
    train_outputs: HeadOutputs,
    train_labels,
    val_outputs: HeadOutputs,
    val_labels,
    cfg: MetaTrainConfig,
) -> Metamodel:
    """Mini-batch SGD for exactly cfg.epochs epochs (no early stopping), with a
    reduce-on-plateau schedule on the validation loss. Returns a new model
    holding the snapshot with the lowest validation loss; the input model is
    left untouched."""
    _check_outputs(meta, train_outputs)
    _check_outputs(meta, val_outputs)
    train_labels = np.asarray(train_labels, dtype=np.int64)
    val_labels = np.asarray(val_labels, dtype=np.int64)
    if train_labels.shape[0] != train_outputs.n or val_labels.shape[0] != val_outputs.n:
        raise DimensionError("labels do not match head-output sample counts")

    work = Metamodel(
        kind=meta.kind,
        num_heads=meta.num_heads,
        num_classes=meta.num_classes,
        hidden=meta.hidden,
        dropout_p=meta.dropout_p,
        seed=meta.seed,
        layers=[(w.copy(), b.copy()) for w, b in meta.layers],
    )
    params = [arr for pair in work.layers for arr in pair]
    sgd = SgdState.for_params(params, cfg.initial_lr, cfg.momentum, cfg.weight_decay)
    sched = PlateauScheduler(factor=cfg.plateau_factor, patience=cfg.plateau_patience)
    stream = RngStream(cfg.seed)
    use_dropout = work.kind in ("DL", "DLL") and work.dropout_p > 0.0

    n = train_outputs.n
    # the untrained model is snapshot candidate zero, so the selected model
    # can never validate worse than its starting point
    best_val = cross_entropy(softmax(metamodel_forward(work, val_outputs)), val_labels)
    if not np.isfinite(best_val):
        raise TrainingError("non-finite validation loss before training", epoch=0)
    best_layers = [(w.copy(), b.copy()) for w, b in work.layers]
    history = []
    for epoch in range(1, cfg.epochs + 1):
        lr_used = sgd.learning_rate
        order = stream.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            batch_outputs = _subset_outputs(train_outputs, batch)
            mask = None
            if use_dropout:
                mask = dropout_mask((batch.shape[0], work.hidden), work.dropout_p, stream)
            loss, grads = metamodel_gradients(work, batch_outputs, train_labels[batch], mask=mask)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch}", epoch=epoch)
            sgd_step(params, [g for pair in grads for g in pair], sgd)
            loss_sum += loss * batch.shape[0]
        train_loss = loss_sum / n
        val_probs = softmax(metamodel_forward(work, val_outputs))
        val_loss = cross_entropy(val_probs, val_labels)
        if not np.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}", epoch=epoch)
        history.append((epoch, train_loss, val_loss, lr_used))
        if val_loss < best_val:
            best_val = val_loss
            best_layers = [(w.copy(), b.copy()) for w, b in work.layers]
        sgd.learning_rate = sched.step(val_loss, sgd.learning_rate)

    return Metamodel(
        kind=work.kind,
        num_heads=work.num_heads,
        num_classes=work.num_classes,
        hidden=work.hidden,
        dropout_p=work.dropout_p,
        seed=work.seed,
        layers=best_layers,
        training_history=history,
    )


def save_metamodel(meta: Metamodel, path) -> None:
    header = META_MAGIC + struct.pack(
        "<BIIIfQ",
        KIND_TAGS[meta.kind],
        meta.num_heads,
        meta.num_classes,
        meta.hidden,
        meta.dropout_p,
        meta.seed,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for w, b in meta.layers:
            fh.write(w.astype("<f4").tobytes())
            fh.write(b.astype("<f4").tobytes())


def load_metamodel(path) -> Metamodel:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != META_MAGIC:
        raise FormatError(f"{path}: bad magic, expected {META_MAGIC!r}", offset=0)
    if len(raw) < 29:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    tag, m, num_classes, h, dropout_p, seed = struct.unpack("<BIIIfQ", raw[4:29])
    kinds_by_tag = {v: k for k, v in KIND_TAGS.items()}
    if tag not in kinds_by_tag:
        raise FormatError(f"{path}: unknown kind tag {tag}", offset=4)
    kind = kinds_by_tag[tag]
    if h != hidden_width(kind, m, num_classes):
        raise FormatError(
            f"{path}: hidden width {h} inconsistent with kind {kind}, m={m}, C={num_classes}",
            offset=13,
        )
    expected = 29 + 4 * param_count(kind, m, num_classes)
    if len(raw) != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes, found {len(raw)}",
            offset=min(len(raw), expected),
        )
    if kind == "SL":
        shapes = [(num_classes, m * num_classes)]
    elif kind in ("DL", "DLL"):
        shapes = [(h, m * num_classes), (num_classes, h)]
    else:
        shapes = [(num_classes, m)]
    offset = 29
    layers = []
    for out_width, in_width in shapes:
        w = np.frombuffer(raw, dtype="<f4", count=out_width * in_width, offset=offset)
        offset += 4 * out_width * in_width
        b = np.frombuffer(raw, dtype="<f4", count=out_width, offset=offset)
        offset += 4 * out_width
        layers.append(
            (w.astype(np.float64).reshape(out_width, in_width), b.astype(np.float64))
        )
    return Metamodel(
        kind=kind,
        num_heads=m,
        num_classes=num_classes,
        hidden=h,
        dropout_p=float(dropout_p),
        seed=seed,
        layers=layers,
    )
