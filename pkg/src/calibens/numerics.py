"""Deterministic numerics for training small classifier heads and combiners.

Everything works on plain float64 numpy arrays ("matrices" are 2-D, row-major).
Forward and backward passes are written out by hand; the only loss anywhere is
mean cross-entropy after softmax. All randomness flows through RngStream so a
single integer seed reproduces a run bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, LabelError

U64_MASK = (1 << 64) - 1

PROB_EPS = 1e-12  # clamp for log() in cross-entropy


def derive_seed(seed: int, index: int) -> int:
    """Sub-stream seed: base seed plus a fixed offset, wrapped to 64 bits."""
    return (int(seed) + int(index)) & U64_MASK


class RngStream:
    """Seeded deterministic random stream.

    Backed by numpy's PCG64 generator: the same 64-bit seed yields the same
    draw sequence on every platform. Sub-streams are derived by fixed integer
    offsets on the seed (see derive_seed), never by splitting state.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & U64_MASK
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def derive(self, index: int) -> "RngStream":
        return RngStream(derive_seed(self.seed, index))

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def standard_normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(size=shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def random(self, shape=None) -> np.ndarray:
        return self._gen.random(size=shape)


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a contiguous 2-D float64 array."""
    out = np.ascontiguousarray(a, dtype=np.float64)
    if out.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {out.shape}")
    return out


def linear_forward(inputs: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map: out[n, c] = sum_d inputs[n, d] * weights[c, d] + bias[c]."""
    inputs = as_matrix(inputs, "inputs")
    weights = as_matrix(weights, "weights")
    bias = np.asarray(bias, dtype=np.float64)
    if inputs.shape[1] != weights.shape[1]:
        raise DimensionError(
            f"inputs {inputs.shape} and weights {weights.shape} disagree on feature width"
        )
    if bias.shape != (weights.shape[0],):
        raise DimensionError(
            f"bias {bias.shape} does not match weights {weights.shape}"
        )
    return inputs @ weights.T + bias


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction for stability."""
    logits = as_matrix(logits, "logits")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def dropout_mask(shape, p: float, rng: RngStream) -> np.ndarray:
    """Inverted-scaling dropout mask: entries are 0 with probability p, else 1/(1-p).

    Applying the mask only during training makes evaluation a no-op.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return np.ones(shape, dtype=np.float64)
    keep = rng.random(shape) >= p
    return keep.astype(np.float64) / (1.0 - p)


def _check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise DimensionError(f"labels must be 1-D, got shape {labels.shape}")
    bad = np.nonzero((labels < 0) | (labels >= num_classes))[0]
    if bad.size:
        i = int(bad[0])
        raise LabelError(
            f"label {int(labels[i])} at index {i} outside [0, {num_classes})"
        )
    return labels.astype(np.int64)


def cross_entropy(probs: np.ndarray, labels) -> float:
    """Mean of -log(probs[n, label_n]), probabilities clamped at 1e-12."""
    probs = as_matrix(probs, "probs")
    labels = _check_labels(labels, probs.shape[1])
    if labels.shape[0] != probs.shape[0]:
        raise DimensionError(
            f"probs {probs.shape} and labels {labels.shape} disagree on sample count"
        )
    picked = probs[np.arange(probs.shape[0]), labels]
    return float(-np.log(np.maximum(picked, PROB_EPS)).mean())


def _softmax_ce_grad(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Loss and dL/dlogits for mean cross-entropy after softmax."""
    probs = softmax(logits)
    loss = cross_entropy(probs, labels)
    grad = probs.copy()
    grad[np.arange(len(labels)), labels] -= 1.0
    grad /= len(labels)
    return loss, grad


def backward_linear(inputs, weights, bias, labels):
    """Gradients of mean softmax cross-entropy for a single affine layer.

    Returns (loss, d_weights, d_bias).
    """
    inputs = as_matrix(inputs, "inputs")
    labels = _check_labels(labels, np.asarray(weights).shape[0])
    logits = linear_forward(inputs, weights, bias)
    loss, dz = _softmax_ce_grad(logits, labels)
    d_weights = dz.T @ inputs
    d_bias = dz.sum(axis=0)
    return loss, d_weights, d_bias


def backward_mlp(inputs, w1, b1, w2, b2, labels, mask: np.ndarray | None = None):
    """Gradients for affine -> ReLU -> (dropout mask) -> affine -> softmax CE.

    mask is a precomputed dropout mask (training mode) or None (evaluation).
    Returns (loss, d_w1, d_b1, d_w2, d_b2).
    """
    inputs = as_matrix(inputs, "inputs")
    labels = _check_labels(labels, np.asarray(w2).shape[0])
    z1 = linear_forward(inputs, w1, b1)
    a1 = relu(z1)
    if mask is not None:
        if mask.shape != a1.shape:
            raise DimensionError(f"mask {mask.shape} does not match hidden {a1.shape}")
        a1 = a1 * mask
    logits = linear_forward(a1, w2, b2)
    loss, dz2 = _softmax_ce_grad(logits, labels)
    d_w2 = dz2.T @ a1
    d_b2 = dz2.sum(axis=0)
    da1 = dz2 @ np.asarray(w2, dtype=np.float64)
    if mask is not None:
        da1 = da1 * mask
    dz1 = da1 * (z1 > 0.0)
    d_w1 = dz1.T @ inputs
    d_b1 = dz1.sum(axis=0)
    return loss, d_w1, d_b1, d_w2, d_b2


@dataclass
class SgdState:
    """SGD with momentum and (coupled) weight decay over a list of parameters."""

    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocity: list = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate <= 0.0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0.0:
            raise ConfigError(f"weight decay must be non-negative, got {self.weight_decay}")

    @classmethod
    def for_params(cls, params, learning_rate, momentum=0.0, weight_decay=0.0):
        state = cls(learning_rate, momentum, weight_decay)
        state.velocity = [np.zeros_like(p) for p in params]
        return state


def sgd_step(params: list, grads: list, state: SgdState) -> list:
    """One update: v <- momentum*v + (grad + wd*param); param <- param - lr*v.

    Mutates params and state.velocity in place; returns params.
    """
    if not state.velocity:
        state.velocity = [np.zeros_like(p) for p in params]
    for p, g, v in zip(params, grads, state.velocity, strict=True):
        if p.shape != g.shape or p.shape != v.shape:
            raise DimensionError(
                f"param {p.shape}, grad {g.shape}, velocity {v.shape} must all match"
            )
        v *= state.momentum
        v += g + state.weight_decay * p
        p -= state.learning_rate * v
    return params


IMPROVEMENT_THRESHOLD = 1e-6  # absolute improvement below this does not count


@dataclass
class PlateauScheduler:
    """Multiplies the learning rate by `factor` once the monitored metric has
    failed to improve for more than `patience` consecutive epochs."""

    factor: float = 0.5
    patience: int = 5
    min_lr: float = 1e-6
    threshold: float = IMPROVEMENT_THRESHOLD
    best_metric: float = float("inf")
    epochs_since_improvement: int = 0

    def __post_init__(self):
        if not 0.0 < self.factor < 1.0:
            raise ConfigError(f"factor must be in (0, 1), got {self.factor}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")

    def step(self, val_metric: float, learning_rate: float) -> float:
        """Record one epoch's metric; return the (possibly reduced) learning rate."""
        if val_metric <= self.best_metric - self.threshold:
            self.best_metric = val_metric
            self.epochs_since_improvement = 0
            return learning_rate
        self.epochs_since_improvement += 1
        if self.epochs_since_improvement > self.patience:
            self.epochs_since_improvement = 0
            return max(learning_rate * self.factor, self.min_lr)
        return learning_rate


def plateau_step(sched: PlateauScheduler, val_metric: float, learning_rate: float) -> float:
    return sched.step(val_metric, learning_rate)


@dataclass
class EarlyStopper:
    """Signals stop once the metric has not improved for more than `patience` epochs."""

    patience: int = 15
    threshold: float = IMPROVEMENT_THRESHOLD
    best_metric: float = float("inf")
    epochs_since_improvement: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")

    def step(self, val_metric: float) -> bool:
        if val_metric <= self.best_metric - self.threshold:
            self.best_metric = val_metric
            self.epochs_since_improvement = 0
            return False
        self.epochs_since_improvement += 1
        return self.epochs_since_improvement > self.patience
