"""Small CNN over GAF tensors with exact per-example gradients.

Architecture: two 'same'-padded 3x3 stride-1 convolutions with ReLU
(no pooling anywhere) followed by a single dense layer producing one
logit per pattern class. Loss is mean softmax cross-entropy. Everything
runs in float64 so finite-difference gradient checks hold tightly.

Parameters live in one flat vector; the structured tensors (conv kernels,
biases, dense matrix) are numpy views aliasing that vector, which is what
the differentially private optimizer clips and perturbs.

Two independent backward paths are provided: ``backward_per_example``
(one gradient row per input, assembled from batched matmuls) and
``backward_batch`` (direct tensordot contractions for the mean-loss
gradient). The mean of the first equals the second, a relationship the
test suite checks against central finite differences as well.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptySplit, LengthMismatch, ShapeMismatch


@dataclass(frozen=True)
class Architecture:
    """Shape constants for the classifier."""

    window: int = 10
    channels: int = 4
    filters1: int = 16
    filters2: int = 32
    kernel: int = 3
    classes: int = 8

    def shapes(self) -> dict[str, tuple[int, ...]]:
        k = self.kernel
        return {
            "conv1_w": (k, k, self.channels, self.filters1),
            "conv1_b": (self.filters1,),
            "conv2_w": (k, k, self.filters1, self.filters2),
            "conv2_b": (self.filters2,),
            "dense_w": (self.window * self.window * self.filters2, self.classes),
            "dense_b": (self.classes,),
        }

    def param_count(self) -> int:
        return sum(math.prod(s) for s in self.shapes().values())


class ModelParams:
    """Flat parameter vector plus structured views aliasing it."""

    def __init__(self, arch: Architecture, flat: np.ndarray):
        flat = np.ascontiguousarray(flat, dtype=np.float64)
        expected = arch.param_count()
        if flat.shape != (expected,):
            raise LengthMismatch(
                f"expected flat vector of length {expected}, got {flat.shape}")
        self.arch = arch
        self.flat = flat
        self._views: dict[str, np.ndarray] = {}
        offset = 0
        for name, shape in arch.shapes().items():
            size = math.prod(shape)
            self._views[name] = flat[offset:offset + size].reshape(shape)
            offset += size

    def __getattr__(self, name: str) -> np.ndarray:
        views = object.__getattribute__(self, "_views")
        if name in views:
            return views[name]
        raise AttributeError(name)

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, self.flat.copy())


def init_params(arch: Architecture, seed) -> ModelParams:
    """Fan-in-scaled uniform weights, zero biases; deterministic per seed."""
    rng = seed if isinstance(seed, np.random.Generator) \
        else np.random.default_rng(seed)
    pieces = []
    for name, shape in arch.shapes().items():
        if name.endswith("_b"):
            pieces.append(np.zeros(math.prod(shape)))
        else:
            fan_in = math.prod(shape[:-1])
            bound = math.sqrt(6.0 / fan_in)
            pieces.append(rng.uniform(-bound, bound, size=math.prod(shape)))
    return ModelParams(arch, np.concatenate(pieces))


@dataclass(frozen=True)
class TrainConfig:
    """Baseline trainer hyperparameters (momentum SGD)."""

    learning_rate: float = 0.006
    momentum: float = 0.9
    batch_size: int = 100
    epochs: int = 100
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ShapeMismatch(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ShapeMismatch(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ShapeMismatch("batch_size must be >= 1 and epochs >= 0")


@dataclass
class ForwardTrace:
    """Per-layer activations (and im2col buffers) for one backward pass."""

    col1: np.ndarray
    z1: np.ndarray
    col2: np.ndarray
    z2: np.ndarray
    flat_in: np.ndarray
    logits: np.ndarray


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Patch matrix (B, H*W, K*K*Cin) for a 'same'-padded stride-1 conv."""
    batch, h, wd, cin = x.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    col = np.empty((batch, h, wd, k * k * cin))
    for di in range(k):
        for dj in range(k):
            s = (di * k + dj) * cin
            col[:, :, :, s:s + cin] = xp[:, di:di + h, dj:dj + wd, :]
    return col.reshape(batch, h * wd, k * k * cin)


def _col2im(dcol: np.ndarray, shape: tuple[int, ...], k: int) -> np.ndarray:
    """Scatter-add patch gradients back to input shape; inverse of _im2col."""
    batch, h, wd, cin = shape
    pad = k // 2
    dcol = dcol.reshape(batch, h, wd, k * k * cin)
    dxp = np.zeros((batch, h + 2 * pad, wd + 2 * pad, cin))
    for di in range(k):
        for dj in range(k):
            s = (di * k + dj) * cin
            dxp[:, di:di + h, dj:dj + wd, :] += dcol[:, :, :, s:s + cin]
    return dxp[:, pad:pad + h, pad:pad + wd, :]


def _conv_same(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """'same'-padded stride-1 convolution (reference entry point)."""
    batch, h, wd, _ = x.shape
    k, f = w.shape[0], w.shape[3]
    col = _im2col(x, k)
    out = col.reshape(batch * h * wd, -1) @ w.reshape(-1, f)
    return out.reshape(batch, h, wd, f) + b


def _check_input(arch: Architecture, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1:] != (arch.window, arch.window, arch.channels):
        raise ShapeMismatch(
            f"expected input (B, {arch.window}, {arch.window}, "
            f"{arch.channels}), got {x.shape}")
    return x


def forward(params: ModelParams, x: np.ndarray) -> tuple[np.ndarray, ForwardTrace]:
    """Logits of shape (B, classes) plus the trace for backprop."""
    arch = params.arch
    x = _check_input(arch, x)
    batch = len(x)
    hw = arch.window * arch.window
    k = arch.kernel

    col1 = _im2col(x, k)
    z1 = (col1.reshape(batch * hw, -1) @ params.conv1_w.reshape(-1, arch.filters1)
          ).reshape(batch, arch.window, arch.window, arch.filters1)
    z1 += params.conv1_b
    col2 = _im2col(np.maximum(z1, 0.0), k)
    z2 = (col2.reshape(batch * hw, -1) @ params.conv2_w.reshape(-1, arch.filters2)
          ).reshape(batch, arch.window, arch.window, arch.filters2)
    z2 += params.conv2_b
    flat_in = np.maximum(z2, 0.0).reshape(batch, -1)
    logits = flat_in @ params.dense_w + params.dense_b
    return logits, ForwardTrace(col1, z1, col2, z2, flat_in, logits)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(logits: np.ndarray, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (len(logits),):
        raise ShapeMismatch(
            f"labels shape {labels.shape} does not match batch {len(logits)}")
    return labels


def loss(logits: np.ndarray, labels) -> float:
    """Mean softmax cross-entropy with log-sum-exp stabilization."""
    labels = _check_labels(logits, labels)
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-log_probs[np.arange(len(labels)), labels].mean())


def _logit_grads(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    g = softmax(logits)
    g[np.arange(len(labels)), labels] -= 1.0
    return g


def _hidden_grads(params: ModelParams, trace: ForwardTrace,
                  dlogits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pre-activation grads (dz1_mat, dz2_mat), each (B, H*W, F)."""
    arch = params.arch
    batch = len(dlogits)
    hw = arch.window * arch.window
    dz2 = ((dlogits @ params.dense_w.T).reshape(trace.z2.shape)
           * (trace.z2 > 0)).reshape(batch, hw, arch.filters2)
    da1 = _col2im(dz2 @ params.conv2_w.reshape(-1, arch.filters2).T,
                  trace.z1.shape, arch.kernel)
    dz1 = (da1 * (trace.z1 > 0)).reshape(batch, hw, arch.filters1)
    return dz1, dz2


def backward_per_example(params: ModelParams, x: np.ndarray, labels
                         ) -> np.ndarray:
    """One flat gradient row per example: shape (B, param_count).

    Row b is the exact gradient of that example's own cross-entropy loss
    (not divided by the batch size).
    """
    grads, _ = per_example_grads_and_loss(params, x, labels)
    return grads


def per_example_grads_and_loss(params: ModelParams, x: np.ndarray, labels
                               ) -> tuple[np.ndarray, float]:
    """Per-example gradients plus the batch's mean loss from one forward."""
    logits, trace = forward(params, x)
    labels = _check_labels(logits, labels)
    batch = len(labels)

    dlogits = _logit_grads(logits, labels)  # (B, classes)
    dz1, dz2 = _hidden_grads(params, trace, dlogits)
    # Batched GEMMs: patches^T @ dz gives each example's kernel gradient
    # already laid out in (K, K, Cin, F) raveled order.
    dw1 = np.matmul(trace.col1.transpose(0, 2, 1), dz1)
    dw2 = np.matmul(trace.col2.transpose(0, 2, 1), dz2)
    dw_dense = np.matmul(trace.flat_in[:, :, None], dlogits[:, None, :])

    grads = np.concatenate([
        dw1.reshape(batch, -1), dz1.sum(axis=1),
        dw2.reshape(batch, -1), dz2.sum(axis=1),
        dw_dense.reshape(batch, -1), dlogits,
    ], axis=1)
    return grads, loss(logits, labels)


def backward_batch(params: ModelParams, x: np.ndarray, labels) -> np.ndarray:
    """Flat gradient of the mean loss over the batch: shape (param_count,)."""
    logits, trace = forward(params, x)
    labels = _check_labels(logits, labels)
    batch = len(labels)

    dlogits = _logit_grads(logits, labels) / batch
    dz1, dz2 = _hidden_grads(params, trace, dlogits)
    # Single GEMM per layer: fold batch and spatial dims together.
    dw1 = trace.col1.reshape(-1, trace.col1.shape[2]).T @ dz1.reshape(-1, dz1.shape[2])
    dw2 = trace.col2.reshape(-1, trace.col2.shape[2]).T @ dz2.reshape(-1, dz2.shape[2])
    dw_dense = trace.flat_in.T @ dlogits

    return np.concatenate([
        dw1.ravel(), dz1.sum(axis=(0, 1)),
        dw2.ravel(), dz2.sum(axis=(0, 1)),
        dw_dense.ravel(), dlogits.sum(axis=0),
    ])


def sgd_momentum_step(params: ModelParams, grad: np.ndarray,
                      velocity: np.ndarray, learning_rate: float,
                      momentum: float) -> tuple[ModelParams, np.ndarray]:
    """v <- momentum v + g; theta <- theta - lr v. Updates in place."""
    n = params.arch.param_count()
    if grad.shape != (n,) or velocity.shape != (n,):
        raise LengthMismatch(
            f"gradient/velocity must have shape ({n},), "
            f"got {grad.shape} and {velocity.shape}")
    velocity *= momentum
    velocity += grad
    params.flat -= learning_rate * velocity
    return params, velocity


def evaluate(params: ModelParams, x: np.ndarray, labels,
             batch_size: int = 200) -> float:
    """Fraction of argmax predictions matching labels (ties -> lowest index)."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise EmptySplit("cannot evaluate an empty split")
    hits = 0
    for start in range(0, len(labels), batch_size):
        logits, _ = forward(params, x[start:start + batch_size])
        hits += int((np.argmax(logits, axis=1)
                     == labels[start:start + batch_size]).sum())
    return hits / len(labels)


@dataclass
class TrainingHistory:
    """Per-step losses and per-epoch held-out accuracy."""

    step_losses: list[float] = field(default_factory=list)
    epoch_accuracy: list[tuple[int, float]] = field(default_factory=list)

    @property
    def final_accuracy(self) -> float:
        return self.epoch_accuracy[-1][1] if self.epoch_accuracy else math.nan


def train_classifier(x: np.ndarray, y, config: TrainConfig,
                     arch: Architecture | None = None,
                     x_eval: np.ndarray | None = None,
                     y_eval=None,
                     eval_every: int = 1) -> tuple[ModelParams, TrainingHistory]:
    """Mini-batch momentum SGD; a pure function of (data, config)."""
    arch = arch or Architecture()
    y = np.asarray(y, dtype=np.int64)
    init_seed, shuffle_seed = np.random.SeedSequence(config.seed).spawn(2)
    params = init_params(arch, np.random.default_rng(init_seed))
    shuffle_rng = np.random.default_rng(shuffle_seed)
    velocity = np.zeros(arch.param_count())
    history = TrainingHistory()
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(y))
        for start in range(0, len(y), config.batch_size):
            idx = order[start:start + config.batch_size]
            logits, trace = forward(params, x[idx])
            history.step_losses.append(loss(logits, y[idx]))
            grad = backward_batch(params, x[idx], y[idx])
            sgd_momentum_step(params, grad, velocity,
                              config.learning_rate, config.momentum)
        if x_eval is not None and (epoch % eval_every == 0
                                   or epoch == config.epochs):
            history.epoch_accuracy.append(
                (epoch, evaluate(params, x_eval, y_eval)))
    return params, history


def save_checkpoint(path, params: ModelParams, seed: int, step: int) -> None:
    """Persist architecture constants, provenance and the flat vector."""
    arch = params.arch
    np.savez(path, flat=params.flat, seed=np.int64(seed), step=np.int64(step),
             window=np.int64(arch.window), channels=np.int64(arch.channels),
             filters1=np.int64(arch.filters1), filters2=np.int64(arch.filters2),
             kernel=np.int64(arch.kernel), classes=np.int64(arch.classes))


def load_checkpoint(path) -> tuple[ModelParams, int, int]:
    """Inverse of save_checkpoint; the flat vector round-trips bit-exactly."""
    with np.load(path) as data:
        arch = Architecture(
            window=int(data["window"]), channels=int(data["channels"]),
            filters1=int(data["filters1"]), filters2=int(data["filters2"]),
            kernel=int(data["kernel"]), classes=int(data["classes"]))
        return (ModelParams(arch, data["flat"]),
                int(data["seed"]), int(data["step"]))
