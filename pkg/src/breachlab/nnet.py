"""Dense feed-forward softmax classifiers, from scratch in NumPy.

Everything is float64 and deterministic given a seed. Models are
immutable value objects; training copies parameters up front and returns
a new model. Gradients are analytic (reverse mode, hand-rolled) and are
cross-checked against finite differences in the test suite.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "identity")

MODEL_FORMAT = "breachlab-mlp"
MODEL_FORMAT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss becomes non-finite."""


class LossKind(Enum):
    NEG_LOG_LIKELIHOOD = "nll"
    SQUARED_ERROR = "squared_error"


@dataclass(frozen=True)
class Layer:
    weights: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str  # "relu" or "identity"


@dataclass(frozen=True)
class MlpModel:
    """A stack of dense layers; the final layer's output feeds a softmax."""

    layers: tuple[Layer, ...]

    @property
    def input_dim(self) -> int:
        return self.layers[0].weights.shape[0]

    @property
    def num_classes(self) -> int:
        return self.layers[-1].weights.shape[1]


@dataclass
class TrainConfig:
    """Hyper-parameters for plain SGD, plus the joint-loss weights.

    hidden_weight scales the loss on hidden-distribution samples relative
    to the task loss; snnl_weight scales the feature-entanglement term.
    Both only matter when a batch hook supplies those terms (see
    versioning.train_version); bare sgd_train ignores them.
    """

    learning_rate: float = 0.1
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    hidden_weight: float = 1.0
    snnl_weight: float = 0.5
    hidden_dims: tuple[int, ...] = (64, 64)

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.hidden_weight < 0:
            raise ValueError(f"hidden_weight must be >= 0, got {self.hidden_weight}")
        if self.snnl_weight < 0:
            raise ValueError(f"snnl_weight must be >= 0, got {self.snnl_weight}")


@dataclass
class TrainResult:
    model: MlpModel
    epoch_losses: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1] if self.epoch_losses else float("nan")


# ---------------------------------------------------------------------------
# construction / validation


def init_model(layer_dims: Sequence[int], seed: int) -> MlpModel:
    """Glorot-uniform initialisation: W ~ U(+-sqrt(6/(fan_in+fan_out))), b = 0.

    layer_dims is (input_dim, hidden..., num_classes); hidden layers get
    ReLU, the final layer is linear (its output feeds the softmax).
    """
    if len(layer_dims) < 2:
        raise ValueError("need at least input and output dims")
    if layer_dims[-1] < 2:
        raise ValueError(f"num_classes must be >= 2, got {layer_dims[-1]}")
    rng = np.random.default_rng(seed)
    layers = []
    for k in range(len(layer_dims) - 1):
        fan_in, fan_out = int(layer_dims[k]), int(layer_dims[k + 1])
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        b = np.zeros(fan_out)
        act = "relu" if k < len(layer_dims) - 2 else "identity"
        layers.append(Layer(w, b, act))
    return MlpModel(tuple(layers))


def validate_model(model: MlpModel) -> None:
    """Check layer chaining, finiteness, and activation tags."""
    if not model.layers:
        raise ValueError("model has no layers")
    prev_out = None
    for k, layer in enumerate(model.layers):
        if layer.weights.ndim != 2 or layer.bias.ndim != 1:
            raise ValueError(f"layer {k}: weights must be 2-D and bias 1-D")
        if layer.bias.shape[0] != layer.weights.shape[1]:
            raise ValueError(
                f"layer {k}: bias length {layer.bias.shape[0]} != out_dim {layer.weights.shape[1]}"
            )
        if prev_out is not None and layer.weights.shape[0] != prev_out:
            raise ValueError(
                f"layer {k}: in_dim {layer.weights.shape[0]} does not chain from previous out_dim {prev_out}"
            )
        if layer.activation not in ACTIVATIONS:
            raise ValueError(f"layer {k}: unknown activation {layer.activation!r}")
        if not (np.isfinite(layer.weights).all() and np.isfinite(layer.bias).all()):
            raise ValueError(f"layer {k}: non-finite parameters")
        prev_out = layer.weights.shape[1]
    if model.num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {model.num_classes}")


def model_params(model: MlpModel) -> list[tuple[np.ndarray, np.ndarray]]:
    """References to (weights, bias) per layer, in order."""
    return [(layer.weights, layer.bias) for layer in model.layers]


def replace_params(model: MlpModel, params: Sequence[tuple[np.ndarray, np.ndarray]]) -> MlpModel:
    """New model with the same activations but the given parameter arrays."""
    if len(params) != len(model.layers):
        raise ValueError(f"expected {len(model.layers)} layers of params, got {len(params)}")
    layers = tuple(
        Layer(np.asarray(w, dtype=float), np.asarray(b, dtype=float), layer.activation)
        for (w, b), layer in zip(params, model.layers)
    )
    return MlpModel(layers)


def copy_model(model: MlpModel) -> MlpModel:
    return replace_params(model, [(w.copy(), b.copy()) for w, b in model_params(model)])


# ---------------------------------------------------------------------------
# forward


def _as_batch(x: np.ndarray, input_dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != input_dim:
        raise ValueError(f"input has shape {x.shape}, model expects (*, {input_dim})")
    if not np.isfinite(x).all():
        raise ValueError("input contains non-finite entries")
    return x


@dataclass
class Tape:
    """Cached forward pass: acts[0] is the input, acts[k] the output of layer k-1."""

    acts: list[np.ndarray]
    preacts: list[np.ndarray]

    @property
    def logits(self) -> np.ndarray:
        return self.acts[-1]


def forward_tape(model: MlpModel, x: np.ndarray) -> Tape:
    h = _as_batch(x, model.input_dim)
    acts = [h]
    preacts = []
    for layer in model.layers:
        z = h @ layer.weights + layer.bias
        preacts.append(z)
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
        acts.append(h)
    return Tape(acts, preacts)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def forward_batch(model: MlpModel, x: np.ndarray) -> np.ndarray:
    """Softmax probabilities, shape (N, num_classes)."""
    return softmax(forward_tape(model, x).logits)


def forward(model: MlpModel, x: np.ndarray) -> np.ndarray:
    """Softmax probabilities for a single input, shape (num_classes,)."""
    return forward_batch(model, x)[0]


def predict_batch(model: MlpModel, x: np.ndarray) -> np.ndarray:
    """Predicted labels; argmax ties break toward the lowest label index."""
    return np.argmax(forward_tape(model, x).logits, axis=-1)


def predict(model: MlpModel, x: np.ndarray) -> int:
    return int(predict_batch(model, x)[0])


def penultimate_features(model: MlpModel, x: np.ndarray) -> np.ndarray:
    """Activations feeding the final linear layer (the input itself for 1-layer models)."""
    return forward_tape(model, x).acts[-2]


# ---------------------------------------------------------------------------
# losses


def _check_labels(y: np.ndarray, num_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 0:
        y = y[None]
    if not np.issubdtype(y.dtype, np.integer):
        yi = y.astype(int)
        if not np.array_equal(yi, y):
            raise ValueError("labels must be integers")
        y = yi
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ValueError(f"label out of range [0, {num_classes}): {y.min()}..{y.max()}")
    return y


def loss_batch(model: MlpModel, x: np.ndarray, y: np.ndarray, kind: LossKind = LossKind.NEG_LOG_LIKELIHOOD) -> np.ndarray:
    """Per-sample loss, shape (N,)."""
    tape = forward_tape(model, x)
    y = _check_labels(y, model.num_classes)
    if y.shape[0] != tape.logits.shape[0]:
        raise ValueError(f"{y.shape[0]} labels for {tape.logits.shape[0]} inputs")
    if kind is LossKind.NEG_LOG_LIKELIHOOD:
        logp = log_softmax(tape.logits)
        return -logp[np.arange(len(y)), y]
    probs = softmax(tape.logits)
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(y)), y] = 1.0
    return np.sum((onehot - probs) ** 2, axis=-1)


def loss(model: MlpModel, x: np.ndarray, y: int, kind: LossKind = LossKind.NEG_LOG_LIKELIHOOD) -> float:
    return float(loss_batch(model, x, np.asarray([y]), kind)[0])


def _grad_logits(logits: np.ndarray, y: np.ndarray, kind: LossKind) -> np.ndarray:
    """d(per-sample loss)/d(logits), one row per sample."""
    probs = softmax(logits)
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(y)), y] = 1.0
    if kind is LossKind.NEG_LOG_LIKELIHOOD:
        return probs - onehot
    # squared error on softmax outputs, through the softmax Jacobian
    gp = 2.0 * (probs - onehot)
    return probs * (gp - np.sum(gp * probs, axis=-1, keepdims=True))


def _act_grad(layer: Layer, preact: np.ndarray) -> np.ndarray:
    if layer.activation == "relu":
        return (preact > 0).astype(float)
    return np.ones_like(preact)


def backward(model: MlpModel, tape: Tape, grad_logits: np.ndarray):
    """Backprop from d/d(logits). Returns (param grads per layer, grad wrt input)."""
    grads = [None] * len(model.layers)
    g = grad_logits
    for k in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[k]
        if layer.activation == "relu":
            g = g * _act_grad(layer, tape.preacts[k])
        grads[k] = (tape.acts[k].T @ g, g.sum(axis=0))
        g = g @ layer.weights.T
    return grads, g


def backward_from_activation(model: MlpModel, tape: Tape, layer_index: int, grad_act: np.ndarray):
    """Backprop from a gradient on the activation output of `layer_index`.

    Layers above layer_index get zero gradients. Used for losses attached
    to intermediate features (feature entanglement).
    """
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(model.layers)  # type: ignore[list-item]
    for k in range(len(model.layers) - 1, layer_index, -1):
        layer = model.layers[k]
        grads[k] = (np.zeros_like(layer.weights), np.zeros_like(layer.bias))
    g = grad_act
    for k in range(layer_index, -1, -1):
        layer = model.layers[k]
        if layer.activation == "relu":
            g = g * _act_grad(layer, tape.preacts[k])
        grads[k] = (tape.acts[k].T @ g, g.sum(axis=0))
        g = g @ layer.weights.T
    return grads, g


def grad_input_batch(model: MlpModel, x: np.ndarray, y: np.ndarray, kind: LossKind = LossKind.NEG_LOG_LIKELIHOOD) -> np.ndarray:
    """Per-sample gradient of that sample's loss wrt the input, shape (N, d)."""
    tape = forward_tape(model, x)
    y = _check_labels(y, model.num_classes)
    _, gx = backward(model, tape, _grad_logits(tape.logits, y, kind))
    return gx


def grad_input(model: MlpModel, x: np.ndarray, y: int, kind: LossKind = LossKind.NEG_LOG_LIKELIHOOD) -> np.ndarray:
    return grad_input_batch(model, x, np.asarray([y]), kind)[0]


def grad_params(model: MlpModel, x: np.ndarray, y: np.ndarray, kind: LossKind = LossKind.NEG_LOG_LIKELIHOOD):
    """Gradient of the mean batch loss wrt every parameter; list of (dW, db)."""
    tape = forward_tape(model, x)
    y = _check_labels(y, model.num_classes)
    if y.shape[0] != tape.logits.shape[0]:
        raise ValueError(f"{y.shape[0]} labels for {tape.logits.shape[0]} inputs")
    g = _grad_logits(tape.logits, y, kind) / len(y)
    grads, _ = backward(model, tape, g)
    return grads


# ---------------------------------------------------------------------------
# training

# A batch hook receives (model, batch_x, batch_y, tape) and returns
# (extra_loss, extra_param_grads) to be added to the task term. Used by the
# versioning module to attach hidden-distribution and entanglement terms.
BatchHook = Callable[[MlpModel, np.ndarray, np.ndarray, Tape], tuple[float, list]]


def sgd_train(
    model: MlpModel,
    x: np.ndarray,
    y: np.ndarray,
    config: TrainConfig,
    batch_hook: BatchHook | None = None,
) -> TrainResult:
    """Plain mini-batch SGD on the mean NLL, deterministic given config.seed.

    With epochs == 0 the initial model is returned unchanged (as a copy).
    Raises TrainingDivergedError naming the offending epoch if the loss
    goes non-finite.
    """
    config.validate()
    x = _as_batch(x, model.input_dim)
    y = _check_labels(y, model.num_classes)
    if len(x) == 0:
        raise ValueError("empty training set")
    if y.shape[0] != x.shape[0]:
        raise ValueError(f"{y.shape[0]} labels for {x.shape[0]} inputs")

    work = copy_model(model)
    params = model_params(work)
    rng = np.random.default_rng(config.seed)
    epoch_losses: list[float] = []
    n = len(x)

    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        total = 0.0
        batches = 0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            xb, yb = x[idx], y[idx]
            tape = forward_tape(work, xb)
            logp = log_softmax(tape.logits)
            batch_loss = float(-logp[np.arange(len(yb)), yb].mean())
            g = _grad_logits(tape.logits, yb, LossKind.NEG_LOG_LIKELIHOOD) / len(yb)
            grads, _ = backward(work, tape, g)
            if batch_hook is not None:
                extra_loss, extra_grads = batch_hook(work, xb, yb, tape)
                batch_loss += extra_loss
                for (dw, db), (ew, eb) in zip(grads, extra_grads):
                    dw += ew
                    db += eb
            if not np.isfinite(batch_loss):
                raise TrainingDivergedError(
                    f"non-finite loss {batch_loss} in epoch {epoch} (batch at offset {start})"
                )
            for (w, b), (dw, db) in zip(params, grads):
                w -= config.learning_rate * dw
                b -= config.learning_rate * db
            total += batch_loss
            batches += 1
        epoch_losses.append(total / batches)
        logger.debug("epoch %d: mean batch loss %.6f", epoch, epoch_losses[-1])

    if len(epoch_losses) >= 2 and epoch_losses[-1] > epoch_losses[0]:
        logger.warning(
            "training loss increased over run: %.4f -> %.4f", epoch_losses[0], epoch_losses[-1]
        )
    return TrainResult(model=work, epoch_losses=epoch_losses)


def accuracy(model: MlpModel, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(predict_batch(model, x) == np.asarray(y)))


# ---------------------------------------------------------------------------
# serialization
#
# Layout of a model dump:
#   line 1: UTF-8 JSON header + "\n":
#       {"format": "breachlab-mlp", "version": 1,
#        "input_dim": d, "layer_dims": [out_0, ..., out_K],
#        "activations": ["relu", ..., "identity"]}
#   then, for each layer k in order: weights (in_dim*out_dim float64,
#   little-endian, C order) followed by bias (out_dim float64).


def save_model(model: MlpModel, path: str | Path) -> None:
    validate_model(model)
    header = {
        "format": MODEL_FORMAT,
        "version": MODEL_FORMAT_VERSION,
        "input_dim": model.input_dim,
        "layer_dims": [layer.weights.shape[1] for layer in model.layers],
        "activations": [layer.activation for layer in model.layers],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for layer in model.layers:
            fh.write(np.ascontiguousarray(layer.weights, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())


def load_model(path: str | Path) -> MlpModel:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ValueError(f"bad model header in {path}: {exc}") from exc
        if header.get("format") != MODEL_FORMAT:
            raise ValueError(f"not a model dump: {path}")
        if header.get("version") != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {header.get('version')}")
        dims = [header["input_dim"]] + list(header["layer_dims"])
        layers = []
        for k, act in enumerate(header["activations"]):
            n_w, n_b = dims[k] * dims[k + 1], dims[k + 1]
            buf = fh.read(8 * (n_w + n_b))
            if len(buf) != 8 * (n_w + n_b):
                raise ValueError(f"truncated model dump: {path}")
            w = np.frombuffer(buf[: 8 * n_w], dtype="<f8").reshape(dims[k], dims[k + 1]).copy()
            b = np.frombuffer(buf[8 * n_w :], dtype="<f8").copy()
            layers.append(Layer(w, b, act))
        if fh.read(1):
            raise ValueError(f"trailing bytes in model dump: {path}")
    model = MlpModel(tuple(layers))
    validate_model(model)
    return model
