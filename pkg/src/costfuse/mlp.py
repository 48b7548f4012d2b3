"""Small fully-connected softmax classifier trained by full-batch gradient descent.

Hidden layers use the rectifier; the output layer is a numerically stable
softmax trained with mean cross-entropy.  Full-batch updates keep training
deterministic for a fixed seed, and models serialize to JSON with exact
float round-tripping.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20000
    learning_rate: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be > 0")


@dataclass
class MlpModel:
    weights: list   # per layer, (fan_in, fan_out)
    biases: list    # per layer, (fan_out,)
    classes: list | None = None

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("weights and biases must be non-empty and aligned")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and w.shape[0] != self.weights[i - 1].shape[1]:
                raise ValueError(f"layer {i}: fan-in {w.shape[0]} does not chain")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: non-finite parameters")
        if self.classes is not None and len(self.classes) != self.weights[-1].shape[1]:
            raise ValueError("classes length must equal output size")

    @property
    def layer_sizes(self) -> list:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "MlpModel":
        return MlpModel(weights=[w.copy() for w in self.weights],
                        biases=[b.copy() for b in self.biases],
                        classes=list(self.classes) if self.classes is not None else None)


def init_mlp(layer_sizes, seed: int, classes=None) -> MlpModel:
    """Seeded scaled-uniform weights in +-sqrt(6/(fan_in+fan_out)), zero biases."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 4:
        raise ValueError("need at least 4 layer sizes (input, two hidden, output)")
    if any(s < 1 for s in sizes):
        raise ValueError("layer sizes must be >= 1")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(weights=weights, biases=biases,
                    classes=list(classes) if classes is not None else None)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _forward_layers(model: MlpModel, X: np.ndarray) -> list:
    """Activations per layer; entry 0 is the input, the last is softmax output."""
    acts = [X]
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = acts[-1] @ w + b
        acts.append(softmax(z) if i == last else np.maximum(z, 0.0))
    return acts


def forward(model: MlpModel, x) -> np.ndarray:
    """Softmax activation vector for one input."""
    v = np.asarray(x, dtype=np.float64)
    if v.shape != (model.layer_sizes[0],):
        raise ValueError(f"input must have length {model.layer_sizes[0]}, got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite input")
    return _forward_layers(model, v[None, :])[-1][0]


def predict_proba(model: MlpModel, xs) -> np.ndarray:
    """Row-wise forward; preserves input order. Empty input gives (0, n_classes)."""
    X = np.asarray(xs, dtype=np.float64)
    if X.size == 0:
        return np.zeros((0, model.layer_sizes[-1]))
    if X.ndim != 2 or X.shape[1] != model.layer_sizes[0]:
        raise ValueError(f"inputs must be (n, {model.layer_sizes[0]}), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite input")
    return _forward_layers(model, X)[-1]


def loss_and_grads(model: MlpModel, X: np.ndarray, y: np.ndarray) -> tuple:
    """Mean cross-entropy and its gradients for a full batch.

    y holds 0-based class indices.  Returns (loss, weight_grads, bias_grads).
    """
    n = X.shape[0]
    acts = _forward_layers(model, X)
    probs = acts[-1]
    eps = 1e-300  # guards log(0) for saturated outputs
    loss = float(-np.log(probs[np.arange(n), y] + eps).mean())

    delta = probs.copy()
    delta[np.arange(n), y] -= 1.0
    delta /= n
    w_grads = [None] * len(model.weights)
    b_grads = [None] * len(model.biases)
    for i in range(len(model.weights) - 1, -1, -1):
        w_grads[i] = acts[i].T @ delta
        b_grads[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.weights[i].T) * (acts[i] > 0.0)
    return loss, w_grads, b_grads


def train(model: MlpModel, features, labels, cfg: TrainConfig) -> tuple:
    """Full-batch gradient descent; returns (trained model, per-epoch losses).

    The loss history records the loss at the parameters held entering each
    epoch.  Training aborts with a diagnostic if the loss goes non-finite.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("need at least one training sample")
    if y.shape != (X.shape[0],):
        raise ValueError(f"labels shape {y.shape} does not match {X.shape[0]} samples")
    n_classes = model.layer_sizes[-1]
    if y.min() < 0 or y.max() >= n_classes:
        raise ValueError(f"class indices must be in [0, {n_classes})")
    out = model.copy()
    history = []
    for epoch in range(cfg.epochs):
        loss, w_grads, b_grads = loss_and_grads(out, X, y)
        if not np.isfinite(loss):
            raise RuntimeError(f"non-finite loss {loss} at epoch {epoch}; "
                               "reduce the learning rate")
        history.append(loss)
        for w, b, gw, gb in zip(out.weights, out.biases, w_grads, b_grads):
            w -= cfg.learning_rate * gw
            b -= cfg.learning_rate * gb
    return out, history


def save_mlp(model: MlpModel, path) -> None:
    doc = {
        "layer_sizes": model.layer_sizes,
        "activation": "relu",
        "classes": model.classes,
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_mlp(path) -> MlpModel:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    model = MlpModel(weights=[np.asarray(w, dtype=np.float64) for w in doc["weights"]],
                     biases=[np.asarray(b, dtype=np.float64) for b in doc["biases"]],
                     classes=doc.get("classes"))
    if model.layer_sizes != doc["layer_sizes"]:
        raise ValueError(f"{path}: layer_sizes {doc['layer_sizes']} do not match "
                         f"stored parameters {model.layer_sizes}")
    return model
