"""Shallow fully connected point predictor: 6 inputs -> 50 ReLU units -> 2 outputs.

The six inputs are three (x, y) centroid pairs in walk order, normalized to
[0, 1] by the image dimensions; the two outputs are the predicted next
centroid in the same normalized units.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidHyperparameter, SchemaError

N_IN = 6
N_HIDDEN = 50
N_OUT = 2


@dataclass
class MLPWeights:
    W1: np.ndarray  # (50, 6)
    b1: np.ndarray  # (50,)
    W2: np.ndarray  # (2, 50)
    b2: np.ndarray  # (2,)

    def __post_init__(self):
        self.W1 = np.asarray(self.W1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64)
        self.W2 = np.asarray(self.W2, dtype=np.float64)
        self.b2 = np.asarray(self.b2, dtype=np.float64)
        shapes = (self.W1.shape, self.b1.shape, self.W2.shape, self.b2.shape)
        expect = ((N_HIDDEN, N_IN), (N_HIDDEN,), (N_OUT, N_HIDDEN), (N_OUT,))
        if shapes != expect:
            raise SchemaError(f"weight shapes {shapes} != {expect}")

    def copy(self) -> "MLPWeights":
        return MLPWeights(self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy())


def init_weights(seed: int) -> MLPWeights:
    """Uniform init in [-0.1, 0.1] from a seeded generator."""
    rng = np.random.default_rng(seed)
    return MLPWeights(
        rng.uniform(-0.1, 0.1, (N_HIDDEN, N_IN)),
        rng.uniform(-0.1, 0.1, N_HIDDEN),
        rng.uniform(-0.1, 0.1, (N_OUT, N_HIDDEN)),
        rng.uniform(-0.1, 0.1, N_OUT),
    )


def mlp_forward(w: MLPWeights, x: np.ndarray) -> np.ndarray:
    """W2 @ relu(W1 @ x + b1) + b2 for a single 6-vector."""
    x = np.asarray(x, dtype=np.float64)
    hidden = np.maximum(w.W1 @ x + w.b1, 0.0)
    return w.W2 @ hidden + w.b2


def forward_batch(w: MLPWeights, X: np.ndarray) -> np.ndarray:
    """Forward pass for an (n, 6) batch; returns (n, 2)."""
    hidden = np.maximum(X @ w.W1.T + w.b1, 0.0)
    return hidden @ w.W2.T + w.b2


def mse_loss(w: MLPWeights, X: np.ndarray, Y: np.ndarray) -> float:
    diff = forward_batch(w, X) - Y
    return float(np.mean(diff * diff))


def loss_and_gradients(w: MLPWeights, X: np.ndarray, Y: np.ndarray):
    """MSE loss and its gradients wrt all four weight arrays."""
    n = X.shape[0]
    pre = X @ w.W1.T + w.b1          # (n, 50)
    hidden = np.maximum(pre, 0.0)
    pred = hidden @ w.W2.T + w.b2    # (n, 2)
    diff = pred - Y
    loss = float(np.mean(diff * diff))
    # d loss / d pred, for mean over n*2 entries
    gpred = diff * (2.0 / (n * N_OUT))
    gW2 = gpred.T @ hidden
    gb2 = gpred.sum(axis=0)
    ghidden = gpred @ w.W2
    ghidden = ghidden * (pre > 0.0)
    gW1 = ghidden.T @ X
    gb1 = ghidden.sum(axis=0)
    return loss, MLPWeights(gW1, gb1, gW2, gb2)


def mlp_train(
    samples: list[tuple[np.ndarray, np.ndarray]],
    epochs: int,
    learning_rate: float,
    seed: int,
    batch_size: int | None = 32,
) -> MLPWeights:
    """Mini-batch gradient descent on MSE; deterministic for a given seed.

    Batches come from a seeded per-epoch shuffle; ``batch_size=None`` runs
    full-batch descent instead. ``epochs=0`` returns the seeded initial
    weights unchanged.
    """
    if epochs < 0:
        raise InvalidHyperparameter(f"epochs {epochs} < 0")
    if learning_rate <= 0:
        raise InvalidHyperparameter(f"learning_rate {learning_rate} <= 0")
    if not samples:
        raise InvalidHyperparameter("no training samples")
    if batch_size is not None and batch_size < 1:
        raise InvalidHyperparameter(f"batch_size {batch_size} < 1")
    X = np.array([s[0] for s in samples], dtype=np.float64).reshape(len(samples), N_IN)
    Y = np.array([s[1] for s in samples], dtype=np.float64).reshape(len(samples), N_OUT)
    rng = np.random.default_rng(seed)
    w = init_weights(seed)
    n = X.shape[0]
    bs = n if batch_size is None else min(batch_size, n)
    for _ in range(epochs):
        order = np.arange(n) if bs == n else rng.permutation(n)
        for lo in range(0, n, bs):
            idx = order[lo:lo + bs]
            _, g = loss_and_gradients(w, X[idx], Y[idx])
            w.W1 -= learning_rate * g.W1
            w.b1 -= learning_rate * g.b1
            w.W2 -= learning_rate * g.W2
            w.b2 -= learning_rate * g.b2
    return w


def save_weights(w: MLPWeights, path: str | Path) -> None:
    doc = {
        "arch": [N_IN, N_HIDDEN, N_OUT],
        "W1": w.W1.tolist(),
        "b1": w.b1.tolist(),
        "W2": w.W2.tolist(),
        "b2": w.b2.tolist(),
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")


def load_weights(path: str | Path) -> MLPWeights:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SchemaError(f"weight file {path}: {e}") from e
    for key in ("arch", "W1", "b1", "W2", "b2"):
        if key not in doc:
            raise SchemaError(f"weight file {path}: missing field {key!r}")
    if doc["arch"] != [N_IN, N_HIDDEN, N_OUT]:
        raise SchemaError(f"weight file {path}: arch {doc['arch']} != {[N_IN, N_HIDDEN, N_OUT]}")
    try:
        return MLPWeights(np.array(doc["W1"]), np.array(doc["b1"]),
                          np.array(doc["W2"]), np.array(doc["b2"]))
    except (ValueError, SchemaError) as e:
        raise SchemaError(f"weight file {path}: {e}") from e
