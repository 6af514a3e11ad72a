"""Trainable models whose input weights line up with the active feature list.

Both models are trained by full-batch gradient descent. Column ``i`` of the
design matrix always feeds weight ``theta[i]`` (regression) or column
``w_in[:, i]`` (MLP), which is what lets the churn engine swap features
without disturbing the weights of the features it keeps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np


class DivergenceError(ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, iteration: int, loss: float):
        super().__init__(f"loss became non-finite ({loss}) at iteration {iteration}")
        self.iteration = iteration
        self.loss = loss


@dataclass
class TrainBatch:
    design: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.design = np.asarray(self.design, dtype=np.float64)
        self.targets = np.asarray(self.targets)
        if self.design.ndim != 2:
            raise ValueError("design must be 2-d [samples x features]")
        if self.design.shape[0] != self.targets.shape[0]:
            raise ValueError(
                f"design has {self.design.shape[0]} rows but there are "
                f"{self.targets.shape[0]} targets"
            )

    @property
    def M(self) -> int:
        return self.design.shape[0]

    @property
    def n_features(self) -> int:
        return self.design.shape[1]


def _require_samples(batch: TrainBatch) -> None:
    if batch.M == 0:
        raise ValueError("empty batch")


# --------------------------------------------------------------------------
# Linear regression
# --------------------------------------------------------------------------


@dataclass
class RegressionModel:
    theta: np.ndarray
    learning_rate: float = 0.1

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    @classmethod
    def initialize(cls, n_features: int, learning_rate: float, rng: np.random.Generator):
        return cls(rng.uniform(-0.5, 0.5, n_features), learning_rate)

    @property
    def n_features(self) -> int:
        return self.theta.shape[0]

    def copy(self) -> "RegressionModel":
        return replace(self, theta=self.theta.copy())

    def predict(self, design: np.ndarray) -> np.ndarray:
        return design @ self.theta


def _check_regression(model: RegressionModel, batch: TrainBatch) -> None:
    _require_samples(batch)
    if batch.n_features != model.n_features:
        raise ValueError(
            f"batch has {batch.n_features} features, model has {model.n_features}"
        )


def mse_from_residual(residual: np.ndarray) -> float:
    return float(residual @ residual) / (2 * residual.shape[0])


def mse_loss(model: RegressionModel, batch: TrainBatch) -> float:
    """Half mean squared error, ``sum((X theta - y)^2) / (2M)``."""
    _check_regression(model, batch)
    return mse_from_residual(batch.design @ model.theta - batch.targets)


def mse_gradient(model: RegressionModel, batch: TrainBatch) -> np.ndarray:
    _check_regression(model, batch)
    residual = batch.design @ model.theta - batch.targets
    return batch.design.T @ residual / batch.M


def train_regression(
    model: RegressionModel, batch: TrainBatch, iterations: int
) -> RegressionModel:
    """Run ``iterations`` full-batch gradient steps from the model's current weights."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    _check_regression(model, batch)
    out = model.copy()
    X, y, lr, M = batch.design, batch.targets, model.learning_rate, batch.M
    theta = out.theta
    with np.errstate(over="ignore", invalid="ignore"):
        for it in range(iterations):
            residual = X @ theta - y
            loss = mse_from_residual(residual)
            if not np.isfinite(loss):
                raise DivergenceError(it, loss)
            theta -= lr * (X.T @ residual) / M
    if not np.all(np.isfinite(theta)):
        raise DivergenceError(iterations, float("nan"))
    return out


class SpectralGradientDescent:
    """Exact gradient descent on the squared loss, advanced in the Gram eigenbasis.

    With ``G = X^T X / M`` and ``b = X^T y / M`` a gradient step is the affine
    map ``theta <- theta - lr (G theta - b)``. In the eigenbasis of ``G`` each
    coordinate evolves independently, so ``t`` steps cost one projection
    instead of ``t`` matrix-vector products. Used for the all-feature
    baseline where the literal loop would dominate the runtime.
    """

    def __init__(self, batch: TrainBatch, learning_rate: float):
        _require_samples(batch)
        X, y = batch.design, batch.targets
        gram = X.T @ X / batch.M
        self.eigvals, self.eigvecs = np.linalg.eigh(gram)
        self.rhs = self.eigvecs.T @ (X.T @ y / batch.M)
        self.learning_rate = learning_rate
        self._yy = float(y @ y) / batch.M
        self._proj: np.ndarray | None = None

    def to_basis(self, theta: np.ndarray) -> np.ndarray:
        return self.eigvecs.T @ theta

    def from_basis(self, coords: np.ndarray) -> np.ndarray:
        return self.eigvecs @ coords

    def advance(self, coords: np.ndarray, steps: int) -> np.ndarray:
        """Coordinates after ``steps`` gradient steps."""
        a = self.learning_rate * self.eigvals
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            log_factor = np.log1p(-a) if np.all(a < 1) else None
            if log_factor is not None:
                decay = np.exp(steps * log_factor)
                # sum_{k<t} (1 - a)^k * lr = -expm1(t log(1-a)) / lambda, limit lr*t at lambda=0
                gain = np.where(
                    self.eigvals != 0.0,
                    -np.expm1(steps * log_factor) / np.where(self.eigvals != 0.0, self.eigvals, 1.0),
                    self.learning_rate * steps,
                )
            else:
                factor = 1.0 - a
                decay = factor**steps
                safe = np.where(self.eigvals != 0.0, self.eigvals, 1.0)
                gain = np.where(
                    self.eigvals != 0.0, (1.0 - decay) / safe, self.learning_rate * steps
                )
        return decay * coords + gain * self.rhs

    def loss(self, coords: np.ndarray) -> float:
        """Training loss from eigen-coordinates, ``(theta^T G theta - 2 b^T theta + y^T y / M) / 2``."""
        quad = float(np.sum(self.eigvals * coords * coords))
        lin = float(self.rhs @ coords)
        return 0.5 * (quad - 2.0 * lin + self._yy)


# --------------------------------------------------------------------------
# One-hidden-layer MLP
# --------------------------------------------------------------------------


@dataclass
class MlpModel:
    w_in: np.ndarray
    b_in: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray
    lam: float = 0.0
    learning_rate: float = 1.0

    def __post_init__(self):
        self.w_in = np.asarray(self.w_in, dtype=np.float64)
        self.b_in = np.asarray(self.b_in, dtype=np.float64)
        self.w_out = np.asarray(self.w_out, dtype=np.float64)
        self.b_out = np.asarray(self.b_out, dtype=np.float64)
        H, _ = self.w_in.shape
        C, H2 = self.w_out.shape
        if self.b_in.shape != (H,) or H2 != H or self.b_out.shape != (C,):
            raise ValueError("inconsistent MLP parameter shapes")
        if H < 1:
            raise ValueError("MLP needs at least one hidden neuron")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    @classmethod
    def initialize(
        cls,
        n_features: int,
        hidden: int,
        n_classes: int,
        lam: float,
        learning_rate: float,
        rng: np.random.Generator,
    ) -> "MlpModel":
        """Uniform(-r, r) weights with r = 1/sqrt(fan-in); zero biases."""
        if hidden < 1:
            raise ValueError("hidden must be >= 1")
        r_in = 1.0 / np.sqrt(n_features)
        r_out = 1.0 / np.sqrt(hidden)
        return cls(
            w_in=rng.uniform(-r_in, r_in, (hidden, n_features)),
            b_in=np.zeros(hidden),
            w_out=rng.uniform(-r_out, r_out, (n_classes, hidden)),
            b_out=np.zeros(n_classes),
            lam=lam,
            learning_rate=learning_rate,
        )

    @property
    def n_features(self) -> int:
        return self.w_in.shape[1]

    @property
    def hidden(self) -> int:
        return self.w_in.shape[0]

    @property
    def n_classes(self) -> int:
        return self.w_out.shape[0]

    def copy(self) -> "MlpModel":
        return replace(
            self,
            w_in=self.w_in.copy(),
            b_in=self.b_in.copy(),
            w_out=self.w_out.copy(),
            b_out=self.b_out.copy(),
        )


def sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _hidden_and_logits(model: MlpModel, rows: np.ndarray):
    hidden = sigmoid(rows @ model.w_in.T + model.b_in)
    return hidden, hidden @ model.w_out.T + model.b_out


def mlp_forward(model: MlpModel, rows: np.ndarray) -> np.ndarray:
    """Class probabilities for one feature row or a matrix of rows."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.shape[-1] != model.n_features:
        raise ValueError(f"expected {model.n_features} features, got {rows.shape[-1]}")
    single = rows.ndim == 1
    _, logits = _hidden_and_logits(model, np.atleast_2d(rows))
    probs = softmax(logits)
    return probs[0] if single else probs


def _check_classification(model: MlpModel, batch: TrainBatch) -> np.ndarray:
    _require_samples(batch)
    if batch.n_features != model.n_features:
        raise ValueError(
            f"batch has {batch.n_features} features, model has {model.n_features}"
        )
    labels = batch.targets.astype(np.int64)
    if labels.min() < 0 or labels.max() >= model.n_classes:
        raise ValueError("label out of range")
    return labels


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def l2_penalty(model: MlpModel, M: int) -> float:
    return model.lam / (2 * M) * (float(np.sum(model.w_in**2)) + float(np.sum(model.w_out**2)))


def cross_entropy_loss(model: MlpModel, batch: TrainBatch) -> float:
    """Mean negative log-likelihood plus ``lam/(2M)`` times the squared weight norms (biases excluded)."""
    labels = _check_classification(model, batch)
    _, logits = _hidden_and_logits(model, batch.design)
    nll = -_log_softmax(logits)[np.arange(batch.M), labels].mean()
    return float(nll) + l2_penalty(model, batch.M)


def mlp_loss_and_gradients(model: MlpModel, batch: TrainBatch):
    """Loss and gradients ``(d_w_in, d_b_in, d_w_out, d_b_out)``."""
    labels = _check_classification(model, batch)
    X, M = batch.design, batch.M
    hidden, logits = _hidden_and_logits(model, X)
    log_p = _log_softmax(logits)
    loss = -log_p[np.arange(M), labels].mean() + l2_penalty(model, M)

    delta_out = np.exp(log_p)
    delta_out[np.arange(M), labels] -= 1.0
    delta_out /= M
    d_w_out = delta_out.T @ hidden + (model.lam / M) * model.w_out
    d_b_out = delta_out.sum(axis=0)
    delta_hidden = (delta_out @ model.w_out) * hidden * (1.0 - hidden)
    d_w_in = delta_hidden.T @ X + (model.lam / M) * model.w_in
    d_b_in = delta_hidden.sum(axis=0)
    return float(loss), (d_w_in, d_b_in, d_w_out, d_b_out)


def train_mlp(model: MlpModel, batch: TrainBatch, iterations: int) -> MlpModel:
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    out = model.copy()
    lr = model.learning_rate
    for it in range(iterations):
        loss, (g_wi, g_bi, g_wo, g_bo) = mlp_loss_and_gradients(out, batch)
        if not np.isfinite(loss):
            raise DivergenceError(it, loss)
        out.w_in -= lr * g_wi
        out.b_in -= lr * g_bi
        out.w_out -= lr * g_wo
        out.b_out -= lr * g_bo
    return out


def predict_classes(model: MlpModel, design: np.ndarray) -> np.ndarray:
    _, logits = _hidden_and_logits(model, np.asarray(design, dtype=np.float64))
    # argmax returns the first maximum, i.e. the lowest class index on ties
    return np.argmax(logits, axis=1)


def accuracy(model: MlpModel, batch: TrainBatch) -> float:
    labels = _check_classification(model, batch)
    return float(np.mean(predict_classes(model, batch.design) == labels))


# --------------------------------------------------------------------------
# Snapshots
# --------------------------------------------------------------------------


def save_model(model, features: Sequence, path: str | Path) -> None:
    """Write a JSON snapshot: model kind, hyperparameters, descriptor strings, weights.

    Floats are written with ``repr`` precision so a reload is bit-exact.
    """
    features = [str(f) for f in features]
    if isinstance(model, RegressionModel):
        payload = {
            "kind": "regression",
            "learning_rate": model.learning_rate,
            "features": features,
            "theta": model.theta.tolist(),
        }
    elif isinstance(model, MlpModel):
        payload = {
            "kind": "mlp",
            "learning_rate": model.learning_rate,
            "lam": model.lam,
            "features": features,
            "w_in": model.w_in.tolist(),
            "b_in": model.b_in.tolist(),
            "w_out": model.w_out.tolist(),
            "b_out": model.b_out.tolist(),
        }
    else:
        raise TypeError(f"cannot snapshot {type(model).__name__}")
    Path(path).write_text(json.dumps(payload))


def load_model(path: str | Path):
    """Inverse of :func:`save_model`; returns ``(model, feature_strings)``."""
    payload = json.loads(Path(path).read_text())
    if payload["kind"] == "regression":
        model = RegressionModel(np.array(payload["theta"]), payload["learning_rate"])
    elif payload["kind"] == "mlp":
        model = MlpModel(
            np.array(payload["w_in"]),
            np.array(payload["b_in"]),
            np.array(payload["w_out"]),
            np.array(payload["b_out"]),
            lam=payload["lam"],
            learning_rate=payload["learning_rate"],
        )
    else:
        raise ValueError(f"unknown model kind {payload['kind']!r}")
    return model, payload["features"]
