"""Per-feature usefulness scores and elimination ranking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from featurechurn.models import (
    MlpModel,
    RegressionModel,
    TrainBatch,
)


@dataclass(frozen=True)
class UsefulnessScore:
    feature_index: int
    value: float

    def __post_init__(self):
        if not (np.isfinite(self.value) and self.value >= 0):
            raise ValueError(f"usefulness must be finite and >= 0, got {self.value}")


def _check_index(i: int, K: int) -> None:
    if not 0 <= i < K:
        raise IndexError(f"active index {i} outside [0, {K})")


def _check_shapes(model: RegressionModel, batch: TrainBatch) -> None:
    if batch.M == 0:
        raise ValueError("empty batch")
    if batch.n_features != model.n_features:
        raise ValueError(f"batch has {batch.n_features} features, model has {model.n_features}")


def regression_usefulness(
    model: RegressionModel, batch: TrainBatch, i: int
) -> UsefulnessScore:
    """Relative loss change when weight ``i`` is zeroed: ``|L(theta_0i) - L(theta)| / |theta_i|``.

    A zero weight scores 0: zeroing it leaves the loss unchanged.
    """
    _check_index(i, model.n_features)
    return UsefulnessScore(i, float(regression_usefulness_all(model, batch)[i]))


def regression_usefulness_all(
    model: RegressionModel, batch: TrainBatch
) -> np.ndarray:
    """:func:`regression_usefulness` for every active feature.

    Zeroing weight ``i`` shifts the residual ``r`` by ``-theta_i x_i``, so the
    loss changes by ``(theta_i^2 |x_i|^2 - 2 theta_i x_i.r) / (2M)`` and the
    score is ``|theta_i |x_i|^2 - 2 x_i.r| / (2M)``. Expanding the difference
    avoids subtracting two nearly equal losses; the sums are accumulated in
    extended precision where the platform has it.
    """
    _check_shapes(model, batch)
    X = batch.design.astype(np.longdouble)
    theta = model.theta.astype(np.longdouble)
    residual = X @ theta - batch.targets.astype(np.longdouble)
    col_sq = np.einsum("ij,ij->j", X, X)
    scores = np.abs(theta * col_sq - 2 * (X.T @ residual)) / (2 * batch.M)
    scores[model.theta == 0.0] = 0
    return scores.astype(np.float64)


def mlp_usefulness(model: MlpModel, i: int) -> UsefulnessScore:
    """Euclidean norm of the input-weight column feeding from feature ``i``."""
    _check_index(i, model.n_features)
    return UsefulnessScore(i, float(np.linalg.norm(model.w_in[:, i])))


def mlp_usefulness_all(model: MlpModel) -> np.ndarray:
    return np.linalg.norm(model.w_in, axis=0)


def score_all(model, batch: TrainBatch) -> np.ndarray:
    """Usefulness of every active feature under the metric matching the model type."""
    if isinstance(model, RegressionModel):
        return regression_usefulness_all(model, batch)
    if isinstance(model, MlpModel):
        return mlp_usefulness_all(model)
    raise TypeError(f"no usefulness metric for {type(model).__name__}")


def rank_for_elimination(scores: Sequence[float] | Sequence[UsefulnessScore], e: int) -> list[int]:
    """Indices of the ``e`` least useful features, ties broken by ascending index."""
    if len(scores) and isinstance(scores[0], UsefulnessScore):
        index = np.array([s.feature_index for s in scores])
        values = np.array([s.value for s in scores], dtype=np.float64)
    else:
        values = np.asarray(scores, dtype=np.float64)
        index = np.arange(values.size)
    if not 1 <= e <= values.size:
        raise ValueError(f"e={e} must lie in [1, {values.size}]")
    order = np.lexsort((index, values))
    return [int(index[k]) for k in order[:e]]
