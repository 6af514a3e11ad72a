import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from featurechurn.models import MlpModel, RegressionModel, TrainBatch
from featurechurn.usefulness import (
    UsefulnessScore,
    mlp_usefulness,
    mlp_usefulness_all,
    rank_for_elimination,
    regression_usefulness,
    regression_usefulness_all,
    score_all,
)


def brute_force_usefulness(theta, X, y, i):
    """Rebuild theta with coordinate i zeroed and recompute both losses in exact rational arithmetic."""
    def loss(t):
        total = Fraction(0)
        for r in range(len(y)):
            pred = sum((Fraction(X[r, c]) * t[c] for c in range(len(t))), Fraction(0))
            total += (pred - Fraction(y[r])) ** 2
        return total / (2 * len(y))

    exact = [Fraction(v) for v in theta]
    if exact[i] == 0:
        return 0.0
    zeroed = list(exact)
    zeroed[i] = Fraction(0)
    return float(abs(loss(zeroed) - loss(exact)) / abs(exact[i]))


def random_instance(rng, zero_some=True):
    M, K = int(rng.integers(2, 12)), int(rng.integers(1, 8))
    X = rng.standard_normal((M, K))
    y = rng.standard_normal(M)
    theta = rng.standard_normal(K)
    if zero_some and K > 1:
        theta[rng.integers(0, K)] = 0.0
    return RegressionModel(theta), TrainBatch(X, y)


@pytest.mark.parametrize("seed", range(100))
def test_regression_usefulness_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    model, batch = random_instance(rng)
    vector = regression_usefulness_all(model, batch)
    for i in range(model.n_features):
        expected = brute_force_usefulness(model.theta, batch.design, batch.targets, i)
        single = regression_usefulness(model, batch, i).value
        assert single == pytest.approx(expected, rel=1e-12, abs=0)
        assert vector[i] == pytest.approx(expected, rel=1e-12, abs=0)
        if model.theta[i] == 0.0:
            assert single == 0.0 and vector[i] == 0.0


def test_zero_column_scores_zero():
    X = np.column_stack([np.ones(4), np.zeros(4)])
    model = RegressionModel(np.array([0.3, 2.0]))
    assert regression_usefulness(model, TrainBatch(X, np.arange(4.0)), 1).value == 0.0


def test_duplicate_column_with_zero_weight_scores_zero():
    rng = np.random.default_rng(0)
    col = rng.standard_normal(8)
    batch = TrainBatch(np.column_stack([col, col]), rng.standard_normal(8))
    scores = regression_usefulness_all(RegressionModel(np.array([0.7, 0.0])), batch)
    assert scores[1] == 0.0 and scores[0] > 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_regression_usefulness_ignores_sample_order(seed):
    rng = np.random.default_rng(seed)
    model, batch = random_instance(rng, zero_some=False)
    perm = rng.permutation(batch.M)
    shuffled = TrainBatch(batch.design[perm], batch.targets[perm])
    assert np.allclose(score_all(model, batch), score_all(model, shuffled), rtol=1e-10, atol=1e-14)


def make_mlp(w_in):
    H = w_in.shape[0]
    return MlpModel(w_in, np.zeros(H), np.zeros((2, H)), np.zeros(2))


def test_mlp_usefulness_examples():
    model = make_mlp(np.array([[3.0, 0.0, 1.0], [4.0, 0.0, -2.0]]))
    assert mlp_usefulness(model, 0).value == 5.0
    assert mlp_usefulness(model, 1).value == 0.0
    rng = np.random.default_rng(2)
    w = rng.standard_normal((4, 6))
    scores = mlp_usefulness_all(make_mlp(w))
    for i in range(6):
        assert scores[i] == pytest.approx(math.sqrt(sum(v * v for v in w[:, i])), rel=1e-12)
    assert not mlp_usefulness_all(make_mlp(np.zeros((3, 5)))).any()
    init = MlpModel.initialize(50, 5, 10, 0.0, 1.0, rng)
    assert np.all(score_all(init, None) > 0)


def test_index_bounds():
    with pytest.raises(IndexError):
        mlp_usefulness(make_mlp(np.ones((2, 2))), 2)
    model, batch = random_instance(np.random.default_rng(0))
    with pytest.raises(IndexError):
        regression_usefulness(model, batch, -1)


def test_score_values_are_validated():
    with pytest.raises(ValueError):
        UsefulnessScore(0, -1.0)
    with pytest.raises(ValueError):
        UsefulnessScore(0, float("nan"))


def test_rank_examples():
    assert rank_for_elimination([5.0, 1.0, 3.0], 1) == [1]
    assert rank_for_elimination([2.0, 2.0, 2.0], 2) == [0, 1]
    scores = [UsefulnessScore(4, 1.0), UsefulnessScore(2, 1.0), UsefulnessScore(7, 0.5)]
    assert rank_for_elimination(scores, 2) == [7, 2]
    with pytest.raises(ValueError):
        rank_for_elimination([1.0, 2.0], 3)
    with pytest.raises(ValueError):
        rank_for_elimination([1.0, 2.0], 0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from([0.0, 0.5, 1.0, 2.0, 3.5]), min_size=1, max_size=25), st.data())
def test_rank_agrees_with_sort_oracle(values, data):
    e = data.draw(st.integers(1, len(values)))
    expected = sorted(range(len(values)), key=lambda k: (values[k], k))[:e]
    got = rank_for_elimination(values, e)
    assert got == expected
    assert len(set(rank_for_elimination(values, len(values)))) == len(values)
