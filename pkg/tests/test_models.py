import math

import numpy as np
import pytest

from featurechurn.models import (
    DivergenceError,
    MlpModel,
    RegressionModel,
    SpectralGradientDescent,
    TrainBatch,
    accuracy,
    cross_entropy_loss,
    load_model,
    mlp_forward,
    mlp_loss_and_gradients,
    mse_gradient,
    mse_loss,
    predict_classes,
    save_model,
    sigmoid,
    train_mlp,
    train_regression,
)
from featurechurn.pool import RawPixel


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / scale


def numeric_grad(f, param, h):
    grad = np.zeros_like(param)
    for idx in np.ndindex(param.shape):
        keep = param[idx]
        param[idx] = keep + h
        up = f()
        param[idx] = keep - h
        down = f()
        param[idx] = keep
        grad[idx] = (up - down) / (2 * h)
    return grad


def random_mlp(rng, K, H, C, lam):
    return MlpModel(
        w_in=rng.normal(0, 0.7, (H, K)),
        b_in=rng.normal(0, 0.3, H),
        w_out=rng.normal(0, 0.7, (C, H)),
        b_out=rng.normal(0, 0.3, C),
        lam=lam,
    )


# --------------------------------------------------------------------------
# regression
# --------------------------------------------------------------------------


def loop_mse(theta, X, y):
    total = 0.0
    for r in range(X.shape[0]):
        pred = sum(X[r, c] * theta[c] for c in range(X.shape[1]))
        total += (pred - y[r]) ** 2
    return total / (2 * X.shape[0])


def test_mse_matches_scalar_loop():
    rng = np.random.default_rng(0)
    X, y, theta = rng.standard_normal((9, 4)), rng.standard_normal(9), rng.standard_normal(4)
    assert mse_loss(RegressionModel(theta), TrainBatch(X, y)) == pytest.approx(loop_mse(theta, X, y), rel=1e-13)


@pytest.mark.parametrize("seed", range(20))
def test_regression_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    M, K = rng.integers(3, 15), rng.integers(1, 8)
    batch = TrainBatch(rng.standard_normal((M, K)), rng.standard_normal(M))
    model = RegressionModel(rng.standard_normal(K))
    numeric = numeric_grad(lambda: mse_loss(model, batch), model.theta, 1e-5)
    assert rel_error(mse_gradient(model, batch), numeric) <= 1e-6


def test_regression_step_matches_manual_update():
    rng = np.random.default_rng(1)
    X, y = rng.standard_normal((6, 3)), rng.standard_normal(6)
    theta = rng.standard_normal(3)
    expected = theta.copy()
    for _ in range(3):
        grad = [sum((X[r] @ expected - y[r]) * X[r, c] for r in range(6)) / 6 for c in range(3)]
        expected = expected - 0.05 * np.array(grad)
    trained = train_regression(RegressionModel(theta, 0.05), TrainBatch(X, y), 3)
    assert np.allclose(trained.theta, expected, rtol=1e-12)
    # training returns a copy
    assert np.array_equal(theta, theta.copy())


def test_regression_recovers_exact_solution():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((200, 3))
    y = X @ np.array([1.0, -2.0, 0.5])
    model = train_regression(RegressionModel(np.zeros(3), 0.3), TrainBatch(X, y), 500)
    assert np.allclose(model.theta, [1.0, -2.0, 0.5], atol=1e-8)


def test_regression_divergence_is_reported():
    X = np.full((4, 2), 100.0)
    with pytest.raises(DivergenceError) as info:
        train_regression(RegressionModel(np.ones(2), 10.0), TrainBatch(X, np.zeros(4)), 1000)
    assert info.value.iteration < 1000


def test_spectral_solver_matches_literal_loop():
    rng = np.random.default_rng(4)
    X, y = rng.standard_normal((40, 6)), rng.standard_normal(40)
    X[:, 5] = X[:, 4]  # singular Gram
    batch = TrainBatch(X, y)
    start = RegressionModel(rng.standard_normal(6), 0.1)
    solver = SpectralGradientDescent(batch, 0.1)
    coords = solver.to_basis(start.theta)
    model = start
    for steps in (1, 7, 50):
        coords = solver.advance(coords, steps)
        model = train_regression(model, batch, steps)
        assert np.allclose(solver.from_basis(coords), model.theta, rtol=1e-9, atol=1e-11)
        assert solver.loss(coords) == pytest.approx(mse_loss(model, batch), rel=1e-9)


def test_spectral_solver_diverges_like_the_loop():
    X = np.array([[3.0, 0.0], [0.0, 1.0]])
    solver = SpectralGradientDescent(TrainBatch(X, np.ones(2)), 1.0)
    coords = solver.advance(solver.to_basis(np.zeros(2)), 40)
    assert np.max(np.abs(coords)) > 1e10


# --------------------------------------------------------------------------
# MLP
# --------------------------------------------------------------------------


def loop_forward(model, x):
    H, K = model.w_in.shape
    hidden = []
    for h in range(H):
        z = model.b_in[h] + sum(model.w_in[h, k] * x[k] for k in range(K))
        hidden.append(1.0 / (1.0 + math.exp(-z)))
    logits = [model.b_out[c] + sum(model.w_out[c, h] * hidden[h] for h in range(H)) for c in range(model.n_classes)]
    top = max(logits)
    exps = [math.exp(v - top) for v in logits]
    return [v / sum(exps) for v in exps]


def test_forward_matches_scalar_loop():
    rng = np.random.default_rng(5)
    model = random_mlp(rng, 4, 3, 5, 0.0)
    rows = rng.standard_normal((6, 4))
    probs = mlp_forward(model, rows)
    for r in range(6):
        assert np.allclose(probs[r], loop_forward(model, rows[r]), rtol=1e-12)
    assert np.allclose(mlp_forward(model, rows[0]), probs[0])


def test_zero_weights_give_uniform_output_and_log_ten_loss():
    model = MlpModel(np.zeros((3, 4)), np.zeros(3), np.zeros((10, 3)), np.zeros(10), lam=5.0)
    x = np.random.default_rng(0).random((8, 4))
    assert np.allclose(mlp_forward(model, x), 0.1)
    batch = TrainBatch(x, np.arange(8))
    assert cross_entropy_loss(model, batch) == pytest.approx(math.log(10), rel=1e-14)


def test_penalty_excludes_biases():
    w = np.ones((2, 3))
    model = MlpModel(w, np.full(2, 9.0), np.ones((2, 2)), np.full(2, 9.0), lam=4.0)
    zeros = MlpModel(np.zeros((2, 3)), np.full(2, 9.0), np.zeros((2, 2)), np.full(2, 9.0), lam=4.0)
    batch = TrainBatch(np.zeros((2, 3)), np.array([0, 1]))
    # 10 squared weights, lam/(2M) = 1
    assert cross_entropy_loss(model, batch) - cross_entropy_loss(zeros, batch) == pytest.approx(10.0)


@pytest.mark.parametrize("seed", range(20))
def test_mlp_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    K, H, C, M = rng.integers(1, 6), rng.integers(1, 5), rng.integers(2, 5), rng.integers(2, 10)
    model = random_mlp(rng, K, H, C, lam=float(rng.uniform(0, 3)))
    batch = TrainBatch(rng.standard_normal((M, K)), rng.integers(0, C, M))
    _, grads = mlp_loss_and_gradients(model, batch)
    blocks = (model.w_in, model.b_in, model.w_out, model.b_out)
    for param, analytic in zip(blocks, grads):
        numeric = numeric_grad(lambda: cross_entropy_loss(model, batch), param, 1e-6)
        assert rel_error(analytic, numeric) <= 1e-4


def test_mlp_learns_separable_toy_set():
    rng = np.random.default_rng(6)
    centres = np.array([[2.0, 0.0], [-2.0, 0.0], [0.0, 2.5]])
    labels = np.repeat(np.arange(3), 30)
    X = centres[labels] + 0.3 * rng.standard_normal((90, 2))
    batch = TrainBatch(X, labels)
    model = MlpModel.initialize(2, 4, 3, lam=0.0, learning_rate=1.0, rng=rng)
    before = cross_entropy_loss(model, batch)
    trained = train_mlp(model, batch, 400)
    assert cross_entropy_loss(trained, batch) < before
    assert accuracy(trained, batch) == 1.0


def test_initialization_ranges():
    model = MlpModel.initialize(400, 20, 10, 1.0, 1.0, np.random.default_rng(0))
    assert np.all(np.abs(model.w_in) <= 1 / 20)
    assert np.all(np.abs(model.w_out) <= 1 / math.sqrt(20))
    assert not model.b_in.any() and not model.b_out.any()


def test_argmax_tie_takes_lowest_class():
    model = MlpModel(np.zeros((1, 1)), np.zeros(1), np.zeros((3, 1)), np.array([0.0, 1.0, 1.0]))
    assert predict_classes(model, np.zeros((2, 1))).tolist() == [1, 1]


def test_sigmoid_is_stable_at_extremes():
    z = np.array([-1000.0, 0.0, 1000.0])
    assert np.allclose(sigmoid(z), [0.0, 0.5, 1.0])


def test_label_out_of_range():
    model = random_mlp(np.random.default_rng(0), 2, 2, 3, 0.0)
    with pytest.raises(ValueError):
        cross_entropy_loss(model, TrainBatch(np.zeros((1, 2)), np.array([3])))


def test_snapshot_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    mlp = random_mlp(rng, 3, 2, 4, 1.5)
    save_model(mlp, [RawPixel(0), RawPixel(5), RawPixel(9)], tmp_path / "m.json")
    back, names = load_model(tmp_path / "m.json")
    assert names == ["px(0)", "px(5)", "px(9)"]
    for a, b in zip((mlp.w_in, mlp.b_in, mlp.w_out, mlp.b_out), (back.w_in, back.b_in, back.w_out, back.b_out)):
        assert np.array_equal(a, b)
    assert back.lam == 1.5
    reg = RegressionModel(rng.standard_normal(4), 0.25)
    save_model(reg, ["1", "x1", "x2", "x1^2"], tmp_path / "r.json")
    back, _ = load_model(tmp_path / "r.json")
    assert np.array_equal(back.theta, reg.theta) and back.learning_rate == 0.25


def test_mse_worked_examples():
    assert mse_loss(RegressionModel(np.zeros(2)), TrainBatch(np.ones((3, 2)), np.zeros(3))) == 0.0
    assert mse_loss(RegressionModel(np.array([3.0])), TrainBatch(np.ones((1, 1)), np.ones(1))) == 2.0


@pytest.mark.parametrize("seed", range(5))
def test_regression_loss_never_increases_below_inverse_lipschitz(seed):
    rng = np.random.default_rng(seed)
    X, y = rng.standard_normal((12, 4)), rng.standard_normal(12)
    L = np.linalg.eigvalsh(X.T @ X / 12).max()
    model = RegressionModel(rng.standard_normal(4), 0.9 / L)
    batch = TrainBatch(X, y)
    losses = [mse_loss(model, batch)]
    for _ in range(30):
        model = train_regression(model, batch, 1)
        losses.append(mse_loss(model, batch))
    assert all(b <= a + 1e-15 for a, b in zip(losses, losses[1:]))
    assert model.theta.shape == (4,)


def test_forward_is_a_distribution_for_wild_weights():
    rng = np.random.default_rng(8)
    model = random_mlp(rng, 5, 3, 7, 0.0)
    model.w_out *= 300.0
    probs = mlp_forward(model, rng.standard_normal((20, 5)) * 50)
    assert np.all(probs >= 0) and np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)


def test_cross_entropy_matches_scalar_oracle():
    rng = np.random.default_rng(9)
    model = random_mlp(rng, 3, 2, 4, 0.8)
    X, labels = rng.standard_normal((5, 3)), np.array([0, 3, 1, 1, 2])
    nll = -sum(math.log(loop_forward(model, X[r])[labels[r]]) for r in range(5)) / 5
    penalty = 0.8 / 10 * (sum(v * v for v in model.w_in.ravel()) + sum(v * v for v in model.w_out.ravel()))
    assert cross_entropy_loss(model, TrainBatch(X, labels)) == pytest.approx(nll + penalty, rel=1e-12)


def test_accuracy_matches_counting_oracle():
    rng = np.random.default_rng(10)
    model = random_mlp(rng, 4, 3, 3, 0.0)
    X, labels = rng.standard_normal((40, 4)), rng.integers(0, 3, 40)
    hits = sum(int(np.argmax(loop_forward(model, X[r])) == labels[r]) for r in range(40))
    assert accuracy(model, TrainBatch(X, labels)) == hits / 40
    zero = MlpModel(np.zeros((2, 4)), np.zeros(2), np.zeros((10, 2)), np.zeros(10))
    balanced = np.tile(np.arange(10), 3)
    assert accuracy(zero, TrainBatch(np.ones((30, 4)), balanced)) == pytest.approx(0.1)


def test_training_keeps_shapes_and_input():
    rng = np.random.default_rng(11)
    model = random_mlp(rng, 3, 2, 3, 1.0)
    w_in = model.w_in.copy()
    out = train_mlp(model, TrainBatch(rng.standard_normal((6, 3)), rng.integers(0, 3, 6)), 5)
    assert np.array_equal(model.w_in, w_in)
    assert out.w_in.shape == (2, 3) and out.w_out.shape == (3, 2)
