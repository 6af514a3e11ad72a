"""The feature-churn training loop.

A model is trained on ``K`` active features drawn from a pool. After every
training period of ``I`` iterations the ``e`` least useful active features
are eliminated and replaced by features drawn uniformly from the candidate
set ``C = ((P - F) - Fbar) | B``, where ``Fbar`` holds eliminated features
and ``B`` the ``m`` best of them. Weights of retained features carry over
untouched.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence, Union

import numpy as np

from featurechurn.models import (
    DivergenceError,
    MlpModel,
    RegressionModel,
    SpectralGradientDescent,
    TrainBatch,
    accuracy,
    cross_entropy_loss,
    mse_loss,
    train_mlp,
    train_regression,
)
from featurechurn.pool import FeatureDescriptor, FeaturePool, design_matrix
from featurechurn.usefulness import rank_for_elimination, score_all


@dataclass(frozen=True)
class CandidateExhaustion:
    pass


@dataclass(frozen=True)
class TrainAccuracy:
    threshold: float

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("accuracy threshold must lie in [0, 1]")


StopRule = Union[CandidateExhaustion, TrainAccuracy]


@dataclass(frozen=True)
class ChurnConfig:
    K: int
    iterations: int
    e_initial: int
    m: int = 3
    schedule: tuple[tuple[int, int], ...] = ()
    stop_rule: StopRule = CandidateExhaustion()
    seed: int = 0
    max_steps: int | None = None
    model: str = "regression"
    learning_rate: float = 0.1
    lam: float = 0.0
    hidden: int = 20
    n_classes: int = 10
    d: int | None = None
    readmit_once: bool = True
    budget_iterations: int | None = None
    budget_ms: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "schedule", tuple((int(k), int(e)) for k, e in self.schedule))
        if self.K < 1 or self.iterations < 1:
            raise ValueError("K and iterations must be >= 1")
        if not 1 <= self.e_initial <= self.K:
            raise ValueError(f"e={self.e_initial} must lie in [1, K={self.K}]")
        if self.m < 0:
            raise ValueError("m must be >= 0")
        ks = [k for k, _ in self.schedule]
        es = [self.e_initial] + [e for _, e in self.schedule]
        if any(b <= a for a, b in zip(ks, ks[1:])) or any(k < 1 for k in ks):
            raise ValueError("schedule steps must be positive and strictly increasing")
        if any(b >= a for a, b in zip(es, es[1:])) or min(es) < 1:
            raise ValueError("schedule e values must be positive and strictly decreasing")
        if self.model not in ("regression", "mlp"):
            raise ValueError(f"unknown model {self.model!r}")
        if self.model == "mlp" and self.hidden < 1:
            raise ValueError("hidden must be >= 1")
        if self.budget_iterations is not None and self.budget_iterations < 1:
            raise ValueError("iteration budget must be positive")
        if self.budget_ms is not None and self.budget_ms <= 0:
            raise ValueError("time budget must be positive")

    def e_at(self, step: int) -> int:
        """Elimination count used by churn step ``step`` (0-based)."""
        e = self.e_initial
        for k, e_k in self.schedule:
            if step >= k:
                e = e_k
        return e

    def default_max_steps(self, pool_size: int) -> int:
        return self.max_steps if self.max_steps is not None else math.ceil(10 * pool_size / self.e_initial)


class ColumnSource:
    """Evaluates pool features on raw train/test samples.

    With ``standardize`` each column is z-scored using the mean and standard
    deviation of its training values; constant columns are left as they are.
    """

    def __init__(self, train_x, train_y, test_x=None, test_y=None, standardize: bool = False):
        self.train_x = np.asarray(train_x, dtype=np.float64)
        self.train_y = np.asarray(train_y)
        self.test_x = None if test_x is None else np.asarray(test_x, dtype=np.float64)
        self.test_y = None if test_y is None else np.asarray(test_y)
        self.standardize = standardize

    @property
    def has_test(self) -> bool:
        return self.test_x is not None

    def columns(self, features: Sequence[FeatureDescriptor]):
        """Train and test columns (test is ``None`` without a test split)."""
        train = design_matrix(features, self.train_x)
        test = None if self.test_x is None else design_matrix(features, self.test_x)
        if self.standardize:
            mu = train.mean(axis=0)
            sd = train.std(axis=0)
            const = sd == 0.0
            mu[const] = 0.0
            sd[const] = 1.0
            train = (train - mu) / sd
            if test is not None:
                test = (test - mu) / sd
        return train, test

    def batches(self, features: Sequence[FeatureDescriptor]):
        train, test = self.columns(features)
        return (
            TrainBatch(train, self.train_y),
            None if test is None else TrainBatch(test, self.test_y),
        )


@dataclass
class StepRecord:
    """Metrics of one training period and the feature switch that followed it."""

    step: int
    iterations: int
    train_loss: float
    test_loss: float = float("nan")
    train_accuracy: float = float("nan")
    test_accuracy: float = float("nan")
    current_e: int = 0
    removed: list[tuple[str, float]] = field(default_factory=list)
    added: list[str] = field(default_factory=list)
    candidates: int = 0
    elapsed_ms: float = 0.0


@dataclass
class ChurnState:
    pool: FeaturePool
    active: list[int]
    model: RegressionModel | MlpModel
    rng: np.random.Generator
    train: TrainBatch
    test: TrainBatch | None
    current_e: int
    eliminated: dict[int, float] = field(default_factory=dict)
    best: list[int] = field(default_factory=list)
    readmitted: set[int] = field(default_factory=set)
    step: int = 0
    iterations_done: int = 0
    visits: list[tuple[int, str, int]] = field(default_factory=list)

    @property
    def active_features(self) -> list[FeatureDescriptor]:
        return [self.pool[k] for k in self.active]

    @property
    def eliminated_features(self) -> set[FeatureDescriptor]:
        return {self.pool[k] for k in self.eliminated}

    @property
    def best_features(self) -> set[FeatureDescriptor]:
        return {self.pool[k] for k in self.best}

    def candidates(self) -> np.ndarray:
        """Pool indices of ``((P - F) - Fbar) | B``, ascending."""
        untried = np.ones(len(self.pool), dtype=bool)
        untried[self.active] = False
        if self.eliminated:
            untried[list(self.eliminated)] = False
        if self.best:
            untried[self.best] = True
        return np.flatnonzero(untried)

    def check_invariants(self, K: int, m: int) -> None:
        F, Fbar, B = set(self.active), set(self.eliminated), set(self.best)
        assert len(self.active) == K and len(F) == K, "active set must hold K distinct features"
        assert not F & Fbar, "active and eliminated sets overlap"
        assert B <= Fbar and len(B) <= m, "best set must be <= m eliminated features"
        assert self.model.n_features == K, "model width must equal K"
        assert self.train.n_features == K, "design width must equal K"


def best_eliminated(
    eliminated: dict[int, float], m: int, exclude: set[int] = frozenset()
) -> list[int]:
    """The ``m`` highest-scored eliminated features, ties by ascending pool index."""
    ranked = sorted((k for k in eliminated if k not in exclude), key=lambda k: (-eliminated[k], k))
    return ranked[:m]


def _fresh_model(config: ChurnConfig, rng: np.random.Generator):
    if config.model == "regression":
        return RegressionModel.initialize(config.K, config.learning_rate, rng)
    return MlpModel.initialize(
        config.K, config.hidden, config.n_classes, config.lam, config.learning_rate, rng
    )


def init_state(
    pool: FeaturePool,
    config: ChurnConfig,
    source: ColumnSource,
    required: Sequence[FeatureDescriptor] = (),
) -> ChurnState:
    """Random initial active set and fresh weights.

    ``required`` features are placed first; the remaining ``K - len(required)``
    are drawn uniformly without replacement from the rest of the pool.
    """
    if config.K > len(pool):
        raise ValueError(f"K={config.K} exceeds pool size {len(pool)}")
    rng = np.random.default_rng(config.seed)
    fixed = [pool.index(d) for d in required]
    if len(set(fixed)) != len(fixed) or len(fixed) > config.K:
        raise ValueError("required features must be distinct and at most K")
    rest = np.setdiff1d(np.arange(len(pool)), fixed)
    drawn = rng.choice(rest.size, size=config.K - len(fixed), replace=False)
    active = fixed + [int(rest[k]) for k in drawn]
    model = _fresh_model(config, rng)
    train, test = source.batches([pool[k] for k in active])
    state = ChurnState(
        pool=pool,
        active=active,
        model=model,
        rng=rng,
        train=train,
        test=test,
        current_e=config.e_at(0),
    )
    state.visits = [(0, "init", k) for k in active]
    return state


def train_model(model, batch: TrainBatch, iterations: int):
    if isinstance(model, RegressionModel):
        return train_regression(model, batch, iterations)
    return train_mlp(model, batch, iterations)


def train_period(state: ChurnState, iterations: int) -> None:
    try:
        state.model = train_model(state.model, state.train, iterations)
    except DivergenceError as exc:
        raise DivergenceError(state.iterations_done + exc.iteration, exc.loss) from None
    state.iterations_done += iterations


def evaluate(model, train: TrainBatch, test: TrainBatch | None) -> dict[str, float]:
    nan = float("nan")
    if isinstance(model, RegressionModel):
        return {
            "train_loss": mse_loss(model, train),
            "test_loss": nan if test is None else mse_loss(model, test),
            "train_accuracy": nan,
            "test_accuracy": nan,
        }
    return {
        "train_loss": cross_entropy_loss(model, train),
        "test_loss": nan if test is None else cross_entropy_loss(model, test),
        "train_accuracy": accuracy(model, train),
        "test_accuracy": nan if test is None else accuracy(model, test),
    }


def splice_weights(model, removed_positions: Sequence[int], inserted_count: int, rng: np.random.Generator):
    """New weights at ``removed_positions``; every other weight is copied bit for bit.

    Regression coordinates restart at zero. MLP input columns restart at
    uniform(-1/sqrt(K), 1/sqrt(K)); biases and output weights are untouched.
    """
    positions = sorted(int(p) for p in removed_positions)
    if inserted_count != len(positions):
        raise ValueError("inserted_count must equal the number of removed positions")
    if len(set(positions)) != len(positions):
        raise ValueError("duplicate positions")
    if positions and not (0 <= positions[0] and positions[-1] < model.n_features):
        raise IndexError(f"positions outside [0, {model.n_features})")
    out = model.copy()
    if not positions:
        return out
    if isinstance(out, RegressionModel):
        out.theta[positions] = 0.0
    else:
        r = 1.0 / math.sqrt(out.n_features)
        out.w_in[:, positions] = rng.uniform(-r, r, (out.hidden, len(positions)))
    return out


def switch_features(
    state: ChurnState,
    source: ColumnSource,
    config: ChurnConfig,
    scores: np.ndarray,
) -> StepRecord | None:
    """Eliminate the ``current_e`` least useful features and draw replacements.

    Returns ``None`` without touching the state when the candidate set is too
    small to draw from. The returned record carries only switch fields; the
    caller fills in the metrics.
    """
    e = state.current_e
    worst = rank_for_elimination(scores, e)
    removed = [state.active[p] for p in worst]

    eliminated = dict(state.eliminated)
    for p, k in zip(worst, removed):
        eliminated[k] = float(scores[p])
    exclude = state.readmitted if config.readmit_once else set()
    best = best_eliminated(eliminated, config.m, exclude)

    untried = np.ones(len(state.pool), dtype=bool)
    kept_active = [k for k in state.active if k not in set(removed)]
    untried[kept_active] = False
    untried[list(eliminated)] = False
    if best:
        untried[best] = True
    cands = np.flatnonzero(untried)
    if cands.size < e:
        return None

    draw = state.rng.choice(cands.size, size=e, replace=False)
    incoming = [int(cands[j]) for j in draw]

    for k in incoming:
        if k in eliminated:
            del eliminated[k]
            state.readmitted.add(k)
    best = [k for k in best if k not in set(incoming)]

    order = sorted(range(e), key=lambda j: worst[j])
    positions = [worst[j] for j in order]
    for slot, k in zip(positions, incoming):
        state.active[slot] = k
    state.model = splice_weights(state.model, positions, e, state.rng)
    train_cols, test_cols = source.columns([state.pool[k] for k in incoming])
    state.train.design[:, positions] = train_cols
    if state.test is not None:
        state.test.design[:, positions] = test_cols

    state.eliminated = eliminated
    state.best = best
    state.visits += [(state.step, "out", k) for k in removed]
    state.visits += [(state.step, "in", k) for k in incoming]
    record = StepRecord(
        step=state.step,
        iterations=state.iterations_done,
        train_loss=float("nan"),
        current_e=e,
        removed=[(str(state.pool[k]), float(scores[p])) for p, k in zip(worst, removed)],
        added=[str(state.pool[k]) for k in incoming],
        candidates=int(cands.size),
    )
    state.step += 1
    state.current_e = config.e_at(state.step)
    return record


def churn_step(
    state: ChurnState,
    source: ColumnSource,
    config: ChurnConfig,
    scorer: Callable = score_all,
    iterations: int | None = None,
) -> tuple[ChurnState, StepRecord | None]:
    """One full cycle: train, measure, score, eliminate, redraw, splice.

    The record is ``None`` when no switch was possible.
    """
    train_period(state, iterations or config.iterations)
    metrics = evaluate(state.model, state.train, state.test)
    record = switch_features(state, source, config, scorer(state.model, state.train))
    if record is not None:
        for key, value in metrics.items():
            setattr(record, key, value)
    return state, record


@dataclass
class RunResult:
    model: RegressionModel | MlpModel
    features: list[FeatureDescriptor]
    records: list[StepRecord]
    termination: str
    final: dict[str, float]
    iterations: int
    steps: int
    elapsed_ms: float
    state: ChurnState | None = None

    def summary(self) -> dict:
        return {
            "termination": self.termination,
            "steps": self.steps,
            "iterations": self.iterations,
            "elapsed_ms": self.elapsed_ms,
            **{k: v for k, v in self.final.items()},
        }


def _budget_left(config: ChurnConfig, done: int) -> int:
    if config.budget_iterations is None:
        return config.iterations
    return min(config.iterations, config.budget_iterations - done)


def _stop_reason(state: ChurnState, config: ChurnConfig, metrics, elapsed_ms: float, max_steps: int):
    rule = config.stop_rule
    if isinstance(rule, TrainAccuracy) and metrics["train_accuracy"] >= rule.threshold:
        return "accuracy_reached"
    if config.budget_iterations is not None and state.iterations_done >= config.budget_iterations:
        return "iteration_budget"
    if config.budget_ms is not None and elapsed_ms >= config.budget_ms:
        return "time_budget"
    if state.step >= max_steps:
        return "max_steps"
    if state.candidates().size <= state.current_e:
        return "candidates_exhausted"
    return None


def run_churn(
    pool: FeaturePool,
    config: ChurnConfig,
    source: ColumnSource,
    required: Sequence[FeatureDescriptor] = (),
    scorer: Callable = score_all,
    on_step: Callable[[ChurnState, StepRecord], None] | None = None,
) -> RunResult:
    """Repeat churn steps until the stop rule, a budget, ``max_steps`` or candidate exhaustion.

    Every period ends with a stop check. The period that triggers a stop is
    not followed by a switch; its metrics become ``RunResult.final``.
    """
    state = init_state(pool, config, source, required)
    max_steps = config.default_max_steps(len(pool))
    records: list[StepRecord] = []
    start = time.perf_counter()
    while True:
        train_period(state, _budget_left(config, state.iterations_done))
        metrics = evaluate(state.model, state.train, state.test)
        elapsed = (time.perf_counter() - start) * 1e3
        reason = _stop_reason(state, config, metrics, elapsed, max_steps)
        if reason is None:
            record = switch_features(state, source, config, scorer(state.model, state.train))
            if record is None:
                reason = "candidates_exhausted"
        if reason is not None:
            return RunResult(
                model=state.model,
                features=state.active_features,
                records=records,
                termination=reason,
                final=metrics,
                iterations=state.iterations_done,
                steps=state.step,
                elapsed_ms=(time.perf_counter() - start) * 1e3,
                state=state,
            )
        for key, value in metrics.items():
            setattr(record, key, value)
        record.elapsed_ms = (time.perf_counter() - start) * 1e3
        records.append(record)
        if on_step is not None:
            on_step(state, record)


def run_regression(pool, config: ChurnConfig, source: ColumnSource, **kwargs) -> RunResult:
    if not isinstance(config.stop_rule, CandidateExhaustion) or config.model != "regression":
        raise ValueError("regression runs need model='regression' and CandidateExhaustion")
    return run_churn(pool, config, source, **kwargs)


def run_classification(pool, config: ChurnConfig, source: ColumnSource, **kwargs) -> RunResult:
    if not isinstance(config.stop_rule, TrainAccuracy) or config.model != "mlp":
        raise ValueError("classification runs need model='mlp' and a TrainAccuracy stop rule")
    if config.schedule:
        raise ValueError("classification runs keep e constant; schedule must be empty")
    return run_churn(pool, config, source, **kwargs)


def run_fixed(
    features: Sequence[FeatureDescriptor],
    config: ChurnConfig,
    source: ColumnSource,
    spectral: bool = False,
) -> RunResult:
    """Train on a fixed feature list, logging one record per ``config.iterations``.

    Runs until the iteration or time budget (one of them is required). With
    ``spectral`` a regression model is advanced by
    :class:`SpectralGradientDescent` instead of the literal loop.
    """
    if config.budget_iterations is None and config.budget_ms is None:
        raise ValueError("a fixed-feature run needs an iteration or time budget")
    features = list(features)
    cfg = config if config.K == len(features) else _with_K(config, len(features))
    rng = np.random.default_rng(cfg.seed)
    model = _fresh_model(cfg, rng)
    train, test = source.batches(features)
    solver = None
    if spectral:
        if not isinstance(model, RegressionModel):
            raise ValueError("spectral training applies to regression only")
        solver = SpectralGradientDescent(train, model.learning_rate)
        coords = solver.to_basis(model.theta)

    records: list[StepRecord] = []
    done, period = 0, 0
    start = time.perf_counter()
    while True:
        n = _budget_left(cfg, done)
        if solver is not None:
            coords = solver.advance(coords, n)
            model = RegressionModel(solver.from_basis(coords), model.learning_rate)
            if not np.all(np.isfinite(model.theta)):
                raise DivergenceError(done + n, float("nan"))
        else:
            try:
                model = train_model(model, train, n)
            except DivergenceError as exc:
                raise DivergenceError(done + exc.iteration, exc.loss) from None
        done += n
        metrics = evaluate(model, train, test)
        if not np.isfinite(metrics["train_loss"]):
            raise DivergenceError(done, metrics["train_loss"])
        elapsed = (time.perf_counter() - start) * 1e3
        if cfg.budget_iterations is not None and done >= cfg.budget_iterations:
            reason = "iteration_budget"
        elif cfg.budget_ms is not None and elapsed >= cfg.budget_ms:
            reason = "time_budget"
        else:
            reason = None
        if reason is not None:
            return RunResult(
                model=model,
                features=features,
                records=records,
                termination=reason,
                final=metrics,
                iterations=done,
                steps=period,
                elapsed_ms=elapsed,
            )
        records.append(StepRecord(step=period, iterations=done, elapsed_ms=elapsed, **metrics))
        period += 1


def _with_K(config: ChurnConfig, K: int) -> ChurnConfig:
    return replace(config, K=K, e_initial=min(config.e_initial, K), schedule=())
