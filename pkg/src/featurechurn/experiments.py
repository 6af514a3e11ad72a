"""Trial runners for the regression and MNIST experiments and their baselines."""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from featurechurn.config import ExperimentConfig
from featurechurn.data import (
    ImageDataset,
    export_metrics,
    export_timings,
    load_idx,
    reduce_mnist,
    split_dataset,
    synth_regression,
    write_summary,
)
from featurechurn.engine import (
    CandidateExhaustion,
    ChurnConfig,
    ColumnSource,
    RunResult,
    TrainAccuracy,
    run_classification,
    run_fixed,
    run_regression,
)
from featurechurn.models import save_model
from featurechurn.pool import FeaturePool, RawPixel, filtered_pixel_pool, multinomial_pool

log = logging.getLogger(__name__)


@dataclass
class Trial:
    seed: int
    result: RunResult
    summary: dict


def engine_seed(seed: int) -> int:
    """Seed for feature draws and weight init, decorrelated from the data seed."""
    return int(np.random.SeedSequence([seed, 1]).generate_state(1)[0])


def churn_config(cfg: ExperimentConfig, seed: int) -> ChurnConfig:
    mlp = cfg.is_mnist
    return ChurnConfig(
        K=cfg.K,
        iterations=cfg.I,
        e_initial=cfg.e,
        m=cfg.m,
        schedule=cfg.schedule,
        stop_rule=TrainAccuracy(cfg.tau) if mlp and cfg.tau is not None else CandidateExhaustion(),
        seed=engine_seed(seed),
        max_steps=cfg.max_steps,
        model="mlp" if mlp else "regression",
        learning_rate=cfg.lr,
        lam=cfg.lam,
        hidden=cfg.hidden,
        n_classes=10,
        d=cfg.d,
        readmit_once=cfg.readmit_once,
        budget_iterations=cfg.budget_iters,
        budget_ms=cfg.budget_ms,
    )


@functools.lru_cache(maxsize=2)
def _raw_mnist(images: str, labels: str) -> ImageDataset:
    return load_idx(images, labels)


def mnist_split(cfg: ExperimentConfig, seed: int) -> tuple[ImageDataset, ImageDataset]:
    images, labels = cfg.mnist_paths()
    raw = _raw_mnist(str(images), str(labels))
    reduced = reduce_mnist(raw, n=cfg.n_samples, seed=seed, method=cfg.reduction)
    return split_dataset(reduced, cfg.train_n, seed=seed)


_POOLS: dict[tuple, tuple[FeaturePool, np.ndarray]] = {}


def mnist_pool(cfg: ExperimentConfig, seed: int, train: ImageDataset) -> tuple[FeaturePool, np.ndarray]:
    """Deviation-filtered pixel pool built from the training images, cached per split."""
    key = (*cfg.mnist_paths(), cfg.n_samples, cfg.reduction, cfg.train_n, seed, cfg.coverage, cfg.derived_coverage)
    if key not in _POOLS:
        if len(_POOLS) >= 8:
            _POOLS.pop(next(iter(_POOLS)))
        _POOLS[key] = filtered_pixel_pool(train.images, cfg.coverage, cfg.derived_coverage)
    return _POOLS[key]


def _summary(cfg: ExperimentConfig, seed: int, result: RunResult, **extra) -> dict:
    task = "classification" if cfg.is_mnist else "regression"
    return {
        "experiment": cfg.experiment,
        "task": task,
        "seed": seed,
        **result.summary(),
        **extra,
    }


def run_trial(cfg: ExperimentConfig, seed: int) -> Trial:
    ccfg = churn_config(cfg, seed)
    if not cfg.is_mnist:
        data = synth_regression(
            seed, n_base=cfg.n_base, degree=cfg.d, n_train=cfg.n_train, n_test=cfg.n_test,
            n_terms=cfg.n_terms, noise=cfg.noise,
        )
        pool = multinomial_pool(cfg.n_base, cfg.d)
        source = ColumnSource(data.train_x, data.train_y, data.test_x, data.test_y, standardize=cfg.standardize)
        if cfg.experiment == "baseline-regression":
            result = run_fixed(pool.descriptors, ccfg, source, spectral=cfg.spectral)
            extra = {"pool_size": len(pool), "features": len(pool)}
        else:
            result = run_regression(pool, ccfg, source)
            extra = {"pool_size": len(pool), "features": cfg.K, "distinct_tried": _distinct(result)}
        true_active = len(set(result.features) & set(data.generating_features))
        return Trial(seed, result, _summary(cfg, seed, result, true_features_active=true_active, **extra))

    train, test = mnist_split(cfg, seed)
    if cfg.experiment == "baseline-mlp":
        features = [RawPixel(k) for k in range(train.images.shape[1])]
        source = ColumnSource(train.images, train.labels, test.images, test.labels)
        result = run_fixed(features, ccfg, source)
        return Trial(seed, result, _summary(cfg, seed, result, features=len(features)))

    pool, kept = mnist_pool(cfg, seed, train)
    source = ColumnSource(train.images, train.labels, test.images, test.labels)
    required = [RawPixel(int(p)) for p in kept][: cfg.K] if cfg.init_raw else []
    result = run_classification(pool, ccfg, source, required=required)
    extra = {
        "pool_size": len(pool),
        "kept_pixels": int(len(kept)),
        "features": cfg.K,
        "distinct_tried": _distinct(result),
    }
    return Trial(seed, result, _summary(cfg, seed, result, **extra))


def _distinct(result: RunResult) -> int:
    return len({k for _, _, k in result.state.visits}) if result.state is not None else 0


def write_trial(trial: Trial, out_dir: Path) -> Path:
    trial_dir = Path(out_dir) / f"seed-{trial.seed}"
    trial_dir.mkdir(parents=True, exist_ok=True)
    export_metrics(trial.result.records, trial_dir / "metrics.csv")
    export_timings(trial.result.records, trial_dir / "timings.csv")
    write_summary(trial.summary, trial_dir / "summary.json")
    save_model(trial.result.model, trial.result.features, trial_dir / "model.json")
    return trial_dir


def run_experiment(cfg: ExperimentConfig, out_dir: Path | None = None) -> list[Trial]:
    out_dir = Path(out_dir if out_dir is not None else cfg.out)
    trials = []
    for seed in cfg.seeds():
        log.info("%s seed %d", cfg.experiment, seed)
        trial = run_trial(cfg, seed)
        write_trial(trial, out_dir)
        trials.append(trial)
    return trials
