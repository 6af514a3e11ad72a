"""Command-line front end.

    featurechurn run CONFIG [--seed N] [--trials N] [--budget-iters N | --budget-ms N] [--out DIR]
    featurechurn baseline-regression CONFIG [...]
    featurechurn baseline-mlp CONFIG [...]
    featurechurn compare DIR DIR [...] [--csv FILE]
    featurechurn pool-info --n 10 --d 5
    featurechurn pool-info --mnist [--images PATH --labels PATH]

Exit codes: 0 success, 1 configuration error, 2 data error, 3 divergence.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from featurechurn.config import ConfigError, ExperimentConfig, build_config, load_config, override
from featurechurn.data import IdxError, read_summary
from featurechurn.models import DivergenceError
from featurechurn.pool import multinomial_pool

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class CompareError(ValueError):
    pass


# --------------------------------------------------------------------------
# compare
# --------------------------------------------------------------------------


@dataclass
class ArmStats:
    name: str
    task: str
    trials: list[dict]

    @property
    def metric(self) -> tuple[str, str]:
        if self.task == "classification":
            return "train_accuracy", "test_accuracy"
        return "train_loss", "test_loss"

    def mean(self, key: str) -> float:
        return float(np.mean([t[key] for t in self.trials]))


def load_arm(run_dir: str | Path) -> ArmStats:
    run_dir = Path(run_dir)
    paths = sorted(run_dir.glob("seed-*/summary.json")) or sorted(run_dir.glob("summary.json"))
    if not paths:
        raise CompareError(f"{run_dir}: no summary.json found")
    trials = [read_summary(p) for p in paths]
    tasks = {t.get("task") for t in trials}
    experiments = {t.get("experiment") for t in trials}
    if len(tasks) != 1 or len(experiments) != 1:
        raise CompareError(f"{run_dir}: mixed experiments {sorted(map(str, experiments))}")
    return ArmStats(name=run_dir.name, task=tasks.pop(), trials=trials)


def compare_arms(run_dirs) -> list[ArmStats]:
    if len(run_dirs) < 2:
        raise CompareError("compare needs at least two run directories")
    arms = [load_arm(d) for d in run_dirs]
    if len({a.task for a in arms}) != 1:
        raise CompareError("cannot compare regression runs with classification runs")
    return arms


def render_table(arms: list[ArmStats]) -> str:
    task = arms[0].task
    train_key, test_key = arms[0].metric
    if task == "classification":
        rows = [("Average Train Accuracy", train_key, 100.0, "%"), ("Average Test Accuracy", test_key, 100.0, "%")]
    else:
        rows = [("Average Training Cost (MSE)", train_key, 1.0, ""), ("Average Testing Cost (MSE)", test_key, 1.0, "")]
    rows.append(("Average Training Time (ms)", "elapsed_ms", 1.0, ""))
    rows.append(("Average Iterations", "iterations", 1.0, ""))
    label_w = max(len(r[0]) for r in rows)
    col_w = max(12, *(len(a.name) for a in arms))
    lines = [" " * label_w + " | " + " | ".join(a.name.rjust(col_w) for a in arms)]
    lines.append("-" * len(lines[0]))
    for label, key, scale, unit in rows:
        cells = [f"{a.mean(key) * scale:.4g}{unit}".rjust(col_w) for a in arms]
        lines.append(label.ljust(label_w) + " | " + " | ".join(cells))
    lines.append("trials".ljust(label_w) + " | " + " | ".join(str(len(a.trials)).rjust(col_w) for a in arms))
    return "\n".join(lines)


def write_comparison(arms: list[ArmStats], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("arm", "row", "seed", "train_metric", "test_metric", "elapsed_ms", "iterations", "trials"))
        for a in arms:
            train_key, test_key = a.metric
            w.writerow((a.name, "mean", "", f"{a.mean(train_key):.9g}", f"{a.mean(test_key):.9g}",
                        f"{a.mean('elapsed_ms'):.9g}", f"{a.mean('iterations'):.9g}", len(a.trials)))
            for t in a.trials:
                w.writerow((a.name, "trial", t["seed"], f"{t[train_key]:.9g}", f"{t[test_key]:.9g}",
                            f"{t['elapsed_ms']:.9g}", t["iterations"], 1))


# --------------------------------------------------------------------------
# pool-info
# --------------------------------------------------------------------------


def pool_info(args) -> str:
    lines = []
    if args.mnist:
        from featurechurn.experiments import mnist_pool, mnist_split

        values = {"experiment": "mnist-h20"}
        if args.images:
            values["mnist_images"] = args.images
        if args.labels:
            values["mnist_labels"] = args.labels
        cfg = build_config(values)
        train, _ = mnist_split(cfg, args.seed)
        pool, kept = mnist_pool(cfg, args.seed, train)
        n_derived = len(pool) - len(kept)
        n_unfiltered = len(kept) * 2 + len(kept) * (len(kept) - 1) // 2
        lines.append(f"pixels: {train.images.shape[1]}  kept after deviation filter: {len(kept)}")
        lines.append(f"derived features (squares + pairs): {n_unfiltered} before filter, {n_derived} after")
        lines.append(f"pool size: {len(pool)} ({len(kept)} + {n_derived})")
    else:
        if args.n is None or args.d is None:
            raise ConfigError("pool-info needs --n and --d, or --mnist")
        if args.n < 1 or args.d < 1:
            raise ConfigError("--n and --d must be >= 1")
        pool = multinomial_pool(args.n, args.d)
        lines.append(f"pool size: {len(pool)}")
    hist = ", ".join(f"{deg}: {count}" for deg, count in pool.degree_histogram.items())
    lines.append(f"degree histogram: {hist}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def _experiment_config(args, force: str | None = None) -> ExperimentConfig:
    cfg = load_config(args.config)
    if force is not None and cfg.experiment != force:
        raise ConfigError(f"{args.config}: experiment is {cfg.experiment!r}, expected {force!r}")
    return override(
        cfg,
        seed=args.seed,
        trials=args.trials,
        budget_iters=args.budget_iters,
        budget_ms=args.budget_ms,
        out=args.out,
    )


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("config", help="experiment config file (key = value lines)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--trials", type=int, default=None)
    budget = p.add_mutually_exclusive_group()
    budget.add_argument("--budget-iters", type=int, default=None)
    budget.add_argument("--budget-ms", type=float, default=None)
    p.add_argument("--out", default=None, help="output directory (one seed-N/ subdirectory per trial)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="featurechurn", description="Feature-churn training experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "baseline-regression", "baseline-mlp"):
        _add_run_flags(sub.add_parser(name))
    p = sub.add_parser("compare")
    p.add_argument("dirs", nargs="+")
    p.add_argument("--csv", default="comparison.csv", help="where to write the comparison CSV")
    p = sub.add_parser("pool-info")
    p.add_argument("--n", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--mnist", action="store_true")
    p.add_argument("--images")
    p.add_argument("--labels")
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "compare":
            arms = compare_arms(args.dirs)
            print(render_table(arms))
            write_comparison(arms, args.csv)
            return EXIT_OK
        if args.command == "pool-info":
            print(pool_info(args))
            return EXIT_OK

        from featurechurn.experiments import run_experiment

        force = None if args.command == "run" else args.command
        cfg = _experiment_config(args, force)
        for trial in run_experiment(cfg):
            s = trial.summary
            if s["task"] == "classification":
                metric = f"train acc {s['train_accuracy']:.4f}  test acc {s['test_accuracy']:.4f}"
            else:
                metric = f"train mse {s['train_loss']:.6g}  test mse {s['test_loss']:.6g}"
            print(f"{cfg.experiment} seed {trial.seed}: {metric}  "
                  f"steps {s['steps']}  iterations {s['iterations']}  ({s['termination']})")
        return EXIT_OK
    except (ConfigError, CompareError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IdxError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
