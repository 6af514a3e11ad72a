"""Experiment configuration files.

The format is flat ``key = value`` text, one key per line, ``#`` starts a
comment. Each experiment id has a preset; keys in the file override it.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

DEFAULT_DATA_DIR = Path(__file__).resolve().parents[2] / "data"
EXPERIMENTS = ("regression", "mnist-h20", "mnist-h5", "baseline-regression", "baseline-mlp")


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)
        self.line = line


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    seed: int = 0
    trials: int = 1
    budget_iters: int | None = None
    budget_ms: float | None = None
    out: str = "runs"

    # churn / model
    K: int = 50
    I: int = 50
    e: int = 10
    m: int = 3
    schedule: tuple[tuple[int, int], ...] = ()
    tau: float | None = None
    lr: float = 0.1
    lam: float = 0.0
    hidden: int = 20
    max_steps: int | None = None
    readmit_once: bool = True

    # synthetic regression
    d: int = 5
    n_base: int = 10
    n_terms: int = 50
    n_train: int = 10000
    n_test: int = 2000
    noise: float = 0.0
    standardize: bool = True
    spectral: bool = True

    # MNIST
    mnist_images: str | None = None
    mnist_labels: str | None = None
    n_samples: int = 5000
    train_n: int = 4500
    reduction: str = "bilinear"
    coverage: float = 0.99
    derived_coverage: float | None = 0.99
    init_raw: bool = True

    base_dir: str = field(default=".", compare=False)

    @property
    def is_mnist(self) -> bool:
        return self.experiment in ("mnist-h20", "mnist-h5", "baseline-mlp")

    @property
    def is_baseline(self) -> bool:
        return self.experiment.startswith("baseline-")

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def mnist_paths(self) -> tuple[Path, Path]:
        """Configured IDX paths, falling back to the bundled 5000-image subset."""
        data_dir = Path(os.environ.get("FEATURECHURN_DATA", DEFAULT_DATA_DIR))
        images = self.resolve(self.mnist_images) if self.mnist_images else data_dir / "mnist5k-images-idx3-ubyte.gz"
        labels = self.resolve(self.mnist_labels) if self.mnist_labels else data_dir / "mnist5k-labels-idx1-ubyte.gz"
        return images, labels

    def seeds(self) -> list[int]:
        return [self.seed + t for t in range(self.trials)]

    def validate(self) -> "ExperimentConfig":
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; choose from {', '.join(EXPERIMENTS)}")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.budget_iters is not None and self.budget_iters < 1:
            raise ConfigError("budget_iters must be positive")
        if self.budget_ms is not None and self.budget_ms <= 0:
            raise ConfigError("budget_ms must be positive")
        if self.budget_iters is not None and self.budget_ms is not None:
            raise ConfigError("set only one of budget_iters and budget_ms")
        if self.is_baseline and self.budget_iters is None and self.budget_ms is None:
            raise ConfigError("baseline experiments need budget_iters or budget_ms")
        if self.is_mnist and self.hidden < 1:
            raise ConfigError("hidden must be >= 1")
        if self.experiment in ("mnist-h20", "mnist-h5") and self.tau is None:
            raise ConfigError("classification experiments need tau")
        if self.reduction not in ("bilinear", "crop"):
            raise ConfigError("reduction must be 'bilinear' or 'crop'")
        if self.K < 1 or self.I < 1 or not 1 <= self.e <= self.K or self.m < 0:
            raise ConfigError("need K >= 1, I >= 1, 1 <= e <= K, m >= 0")
        return self


PRESETS: dict[str, dict] = {
    "regression": dict(K=50, I=50, e=10, m=3, schedule=((100, 5), (300, 1)), lr=0.1, d=5),
    "baseline-regression": dict(I=50, lr=0.012, d=5, budget_iters=675),
    "mnist-h20": dict(K=400, I=20, e=20, m=3, tau=0.965, lr=1.0, lam=3.9, hidden=20, max_steps=2000),
    "mnist-h5": dict(K=400, I=20, e=20, m=3, tau=0.97, lr=1.0, lam=2.0, hidden=5, max_steps=2000),
    "baseline-mlp": dict(I=20, lr=1.0, lam=3.0, hidden=20, budget_iters=200),
}


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_schedule(text: str) -> tuple[tuple[int, int], ...]:
    """``"100:5, 300:1"`` -> ``((100, 5), (300, 1))``; empty text means no schedule."""
    out = []
    for item in text.replace(";", ",").split(","):
        item = item.strip()
        if not item:
            continue
        k, e = item.split(":")
        out.append((int(k), int(e)))
    return tuple(out)


_OPTIONAL_INT = {"budget_iters", "max_steps"}
_OPTIONAL_FLOAT = {"budget_ms", "tau", "derived_coverage"}
_CONVERTERS = {f.name: f.type for f in fields(ExperimentConfig)}


def _convert(key: str, text: str):
    if key in _OPTIONAL_INT | _OPTIONAL_FLOAT and text.lower() in ("", "none", "off"):
        return None
    if key == "schedule":
        return _parse_schedule(text)
    if key in _OPTIONAL_INT:
        return int(text)
    if key in _OPTIONAL_FLOAT:
        return float(text)
    kind = _CONVERTERS[key]
    if kind == "bool":
        return _parse_bool(text)
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    return text


def parse_config_text(text: str, path: str | None = None) -> dict:
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno, path)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _CONVERTERS or key == "base_dir":
            raise ConfigError(f"unknown key {key!r}", lineno, path)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", lineno, path)
        try:
            values[key] = _convert(key, value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", lineno, path) from None
    return values


def build_config(values: dict, base_dir: str = ".") -> ExperimentConfig:
    if "experiment" not in values:
        raise ConfigError("missing required key 'experiment'")
    experiment = values["experiment"]
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {experiment!r}; choose from {', '.join(EXPERIMENTS)}")
    merged = {**PRESETS[experiment], **values}
    return ExperimentConfig(base_dir=base_dir, **merged).validate()


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    values = parse_config_text(text, str(path))
    try:
        return build_config(values, base_dir=str(path.parent))
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def override(config: ExperimentConfig, **changes) -> ExperimentConfig:
    changes = {k: v for k, v in changes.items() if v is not None}
    if "budget_iters" in changes:
        changes["budget_ms"] = None
    elif "budget_ms" in changes:
        changes["budget_iters"] = None
    return replace(config, **changes).validate()
