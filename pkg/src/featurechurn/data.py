"""Datasets and file formats: synthetic polynomial regression, MNIST IDX, metrics CSV."""

from __future__ import annotations

import csv
import gzip
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from featurechurn.pool import FeatureDescriptor, design_matrix, multinomial_pool

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


class BadMagicError(IdxError):
    pass


class TruncatedFileError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


# --------------------------------------------------------------------------
# Synthetic regression
# --------------------------------------------------------------------------


@dataclass
class RegressionDataset:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    generating_features: list[FeatureDescriptor]
    coefficients: np.ndarray

    def targets_for(self, x: np.ndarray) -> np.ndarray:
        return design_matrix(self.generating_features, x) @ self.coefficients


def synth_regression(
    seed: int,
    n_base: int = 10,
    degree: int = 5,
    n_terms: int = 50,
    n_train: int = 10000,
    n_test: int = 2000,
    noise: float = 0.0,
) -> RegressionDataset:
    """Gaussian inputs and a target built from ``n_terms`` random pool monomials.

    Coefficients are uniform(-1, 1). ``noise`` adds Gaussian noise of that
    standard deviation to the targets (default: none).
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n_train + n_test, n_base))
    pool = multinomial_pool(n_base, degree)
    chosen = np.sort(rng.choice(len(pool), size=n_terms, replace=False))
    features = [pool[int(k)] for k in chosen]
    coefficients = rng.uniform(-1.0, 1.0, n_terms)
    y = design_matrix(features, x) @ coefficients
    if noise > 0:
        y = y + noise * rng.standard_normal(y.shape)
    return RegressionDataset(
        train_x=x[:n_train],
        train_y=y[:n_train],
        test_x=x[n_train:],
        test_y=y[n_train:],
        generating_features=features,
        coefficients=coefficients,
    )


# --------------------------------------------------------------------------
# MNIST
# --------------------------------------------------------------------------


@dataclass
class ImageDataset:
    images: np.ndarray
    labels: np.ndarray
    height: int
    width: int

    def __post_init__(self):
        if self.images.shape != (len(self.labels), self.height * self.width):
            raise ValueError("images must be N x (height*width) and match the labels")

    def __len__(self) -> int:
        return len(self.labels)


def _read_bytes(path: str | Path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _header(raw: bytes, path, magic: int, n_dims: int) -> tuple[int, ...]:
    head = 4 + 4 * n_dims
    if len(raw) < head:
        raise TruncatedFileError(f"{path}: header needs {head} bytes, file has {len(raw)}")
    found = int.from_bytes(raw[:4], "big")
    if found != magic:
        raise BadMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    return tuple(int.from_bytes(raw[4 + 4 * k : 8 + 4 * k], "big") for k in range(n_dims))


def read_idx_images(path: str | Path) -> np.ndarray:
    """uint8 array ``[N, rows, cols]`` from an IDX3 file (optionally gzipped)."""
    raw = _read_bytes(path)
    n, rows, cols = _header(raw, path, IMAGES_MAGIC, 3)
    expected = 16 + n * rows * cols
    if len(raw) < expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, count=n * rows * cols, offset=16).reshape(n, rows, cols)


def read_idx_labels(path: str | Path) -> np.ndarray:
    raw = _read_bytes(path)
    (n,) = _header(raw, path, LABELS_MAGIC, 1)
    expected = 8 + n
    if len(raw) < expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=8).copy()


def load_idx(images_path: str | Path, labels_path: str | Path) -> ImageDataset:
    """Images scaled to [0, 1] by /255, flattened row-major."""
    pixels = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(pixels) != len(labels):
        raise CountMismatchError(f"{len(pixels)} images but {len(labels)} labels")
    n, rows, cols = pixels.shape
    return ImageDataset(
        images=pixels.reshape(n, rows * cols).astype(np.float64) / 255.0,
        labels=labels.astype(np.int64),
        height=rows,
        width=cols,
    )


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 ``[N, rows, cols]`` images and labels as raw IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(
        IMAGES_MAGIC.to_bytes(4, "big")
        + b"".join(v.to_bytes(4, "big") for v in (n, rows, cols))
        + images.tobytes()
    )
    Path(labels_path).write_bytes(
        LABELS_MAGIC.to_bytes(4, "big") + len(labels).to_bytes(4, "big") + labels.tobytes()
    )


def _linear_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic matrix mapping ``n_in`` samples to ``n_out`` by pixel-centre linear interpolation."""
    centres = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
    lo = np.floor(centres).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = centres - lo
    out = np.zeros((n_out, n_in))
    np.add.at(out, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(out, (np.arange(n_out), hi), frac)
    return out


def shrink_images(images: np.ndarray, height: int, width: int, size: int = 20, method: str = "bilinear") -> np.ndarray:
    """Reduce flattened ``height x width`` images to ``size x size``.

    ``crop`` keeps the central window; ``bilinear`` resamples the whole image.
    """
    stack = np.asarray(images, dtype=np.float64).reshape(-1, height, width)
    if method == "crop":
        top, left = (height - size) // 2, (width - size) // 2
        out = stack[:, top : top + size, left : left + size]
    elif method == "bilinear":
        rows = _linear_weights(height, size)
        cols = _linear_weights(width, size)
        out = rows @ (stack @ cols.T)
        np.clip(out, 0.0, 1.0, out=out)
    else:
        raise ValueError(f"unknown reduction method {method!r}")
    return np.ascontiguousarray(out).reshape(len(stack), size * size)


def stratified_indices(labels: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` indices sampled without replacement, class counts proportional to ``labels``.

    Remainders of the proportional allocation go to the classes with the
    largest fractional parts, then lowest label.
    """
    classes, counts = np.unique(labels, return_counts=True)
    exact = counts * n / counts.sum()
    alloc = np.floor(exact).astype(int)
    short = n - alloc.sum()
    order = np.lexsort((classes, -(exact - alloc)))
    alloc[order[:short]] += 1
    picked = []
    for cls, k in zip(classes, alloc):
        members = np.flatnonzero(labels == cls)
        picked.append(rng.choice(members, size=k, replace=False))
    return np.sort(np.concatenate(picked))


def reduce_mnist(
    raw: ImageDataset, n: int = 5000, seed: int = 0, size: int = 20, method: str = "bilinear"
) -> ImageDataset:
    """Label-stratified subsample of ``n`` images, each shrunk to ``size x size``."""
    if n > len(raw):
        raise ValueError(f"requested {n} samples from a dataset of {len(raw)}")
    rng = np.random.default_rng(seed)
    idx = stratified_indices(raw.labels, n, rng)
    images = shrink_images(raw.images[idx], raw.height, raw.width, size, method)
    return ImageDataset(images=images, labels=raw.labels[idx].copy(), height=size, width=size)


def split_dataset(dataset: ImageDataset, train_n: int, seed: int = 0):
    """Shuffle with ``seed`` and split into ``(train, test)`` of sizes ``train_n`` and the rest."""
    if not 0 < train_n < len(dataset):
        raise ValueError(f"train_n must lie in (0, {len(dataset)}), got {train_n}")
    perm = np.random.default_rng(seed).permutation(len(dataset))
    parts = []
    for idx in (perm[:train_n], perm[train_n:]):
        parts.append(
            ImageDataset(
                images=dataset.images[idx],
                labels=dataset.labels[idx],
                height=dataset.height,
                width=dataset.width,
            )
        )
    return tuple(parts)


# --------------------------------------------------------------------------
# Metrics CSV and summaries
# --------------------------------------------------------------------------

METRIC_COLUMNS = (
    "step",
    "iterations",
    "train_loss",
    "test_loss",
    "train_accuracy",
    "test_accuracy",
    "current_e",
    "candidates",
    "removed",
    "added",
)


def _fmt(value: float) -> str:
    if isinstance(value, float) and math.isnan(value):
        return ""
    return f"{value:.9g}"


def export_metrics(records: Iterable, path: str | Path) -> None:
    """Write one row per churn step.

    Removed features are written as ``descriptor=score`` joined by ``;``,
    added features as descriptors joined by ``;``. Wall-clock times are kept
    out of this file so equal seeds give byte-identical output; see
    :func:`export_timings`.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for r in records:
            writer.writerow(
                [
                    r.step,
                    r.iterations,
                    _fmt(r.train_loss),
                    _fmt(r.test_loss),
                    _fmt(r.train_accuracy),
                    _fmt(r.test_accuracy),
                    r.current_e,
                    r.candidates,
                    ";".join(f"{name}={_fmt(score)}" for name, score in r.removed),
                    ";".join(r.added),
                ]
            )


def read_metrics(path: str | Path) -> list[dict]:
    """Parse a metrics CSV back into dicts with numeric fields restored."""
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            parsed: dict = {}
            for key in ("step", "iterations", "current_e", "candidates"):
                parsed[key] = int(row[key])
            for key in ("train_loss", "test_loss", "train_accuracy", "test_accuracy"):
                parsed[key] = float(row[key]) if row[key] else float("nan")
            parsed["removed"] = [
                (name, float(score))
                for name, score in (item.rsplit("=", 1) for item in row["removed"].split(";") if item)
            ]
            parsed["added"] = [item for item in row["added"].split(";") if item]
            rows.append(parsed)
    return rows


def export_timings(records: Iterable, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("step", "elapsed_ms"))
        for r in records:
            writer.writerow((r.step, f"{r.elapsed_ms:.3f}"))


def write_summary(summary: dict, path: str | Path) -> None:
    def clean(v):
        if isinstance(v, (np.floating, np.integer)):
            v = v.item()
        if isinstance(v, float) and not math.isfinite(v):
            return None
        return v

    Path(path).write_text(json.dumps({k: clean(v) for k, v in summary.items()}, indent=2, sort_keys=True) + "\n")


def read_summary(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
