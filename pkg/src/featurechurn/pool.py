"""Feature pools: symbolic feature descriptors and their numeric evaluation.

Two pool families are supported. Regression pools hold every monomial over
``n`` base coordinates up to a maximum degree. Image pools hold raw pixel
intensities, squared intensities and products of pixel pairs.
"""

from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Iterator, Sequence, Union

import numpy as np


@dataclass(frozen=True)
class Bias:
    """The constant feature; its column is all ones."""

    def __str__(self) -> str:
        return "1"

    @property
    def degree(self) -> int:
        return 0


@dataclass(frozen=True)
class Monomial:
    exponents: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "exponents", tuple(int(a) for a in self.exponents))
        if any(a < 0 for a in self.exponents):
            raise ValueError(f"negative exponent in {self.exponents}")
        if sum(self.exponents) < 1:
            raise ValueError("a monomial needs total degree >= 1; use Bias for the constant")

    @property
    def degree(self) -> int:
        return sum(self.exponents)

    def __str__(self) -> str:
        parts = []
        for k, a in enumerate(self.exponents):
            if a == 1:
                parts.append(f"x{k + 1}")
            elif a > 1:
                parts.append(f"x{k + 1}^{a}")
        return "*".join(parts)


@dataclass(frozen=True)
class RawPixel:
    index: int

    @property
    def degree(self) -> int:
        return 1

    def __str__(self) -> str:
        return f"px({self.index})"


@dataclass(frozen=True)
class PixelSquare:
    index: int

    @property
    def degree(self) -> int:
        return 2

    def __str__(self) -> str:
        return f"px({self.index})^2"


@dataclass(frozen=True)
class PixelPair:
    i: int
    j: int

    def __post_init__(self):
        if not self.i < self.j:
            raise ValueError(f"pixel pair needs i < j, got ({self.i}, {self.j})")

    @property
    def degree(self) -> int:
        return 2

    def __str__(self) -> str:
        return f"px({self.i},{self.j})"


FeatureDescriptor = Union[Bias, Monomial, RawPixel, PixelSquare, PixelPair]

_MONO_TERM = re.compile(r"^x(\d+)(?:\^(\d+))?$")
_PIXEL = re.compile(r"^px\((\d+)\)(\^2)?$")
_PAIR = re.compile(r"^px\((\d+),(\d+)\)$")


def parse_descriptor(text: str, base_dim: int | None = None) -> FeatureDescriptor:
    """Inverse of ``str(descriptor)``.

    Monomial strings do not record the number of base coordinates, so
    ``base_dim`` is required to rebuild one.
    """
    text = text.strip()
    if text == "1":
        return Bias()
    m = _PIXEL.match(text)
    if m:
        idx = int(m.group(1))
        return PixelSquare(idx) if m.group(2) else RawPixel(idx)
    m = _PAIR.match(text)
    if m:
        return PixelPair(int(m.group(1)), int(m.group(2)))
    if base_dim is None:
        raise ValueError(f"cannot parse {text!r} without base_dim")
    exps = [0] * base_dim
    for part in text.split("*"):
        t = _MONO_TERM.match(part)
        if not t:
            raise ValueError(f"malformed feature string {text!r}")
        k = int(t.group(1)) - 1
        if not 0 <= k < base_dim:
            raise ValueError(f"coordinate x{k + 1} out of range for base_dim={base_dim}")
        exps[k] += int(t.group(2) or 1)
    return Monomial(tuple(exps))


@dataclass(frozen=True)
class FeaturePool:
    """An ordered, duplicate-free collection of feature descriptors."""

    descriptors: tuple[FeatureDescriptor, ...]
    base_dim: int
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        descs = tuple(self.descriptors)
        object.__setattr__(self, "descriptors", descs)
        index = {d: k for k, d in enumerate(descs)}
        if len(index) != len(descs):
            raise ValueError("pool contains duplicate descriptors")
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.descriptors)

    def __iter__(self) -> Iterator[FeatureDescriptor]:
        return iter(self.descriptors)

    def __getitem__(self, k):
        return self.descriptors[k]

    def __contains__(self, desc) -> bool:
        return desc in self._index

    def index(self, desc: FeatureDescriptor) -> int:
        return self._index[desc]

    @cached_property
    def degree_histogram(self) -> dict[int, int]:
        hist: dict[int, int] = {}
        for d in self.descriptors:
            hist[d.degree] = hist.get(d.degree, 0) + 1
        return dict(sorted(hist.items()))


def multinomial_pool(n: int, d: int) -> FeaturePool:
    """All monomials in ``n`` variables of total degree 0..d, graded-lex ordered.

    Within a degree the order follows ``itertools.combinations_with_replacement``
    over coordinate indices, so ``x1`` precedes ``x2`` and ``x1^2`` precedes
    ``x1*x2``. The pool has ``C(n + d, d)`` members.
    """
    if n < 1 or d < 1:
        raise ValueError(f"need n >= 1 and d >= 1, got n={n}, d={d}")
    descs: list[FeatureDescriptor] = [Bias()]
    for degree in range(1, d + 1):
        for combo in itertools.combinations_with_replacement(range(n), degree):
            exps = [0] * n
            for k in combo:
                exps[k] += 1
            descs.append(Monomial(tuple(exps)))
    return FeaturePool(tuple(descs), base_dim=n)


def pixel_pool(kept_pixels: Sequence[int], base_dim: int | None = None) -> FeaturePool:
    """Raw pixels, squared pixels and all unordered pixel pairs over ``kept_pixels``.

    Positions are sorted ascending first; pairs are listed in lexicographic
    ``(i, j)`` order with ``i < j``.
    """
    kept = [int(p) for p in kept_pixels]
    if not kept:
        raise ValueError("kept_pixels is empty")
    if len(set(kept)) != len(kept):
        raise ValueError("kept_pixels contains duplicate positions")
    if min(kept) < 0:
        raise ValueError("pixel positions must be non-negative")
    kept.sort()
    if base_dim is None:
        base_dim = kept[-1] + 1
    elif kept[-1] >= base_dim:
        raise ValueError(f"pixel {kept[-1]} outside image of {base_dim} pixels")
    descs: list[FeatureDescriptor] = [RawPixel(p) for p in kept]
    descs += [PixelSquare(p) for p in kept]
    descs += [PixelPair(i, j) for i, j in itertools.combinations(kept, 2)]
    return FeaturePool(tuple(descs), base_dim=base_dim)


def _check_dim(desc: FeatureDescriptor, dim: int) -> None:
    if isinstance(desc, Monomial):
        if len(desc.exponents) != dim:
            raise ValueError(
                f"{desc} expects {len(desc.exponents)} coordinates, sample has {dim}"
            )
    elif isinstance(desc, (RawPixel, PixelSquare)):
        if desc.index >= dim:
            raise ValueError(f"{desc} outside sample of {dim} pixels")
    elif isinstance(desc, PixelPair):
        if desc.j >= dim:
            raise ValueError(f"{desc} outside sample of {dim} pixels")
    elif not isinstance(desc, Bias):
        raise TypeError(f"not a feature descriptor: {desc!r}")


def evaluate_feature(desc: FeatureDescriptor, sample: Sequence[float]) -> float:
    sample = np.asarray(sample, dtype=np.float64)
    if sample.ndim != 1:
        raise ValueError("sample must be a 1-d vector")
    _check_dim(desc, sample.shape[0])
    if isinstance(desc, Bias):
        return 1.0
    if isinstance(desc, Monomial):
        value = 1.0
        for k, a in enumerate(desc.exponents):
            if a:
                value *= float(sample[k]) ** a
        return value
    if isinstance(desc, RawPixel):
        return float(sample[desc.index])
    if isinstance(desc, PixelSquare):
        v = float(sample[desc.index])
        return v * v
    return float(sample[desc.i]) * float(sample[desc.j])


def design_matrix(features: Iterable[FeatureDescriptor], data: np.ndarray) -> np.ndarray:
    """Evaluate ``features`` on every row of ``data``; column order follows ``features``."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError("data must be a 2-d array of samples")
    features = list(features)
    n_samples, dim = data.shape
    # column-major so per-feature column writes are contiguous
    out = np.empty((n_samples, len(features)), dtype=np.float64, order="F")
    # pixel features are gathered per kind: (columns, left index, right index or -1)
    gathered: list[tuple[int, int, int]] = []
    for col, desc in enumerate(features):
        _check_dim(desc, dim)
        if isinstance(desc, Bias):
            out[:, col] = 1.0
        elif isinstance(desc, Monomial):
            acc = np.ones(n_samples)
            for k, a in enumerate(desc.exponents):
                if a:
                    acc *= data[:, k] ** a
            out[:, col] = acc
        elif isinstance(desc, RawPixel):
            gathered.append((col, desc.index, -1))
        elif isinstance(desc, PixelSquare):
            gathered.append((col, desc.index, desc.index))
        else:
            gathered.append((col, desc.i, desc.j))
    if gathered:
        cols, left, right = (np.array(v, dtype=np.intp) for v in zip(*gathered))
        single = right < 0
        by_pixel = np.ascontiguousarray(data.T)
        out.T[cols[single]] = by_pixel[left[single]]
        out.T[cols[~single]] = by_pixel[left[~single]] * by_pixel[right[~single]]
    return out


def column_deviation(columns: np.ndarray) -> np.ndarray:
    """Per-column sample standard deviation (divisor N - 1)."""
    columns = np.asarray(columns, dtype=np.float64)
    if columns.ndim != 2 or columns.shape[0] < 2:
        raise ValueError("need a 2-d array with at least 2 samples")
    return np.std(columns, axis=0, ddof=1)


def select_by_deviation(deviations: np.ndarray, coverage: float) -> np.ndarray:
    """Minimal prefix of the deviation-sorted positions covering ``coverage`` of the total.

    Sorting is by deviation descending, ties by ascending position.
    """
    if not 0.0 < coverage <= 1.0:
        raise ValueError(f"coverage must lie in (0, 1], got {coverage}")
    s = np.asarray(deviations, dtype=np.float64)
    order = np.lexsort((np.arange(s.size), -s))
    cumulative = np.cumsum(s[order])
    if s.size == 0 or cumulative[-1] <= 0.0:
        return order[:0]
    # the total is taken from the same summation so coverage=1 is reached exactly
    target = coverage * cumulative[-1]
    k = int(np.searchsorted(cumulative, target, side="left")) + 1
    return order[:k]


def deviation_filter(columns: np.ndarray, coverage: float = 0.99) -> np.ndarray:
    """Keep the highest-deviation columns that together carry ``coverage`` of the deviation mass.

    Returns column positions in deviation-descending order.
    """
    return select_by_deviation(column_deviation(columns), coverage)


def descriptor_deviation(
    features: Sequence[FeatureDescriptor], data: np.ndarray, chunk: int = 4096
) -> np.ndarray:
    """Sample standard deviation of each feature column, evaluated in chunks to bound memory."""
    data = np.asarray(data, dtype=np.float64)
    if data.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    out = np.empty(len(features))
    for start in range(0, len(features), chunk):
        block = design_matrix(features[start : start + chunk], data)
        out[start : start + chunk] = np.std(block, axis=0, ddof=1)
    return out


def filtered_pixel_pool(
    images: np.ndarray, coverage: float = 0.99, derived_coverage: float | None = 0.99
) -> tuple[FeaturePool, np.ndarray]:
    """Two-stage pixel pool built from training images.

    Pixels are first filtered by deviation; the squares and pairs of the
    survivors are then filtered again with ``derived_coverage`` (``None``
    keeps them all). The pool lists surviving raw pixels first, then the
    surviving derived features in :func:`pixel_pool` order.

    Returns the pool and the kept pixel positions (ascending).
    """
    images = np.asarray(images, dtype=np.float64)
    kept = np.sort(deviation_filter(images, coverage))
    full = pixel_pool(kept, base_dim=images.shape[1])
    raw = [d for d in full if isinstance(d, RawPixel)]
    derived = [d for d in full if not isinstance(d, RawPixel)]
    if derived_coverage is not None and derived:
        survivors = select_by_deviation(descriptor_deviation(derived, images), derived_coverage)
        derived = [derived[k] for k in np.sort(survivors)]
    return FeaturePool(tuple(raw + derived), base_dim=images.shape[1]), kept


def pool_size(n: int, d: int) -> int:
    return math.comb(n + d, d)
