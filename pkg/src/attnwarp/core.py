"""Domain types shared across the package."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np


class WarpError(ValueError):
    """Base class for all errors raised by this package."""


class ShapeMismatch(WarpError):
    def __init__(self, w_a: int, w_b: int, k_a: int, k_b: int):
        super().__init__(f"shape mismatch: (W={w_a}, K={k_a}) vs (W={w_b}, K={k_b})")
        self.w_a, self.w_b, self.k_a, self.k_b = w_a, w_b, k_a, k_b


class NonFiniteInput(WarpError):
    pass


class InvalidPath(WarpError):
    pass


class NotNormalized(WarpError):
    pass


class ArchitectureMismatch(WarpError):
    pass


class NonFiniteActivation(WarpError):
    pass


class GraphNotRecorded(WarpError):
    pass


class InsufficientData(WarpError):
    pass


class DivergedLoss(WarpError):
    pass


class InvalidConfig(WarpError):
    pass


class EmptyTrainingSet(WarpError):
    pass


class NoReferences(WarpError):
    pass


class EmptyScoreList(WarpError):
    pass


class TooShort(WarpError):
    pass


class EmptyTrainSplit(WarpError):
    pass


class InconsistentShapes(WarpError):
    pass


class ParseError(WarpError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


def _frozen_array(values, ndim: int) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != ndim:
        raise InconsistentShapes(f"expected a {ndim}-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInput("array contains NaN or Inf")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TimeSeries:
    """A length-W sequence of K-dimensional real vectors (row i = time step i)."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[:, None]
        arr = _frozen_array(arr, 2)
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise InconsistentShapes(f"empty series of shape {arr.shape}")
        object.__setattr__(self, "values", arr)

    @property
    def W(self) -> int:
        return self.values.shape[0]

    @property
    def K(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other):
        if not isinstance(other, TimeSeries):
            return NotImplemented
        return np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash((self.values.shape, self.values.tobytes()))


SeriesLike = Union[TimeSeries, np.ndarray]


def as_series(x: SeriesLike) -> TimeSeries:
    return x if isinstance(x, TimeSeries) else TimeSeries(x)


@dataclass(frozen=True)
class LabeledSeries:
    series: TimeSeries
    label: str

    def __post_init__(self):
        if not isinstance(self.series, TimeSeries):
            object.__setattr__(self, "series", TimeSeries(self.series))
        label = str(self.label)
        if not label:
            raise InvalidConfig("label must be non-empty")
        object.__setattr__(self, "label", label)


def validate_pair(a: SeriesLike, b: SeriesLike) -> bool:
    """Check that two series can be compared by the model.

    Returns True when the shapes agree and every entry is finite; raises
    ShapeMismatch or NonFiniteInput otherwise.
    """
    va = np.asarray(a.values if isinstance(a, TimeSeries) else a, dtype=np.float64)
    vb = np.asarray(b.values if isinstance(b, TimeSeries) else b, dtype=np.float64)
    if va.ndim == 1:
        va = va[:, None]
    if vb.ndim == 1:
        vb = vb[:, None]
    if va.shape != vb.shape:
        raise ShapeMismatch(va.shape[0], vb.shape[0], va.shape[-1], vb.shape[-1])
    if not (np.all(np.isfinite(va)) and np.all(np.isfinite(vb))):
        raise NonFiniteInput("pair contains NaN or Inf")
    return True


@dataclass(frozen=True)
class Pair:
    a: TimeSeries
    b: TimeSeries
    z: int

    def __post_init__(self):
        object.__setattr__(self, "a", as_series(self.a))
        object.__setattr__(self, "b", as_series(self.b))
        validate_pair(self.a, self.b)
        if self.z not in (0, 1):
            raise InvalidConfig(f"z must be 0 or 1, got {self.z!r}")


@dataclass(frozen=True, eq=False)
class WarpingMatrix:
    """W x W alignment matrix; row-stochastic when ``normalized`` is set."""

    entries: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        arr = _frozen_array(self.entries, 2)
        if arr.shape[0] != arr.shape[1]:
            raise InconsistentShapes(f"warping matrix must be square, got {arr.shape}")
        if self.normalized:
            # closed interval: exp underflow can produce exact zeros
            if np.any(arr < 0) or np.any(arr > 1):
                raise NotNormalized("normalized entries must lie in [0, 1]")
            if np.max(np.abs(arr.sum(axis=1) - 1.0)) > 1e-6:
                raise NotNormalized("rows do not sum to 1")
        object.__setattr__(self, "entries", arr)

    @property
    def W(self) -> int:
        return self.entries.shape[0]


@dataclass
class TrainingConfig:
    """Hyperparameters for both training stages.

    Defaults follow the handwriting-classification setting: margin 1,
    learning rate 1e-4, batch size 512, at most 20 epochs, Adam with its
    canonical constants. ``match_ratio=None`` draws pairs uniformly from all
    pairs of training items; ``(1, 2)`` fixes one matching pair per two
    non-matching ones.
    """

    margin: float = 1.0
    learning_rate: float = 1e-4
    batch_size: int = 512
    max_epochs: int = 20
    match_ratio: Optional[Tuple[int, int]] = None
    seed: int = 0
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    steps_per_epoch: int = 50
    pretrain_steps: int = 2000
    pretrain_learning_rate: float = 1e-3
    plateau_window: int = 200
    plateau_tol: float = 0.01
    micro_batch: int = 64
    knn_k: int = 3
    task: str = "classify"
    n_refs: int = 5
    dtype: str = "float32"

    def __post_init__(self):
        if not self.margin > 0:
            raise InvalidConfig("margin must be > 0")
        if not self.learning_rate > 0 or not self.pretrain_learning_rate > 0:
            raise InvalidConfig("learning rate must be > 0")
        for name in ("batch_size", "steps_per_epoch", "micro_batch", "knn_k", "n_refs"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise InvalidConfig(f"{name} must be a positive integer")
        if self.max_epochs < 0 or self.pretrain_steps < 0:
            raise InvalidConfig("max_epochs and pretrain_steps must be >= 0")
        if self.match_ratio is not None:
            m, n = self.match_ratio
            if m < 0 or n <= 0:
                raise InvalidConfig("match_ratio denominator must be > 0")
            self.match_ratio = (int(m), int(n))
        if self.task not in ("classify", "verify"):
            raise InvalidConfig(f"unknown task {self.task!r}")
        if self.dtype not in ("float32", "float64"):
            raise InvalidConfig(f"unsupported dtype {self.dtype!r}")
