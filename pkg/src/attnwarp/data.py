"""Synthetic datasets, resampling, normalization and dataset file I/O."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .core import (
    EmptyTrainSplit,
    InconsistentShapes,
    InvalidConfig,
    LabeledSeries,
    ParseError,
    TimeSeries,
    TooShort,
)


@dataclass
class SynthConfig:
    n_classes: int = 3
    samples_per_class: int = 40
    W: int = 32
    K: int = 2
    warp_strength: float = 0.3
    noise_std: float = 0.05
    reorder_fraction: float = 0.0
    seed: int = 0
    val_per_class: int = 5
    test_per_class: int = 10
    class_similarity: float = 0.0
    divisor: int = 1

    def validate(self) -> None:
        for name in ("n_classes", "samples_per_class", "W", "K", "divisor"):
            if int(getattr(self, name)) != getattr(self, name) or getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be a positive integer")
        if self.W < 2:
            raise InvalidConfig("W must be at least 2")
        if self.W % self.divisor:
            raise InvalidConfig(f"W={self.W} must be divisible by {self.divisor}")
        if not 0 <= self.warp_strength <= 1:
            raise InvalidConfig("warp_strength must lie in [0, 1]")
        if not 0 <= self.reorder_fraction <= 1:
            raise InvalidConfig("reorder_fraction must lie in [0, 1]")
        if self.noise_std < 0:
            raise InvalidConfig("noise_std must be >= 0")
        if not 0 <= self.class_similarity < 1:
            raise InvalidConfig("class_similarity must lie in [0, 1)")
        if self.val_per_class < 0 or self.test_per_class < 0:
            raise InvalidConfig("split sizes must be >= 0")
        if self.val_per_class + self.test_per_class >= self.samples_per_class:
            raise InvalidConfig("samples_per_class must exceed val_per_class + test_per_class")


@dataclass
class VerifConfig:
    """Synthetic signature-verification data: subjects with genuine samples and skilled forgeries."""

    n_subjects: int = 10
    genuine_per_subject: int = 10
    forgeries_per_subject: int = 10
    W: int = 64
    K: int = 4
    warp_strength: float = 0.3
    noise_std: float = 0.05
    forgery_strength: float = 0.5
    train_fraction: float = 0.6
    val_fraction: float = 0.25
    seed: int = 0
    divisor: int = 1

    def validate(self) -> None:
        for name in ("n_subjects", "genuine_per_subject", "forgeries_per_subject", "W", "K", "divisor"):
            if int(getattr(self, name)) != getattr(self, name) or getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be a positive integer")
        if self.W % self.divisor:
            raise InvalidConfig(f"W={self.W} must be divisible by {self.divisor}")
        if self.n_subjects < 3:
            raise InvalidConfig("n_subjects must be at least 3 (train, val and test subjects)")
        if not 0 < self.train_fraction < 1:
            raise InvalidConfig("train_fraction must lie in (0, 1)")
        if not 0 <= self.val_fraction < 1:
            raise InvalidConfig("val_fraction must lie in [0, 1)")


@dataclass(eq=False)
class Dataset:
    items: List[LabeledSeries]
    splits: Dict[str, List[int]] = field(default_factory=dict)
    metadata: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.items:
            shape = self.items[0].series.values.shape
            for it in self.items:
                if it.series.values.shape != shape:
                    raise InconsistentShapes(f"item shapes differ: {shape} vs {it.series.values.shape}")
        seen = set()
        for name, idx in self.splits.items():
            s = set(idx)
            if s & seen:
                raise InconsistentShapes(f"split {name!r} overlaps another split")
            if any(i < 0 or i >= len(self.items) for i in idx):
                raise InconsistentShapes(f"split {name!r} has out-of-range indices")
            seen |= s
        self.splits = {k: [int(i) for i in v] for k, v in self.splits.items()}

    @property
    def W(self) -> int:
        return self.items[0].series.W

    @property
    def K(self) -> int:
        return self.items[0].series.K

    def __len__(self) -> int:
        return len(self.items)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            len(self.items) == len(other.items)
            and all(a.label == b.label and a.series == b.series for a, b in zip(self.items, other.items))
            and self.splits == other.splits
            and self.metadata == other.metadata
        )

    def indices(self, split: Optional[str] = None) -> List[int]:
        if split is None:
            return list(range(len(self.items)))
        return list(self.splits.get(split, []))

    def arrays(self, split: Optional[str] = None) -> Tuple[np.ndarray, List[str]]:
        idx = self.indices(split)
        if not idx:
            return np.zeros((0, self.W, self.K)), []
        X = np.stack([self.items[i].series.values for i in idx])
        return X, [self.items[i].label for i in idx]


# --- generation -----------------------------------------------------------


def _prototype(rng: np.random.Generator, K: int):
    """Random smooth K-dim curve on [0, 1]: per dimension a sum of 2-4 sinusoids."""
    comps = []
    for _ in range(K):
        n = int(rng.integers(2, 5))
        comps.append(
            (
                rng.uniform(0.5, 1.5, n),  # amplitude
                rng.uniform(0.5, 3.0, n),  # cycles over [0, 1]
                rng.uniform(0.0, 2 * np.pi, n),  # phase
            )
        )

    def f(t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        cols = [
            (amp[:, None] * np.sin(2 * np.pi * freq[:, None] * t[None, :] + ph[:, None])).sum(0)
            for amp, freq, ph in comps
        ]
        return np.stack(cols, axis=1)

    return f


def _blend(shared, own, similarity: float):
    """Class prototype sharing a common curve: similar classes differ only by ``own``."""

    def f(t):
        return similarity * shared(t) + (1.0 - similarity) * own(t)

    return f


def monotone_warp(rng: np.random.Generator, strength: float, n_knots: int = 8):
    """Strictly increasing bijection of [0, 1]: identity blended with a random piecewise-linear ramp."""
    inc = rng.dirichlet(np.full(n_knots, 2.0))
    knots_y = np.concatenate([[0.0], np.cumsum(inc)])
    knots_y[-1] = 1.0
    knots_x = np.linspace(0.0, 1.0, n_knots + 1)

    def g(t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        return (1.0 - strength) * t + strength * np.interp(t, knots_x, knots_y)

    return g


def reorder_segments(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Cut ``x`` into 2-3 contiguous segments and concatenate them in a different order."""
    W = len(x)
    n_seg = int(rng.integers(2, 4)) if W >= 6 else 2
    if W < 2 * n_seg:
        return x.copy()
    min_len = max(1, W // (3 * n_seg))
    while True:
        cuts = np.sort(rng.choice(np.arange(min_len, W - min_len + 1), size=n_seg - 1, replace=False))
        bounds = np.concatenate([[0], cuts, [W]])
        if np.all(np.diff(bounds) >= min_len):
            break
    segs = [x[bounds[s] : bounds[s + 1]] for s in range(n_seg)]
    order = np.arange(n_seg)
    while np.array_equal(order, np.arange(n_seg)):
        order = rng.permutation(n_seg)
    return np.concatenate([segs[o] for o in order], axis=0)


def _distort(proto, grid, rng, warp_strength, noise_std):
    g = monotone_warp(rng, warp_strength)
    x = proto(g(grid))
    if noise_std > 0:
        x = x + rng.normal(0.0, noise_std, x.shape)
    return x


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    """Labelled classification set of warped, noisy, optionally segment-reordered class prototypes."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    grid = np.linspace(0.0, 1.0, cfg.W)
    protos = [_prototype(rng, cfg.K) for _ in range(cfg.n_classes)]
    if cfg.class_similarity > 0:
        protos = [_blend(_prototype(rng, cfg.K), own, cfg.class_similarity) for own in protos]
    n_reorder = int(round(cfg.reorder_fraction * cfg.samples_per_class))
    items: List[LabeledSeries] = []
    splits: Dict[str, List[int]] = {"train": [], "val": [], "test": []}
    for c, proto in enumerate(protos):
        reordered = set(rng.permutation(cfg.samples_per_class)[:n_reorder].tolist())
        split_order = rng.permutation(cfg.samples_per_class)
        for s in range(cfg.samples_per_class):
            g = monotone_warp(rng, cfg.warp_strength)
            x = proto(g(grid))
            if s in reordered:
                x = reorder_segments(x, rng)
            if cfg.noise_std > 0:
                x = x + rng.normal(0.0, cfg.noise_std, x.shape)
            pos = int(np.where(split_order == s)[0][0])
            if pos < cfg.val_per_class:
                splits["val"].append(len(items))
            elif pos < cfg.val_per_class + cfg.test_per_class:
                splits["test"].append(len(items))
            else:
                splits["train"].append(len(items))
            items.append(LabeledSeries(TimeSeries(x), f"c{c}"))
    meta = {"W": cfg.W, "K": cfg.K, "generator": "synthetic-classify", "config": _cfg_dict(cfg)}
    return Dataset(items, splits, meta)


def generate_verification(cfg: VerifConfig) -> Dataset:
    """Subjects with genuine samples (``s###:g``) and skilled forgeries (``s###:f``).

    A forgery follows the subject's prototype with an extra smooth deviation
    of relative size ``forgery_strength`` plus a stronger time warp. The
    first ``train_fraction`` of subjects are split into train and val
    subjects; the rest are test subjects.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    grid = np.linspace(0.0, 1.0, cfg.W)
    items: List[LabeledSeries] = []
    subj_items: List[List[int]] = []
    for s in range(cfg.n_subjects):
        proto = _prototype(rng, cfg.K)
        deviation = _prototype(rng, cfg.K)
        idx = []
        for _ in range(cfg.genuine_per_subject):
            idx.append(len(items))
            items.append(LabeledSeries(TimeSeries(_distort(proto, grid, rng, cfg.warp_strength, cfg.noise_std)), f"s{s:03d}:g"))

        def forged(t, proto=proto, deviation=deviation):
            return proto(t) + cfg.forgery_strength * deviation(t)

        for _ in range(cfg.forgeries_per_subject):
            strength = min(1.0, 1.5 * cfg.warp_strength)
            idx.append(len(items))
            items.append(LabeledSeries(TimeSeries(_distort(forged, grid, rng, strength, cfg.noise_std)), f"s{s:03d}:f"))
        subj_items.append(idx)
    n_train = min(cfg.n_subjects - 1, max(2, int(math.floor(cfg.train_fraction * cfg.n_subjects))))
    n_val = min(n_train - 1, max(1, int(round(cfg.val_fraction * n_train)))) if cfg.val_fraction > 0 else 0
    splits = {
        "train": [i for s in range(n_train - n_val) for i in subj_items[s]],
        "val": [i for s in range(n_train - n_val, n_train) for i in subj_items[s]],
        "test": [i for s in range(n_train, cfg.n_subjects) for i in subj_items[s]],
    }
    meta = {"W": cfg.W, "K": cfg.K, "generator": "synthetic-verify", "config": _cfg_dict(cfg)}
    return Dataset(items, splits, meta)


def _cfg_dict(cfg) -> dict:
    return {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}


# --- resampling and normalization -------------------------------------------


def resample(x, W: int) -> TimeSeries:
    """Linear interpolation of every dimension onto ``W`` evenly spaced positions."""
    x = np.asarray(x.values if isinstance(x, TimeSeries) else x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if n < 2:
        raise TooShort(f"need at least 2 points to resample, got {n}")
    if W < 2:
        raise InvalidConfig("target length must be at least 2")
    src = np.arange(n, dtype=np.float64)
    dst = np.linspace(0.0, n - 1, W)
    out = np.stack([np.interp(dst, src, x[:, k]) for k in range(x.shape[1])], axis=1)
    out[0], out[-1] = x[0], x[-1]
    return TimeSeries(out)


def normalize(dataset: Dataset, mode: str = "zscore") -> Dataset:
    """Per-dimension z-score with train-split statistics, applied to every item."""
    if mode == "none":
        return dataset
    if mode != "zscore":
        raise InvalidConfig(f"unknown normalization mode {mode!r}")
    train = dataset.indices("train")
    if not train:
        raise EmptyTrainSplit("z-score normalization needs a non-empty train split")
    X = np.stack([dataset.items[i].series.values for i in train])
    mean = X.mean(axis=(0, 1))
    std = X.std(axis=(0, 1))
    std = np.where(std > 0, std, 1.0)
    items = [LabeledSeries(TimeSeries((it.series.values - mean) / std), it.label) for it in dataset.items]
    meta = dict(dataset.metadata)
    meta["normalization"] = {"mode": "zscore", "mean": mean.tolist(), "std": std.tolist()}
    return Dataset(items, {k: list(v) for k, v in dataset.splits.items()}, meta)


# --- file formats -----------------------------------------------------------
#
# Header line ``W=<int> K=<int>``, then one record per item:
# ``label,<W*K values in row-major order>``. Lines starting with ``#`` carry
# optional JSON for splits and metadata.


def save_dataset(dataset: Dataset, path: Union[str, Path]) -> None:
    lines = [f"W={dataset.W} K={dataset.K}"]
    if dataset.splits:
        lines.append("#splits " + json.dumps(dataset.splits, sort_keys=True))
    if dataset.metadata:
        lines.append("#meta " + json.dumps(dataset.metadata, sort_keys=True))
    for it in dataset.items:
        if "," in it.label or "\n" in it.label:
            raise InvalidConfig(f"label {it.label!r} may not contain commas or newlines")
        lines.append(it.label + "," + ",".join(repr(float(v)) for v in it.series.values.ravel()))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path: Union[str, Path]) -> Dataset:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or not lines[0].strip():
        raise ParseError(1, "empty file or missing header")
    try:
        fields = dict(tok.split("=", 1) for tok in lines[0].split())
        W, K = int(fields["W"]), int(fields["K"])
    except (ValueError, KeyError):
        raise ParseError(1, f"bad header {lines[0]!r}; expected 'W=<int> K=<int>'")
    if W < 1 or K < 1:
        raise ParseError(1, "W and K must be positive")
    items: List[LabeledSeries] = []
    splits: Dict[str, List[int]] = {}
    meta: Dict[str, object] = {}
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line.startswith("#"):
            try:
                if line.startswith("#splits "):
                    splits = json.loads(line[len("#splits ") :])
                elif line.startswith("#meta "):
                    meta = json.loads(line[len("#meta ") :])
            except json.JSONDecodeError as exc:
                raise ParseError(n, f"bad JSON: {exc}")
            continue
        label, _, rest = line.partition(",")
        if not label:
            raise ParseError(n, "missing label")
        parts = rest.split(",") if rest else []
        if len(parts) != W * K:
            raise ParseError(n, f"expected {W * K} values, got {len(parts)}")
        try:
            vals = np.array([float(p) for p in parts])
        except ValueError as exc:
            raise ParseError(n, str(exc))
        if not np.all(np.isfinite(vals)):
            raise ParseError(n, "non-finite value")
        items.append(LabeledSeries(TimeSeries(vals.reshape(W, K)), label))
    if not items:
        raise ParseError(len(lines), "no records")
    return Dataset(items, splits, meta)


def load_point_file(path: Union[str, Path], W: int, include_pen: bool = False) -> TimeSeries:
    """Read an ``x y pen-state`` handwriting trace (whitespace or comma separated) resampled to ``W``."""
    rows = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 3:
            raise ParseError(n, f"expected 3 columns (x, y, pen-state), got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise ParseError(n, str(exc))
    pts = np.array(rows, dtype=np.float64).reshape(-1, 3)
    return resample(pts if include_pen else pts[:, :2], W)
