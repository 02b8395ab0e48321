"""Classic dynamic time warping and the softmaxed path targets used for pre-training."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .core import InvalidPath, NonFiniteInput, SeriesLike, TimeSeries, WarpingMatrix, validate_pair


@dataclass(frozen=True)
class DtwResult:
    distance: float
    path: List[Tuple[int, int]]
    path_matrix: np.ndarray


def _values(x: SeriesLike) -> np.ndarray:
    v = x.values if isinstance(x, TimeSeries) else np.asarray(x, dtype=np.float64)
    return v[:, None] if v.ndim == 1 else v


def local_cost_matrix(a: SeriesLike, b: SeriesLike) -> np.ndarray:
    """Squared Euclidean distance between every a_i and b_j."""
    validate_pair(a, b)
    va, vb = _values(a), _values(b)
    diff = va[:, None, :] - vb[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def dtw_align(cost: np.ndarray) -> DtwResult:
    """Optimal monotone, continuous, boundary-anchored alignment over ``cost``.

    Backtracking prefers the diagonal step, then the vertical one (i-1),
    then the horizontal one (j-1), which makes the returned path
    deterministic when several optimal paths exist.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise NonFiniteInput(f"cost must be a 2-d matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise NonFiniteInput("cost matrix contains NaN or Inf")
    if np.any(cost < 0):
        raise NonFiniteInput("cost matrix contains negative entries")
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    c = cost.tolist()
    rows = acc.tolist()
    for i in range(1, n + 1):
        prev, cur, ci = rows[i - 1], rows[i], c[i - 1]
        for j in range(1, m + 1):
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            cur[j] = ci[j - 1] + best
    acc = np.array(rows)

    i, j = n, m
    path = [(n - 1, m - 1)]
    while (i, j) != (1, 1):
        diag, up, left = acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1]
        if diag <= up and diag <= left:
            i, j = i - 1, j - 1
        elif up <= left:
            i -= 1
        else:
            j -= 1
        path.append((i - 1, j - 1))
    path.reverse()

    pm = np.zeros((n, m))
    for p, q in path:
        pm[p, q] = 1.0
    # re-sum along the path so the reported distance is exactly the path cost
    distance = float(sum(cost[p, q] for p, q in path))
    return DtwResult(distance=distance, path=path, path_matrix=pm)


def check_path(path: Sequence[Tuple[int, int]], W: int) -> None:
    if len(path) == 0:
        raise InvalidPath("empty path")
    if tuple(path[0]) != (0, 0) or tuple(path[-1]) != (W - 1, W - 1):
        raise InvalidPath("path must start at (0, 0) and end at (W-1, W-1)")
    for (i0, j0), (i1, j1) in zip(path, path[1:]):
        if (i1 - i0, j1 - j0) not in ((1, 0), (0, 1), (1, 1)):
            raise InvalidPath(f"illegal step ({i0},{j0}) -> ({i1},{j1})")


def path_to_matrix(path: Sequence[Tuple[int, int]], W: int) -> np.ndarray:
    check_path(path, W)
    out = np.zeros((W, W))
    for i, j in path:
        out[i, j] = 1.0
    return out


def softmax_rows(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    e = np.exp(m - m.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def dtw_target(a: SeriesLike, b: SeriesLike) -> WarpingMatrix:
    """Row-softmaxed binary DTW path matrix (temperature 1)."""
    res = dtw_align(local_cost_matrix(a, b))
    W = res.path_matrix.shape[0]
    return WarpingMatrix(softmax_rows(path_to_matrix(res.path, W)), normalized=True)


def dtw_distance(a: SeriesLike, b: SeriesLike) -> float:
    return dtw_align(local_cost_matrix(a, b)).distance


def dtw_metric(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Batched DTW distance over paired rows of (N, W, K) arrays."""
    return np.array([dtw_distance(a, b) for a, b in zip(A, B)])
