"""Independent reference computations used by the tests."""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np


@lru_cache(maxsize=None)
def admissible_paths(n: int, m: int):
    """Every monotone, continuous path from (0, 0) to (n-1, m-1), by recursion."""
    out = []

    def walk(i, j, acc):
        acc = acc + ((i, j),)
        if (i, j) == (n - 1, m - 1):
            out.append(acc)
            return
        for di, dj in ((1, 1), (1, 0), (0, 1)):
            if i + di < n and j + dj < m:
                walk(i + di, j + dj, acc)

    walk(0, 0, ())
    return tuple(out)


def brute_force_dtw(cost: np.ndarray) -> float:
    n, m = cost.shape
    return min(sum(cost[i, j] for i, j in p) for p in admissible_paths(n, m))


def sq_cost(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, float).T).T
    b = np.atleast_2d(np.asarray(b, float).T).T
    out = np.zeros((len(a), len(b)))
    for i in range(len(a)):
        for j in range(len(b)):
            out[i, j] = sum((a[i, k] - b[j, k]) ** 2 for k in range(a.shape[1]))
    return out


def eer_sweep(genuine, forgery, n_grid: int = 20001) -> float:
    """min over a fine threshold grid of max(FAR, FRR); accept when score <= threshold."""
    g = np.asarray(genuine, float)
    f = np.asarray(forgery, float)
    lo, hi = min(g.min(), f.min()) - 1, max(g.max(), f.max()) + 1
    ts = np.concatenate([np.linspace(lo, hi, n_grid), g, f])
    far = (f[None, :] <= ts[:, None]).mean(1)
    frr = (g[None, :] > ts[:, None]).mean(1)
    return float(np.min(np.maximum(far, frr)))


def adam_reference(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar Adam written out step by step; returns the trajectory of (theta, m, v)."""
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        theta = theta - lr * m_hat / (math.sqrt(v_hat) + eps)
        out.append((theta, m, v))
    return out


def central_differences(f, tensors, eps: float = 1e-5):
    """Numerical gradient of scalar ``f()`` w.r.t. every entry of every tensor (perturbed in place)."""
    grads = []
    for t in tensors:
        g = np.zeros(t.numel())
        flat = t.data.view(-1)
        for k in range(flat.numel()):
            orig = flat[k].item()
            flat[k] = orig + eps
            fp = float(f())
            flat[k] = orig - eps
            fm = float(f())
            flat[k] = orig
            g[k] = (fp - fm) / (2 * eps)
        grads.append(g.reshape(tuple(t.shape)))
    return grads
