"""Pair sampling, DTW-guided pre-training, contrastive training and Adam."""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .core import DivergedLoss, InsufficientData, ShapeMismatch, TrainingConfig
from .dtw import dtw_align, local_cost_matrix
from .evaluation import classification_report, verification_report
from .warpnet import (
    UNetParams,
    WarpNetMetric,
    backward,
    forward_pair,
    pretrain_loss,
    training_loss,
)

log = logging.getLogger(__name__)


@dataclass
class PairBatch:
    ia: np.ndarray
    ib: np.ndarray
    z: np.ndarray


class PairSampler:
    """Draws (a, b, z) index pairs from a labelled set.

    With ``match_ratio=None`` both items are drawn uniformly (distinct
    indices), so z follows the label distribution of all pairs. With a ratio
    ``(m, n)`` each batch holds ``floor(batch_size * m / (m + n))`` matching
    pairs and non-matching pairs for the rest. ``matchable`` restricts which
    labels may form matching pairs (e.g. only genuine signatures).
    """

    def __init__(
        self,
        labels: Sequence[str],
        batch_size: int,
        match_ratio: Optional[Tuple[int, int]] = None,
        seed: int = 0,
        matchable: Optional[Callable[[str], bool]] = None,
    ):
        self.labels = list(labels)
        self.batch_size = int(batch_size)
        self.match_ratio = match_ratio
        self.rng = np.random.default_rng(seed)
        self.matchable = matchable or (lambda lab: True)
        if len(self.labels) < 2 or len(set(self.labels)) < 2:
            raise InsufficientData("need at least 2 samples from at least 2 classes")
        self._codes = np.array([sorted(set(self.labels)).index(l) for l in self.labels])
        self._groups = [
            np.flatnonzero(self._codes == c)
            for c in range(self._codes.max() + 1)
        ]
        self._match_groups = [
            g for g in self._groups if len(g) >= 2 and self.matchable(self.labels[g[0]])
        ]
        if match_ratio is not None and match_ratio[0] > 0 and not self._match_groups:
            raise InsufficientData("no class has two samples to form a matching pair")

    def _is_match(self, i: int, j: int) -> int:
        return int(self._codes[i] == self._codes[j] and self.matchable(self.labels[i]))

    def _nonmatching(self) -> Tuple[int, int]:
        n = len(self.labels)
        while True:
            i, j = self.rng.integers(n), self.rng.integers(n)
            if self._codes[i] != self._codes[j]:
                return int(i), int(j)

    def sample_batch(self) -> PairBatch:
        n = len(self.labels)
        ia, ib, z = [], [], []
        if self.match_ratio is None:
            for _ in range(self.batch_size):
                i = int(self.rng.integers(n))
                j = int(self.rng.integers(n - 1))
                j += j >= i
                ia.append(i), ib.append(j), z.append(self._is_match(i, j))
        else:
            m, k = self.match_ratio
            n_match = self.batch_size * m // (m + k)
            for _ in range(n_match):
                g = self._match_groups[self.rng.integers(len(self._match_groups))]
                i, j = self.rng.choice(g, size=2, replace=False)
                ia.append(int(i)), ib.append(int(j)), z.append(1)
            for _ in range(self.batch_size - n_match):
                i, j = self._nonmatching()
                ia.append(i), ib.append(j), z.append(0)
        return PairBatch(np.array(ia), np.array(ib), np.array(z))


class DtwTargetCache:
    """Memoized softmaxed DTW path matrices, keyed by item-index pair.

    Only the path is stored; the target is rebuilt from it, which is
    deterministic and so bit-identical on every hit.
    """

    def __init__(self, X: np.ndarray):
        self.X = np.asarray(X, dtype=np.float64)
        self._paths: Dict[Tuple[int, int], np.ndarray] = {}
        self.hits = 0
        self.misses = 0

    def path(self, i: int, j: int) -> np.ndarray:
        key = (int(i), int(j))
        p = self._paths.get(key)
        if p is None:
            self.misses += 1
            p = np.array(dtw_align(local_cost_matrix(self.X[i], self.X[j])).path, dtype=np.int32)
            self._paths[key] = p
        else:
            self.hits += 1
        return p

    def target(self, i: int, j: int) -> np.ndarray:
        W = self.X.shape[1]
        logits = np.zeros((W, W))
        p = self.path(i, j)
        logits[p[:, 0], p[:, 1]] = 1.0
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def targets(self, ia: Sequence[int], ib: Sequence[int]) -> np.ndarray:
        return np.stack([self.target(i, j) for i, j in zip(ia, ib)])


@dataclass
class TrainState:
    params: UNetParams
    m: "OrderedDict[str, torch.Tensor]" = field(default_factory=OrderedDict)
    v: "OrderedDict[str, torch.Tensor]" = field(default_factory=OrderedDict)
    step: int = 0
    epoch: int = 0
    best_metric: Optional[float] = None
    seed: int = 0
    history: List[dict] = field(default_factory=list)

    def __post_init__(self):
        for name, t in self.params.tensors.items():
            self.m.setdefault(name, torch.zeros_like(t))
            self.v.setdefault(name, torch.zeros_like(t))
        for name, t in self.params.tensors.items():
            if self.m[name].shape != t.shape or self.v[name].shape != t.shape:
                raise ShapeMismatch(0, 0, 0, 0)


def adam_step(
    state: TrainState,
    grads: Dict[str, torch.Tensor],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> TrainState:
    """One bias-corrected Adam update, in place on ``state``."""
    for name, g in grads.items():
        if g.shape != state.params.tensors[name].shape:
            p = state.params.tensors[name]
            raise ShapeMismatch(tuple(g.shape)[0] if g.dim() else 1, tuple(p.shape)[0] if p.dim() else 1, g.dim(), p.dim())
    state.step += 1
    t = state.step
    with torch.no_grad():
        for name, p in state.params.tensors.items():
            g = grads[name].to(p.dtype)
            m, v = state.m[name], state.v[name]
            m.mul_(beta1).add_(g, alpha=1 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
            m_hat = m / (1 - beta1**t)
            v_hat = v / (1 - beta2**t)
            p.sub_(lr * m_hat / (v_hat.sqrt() + eps))
    return state


def _grad_step(state, batch, loss_fn, micro_batch):
    """Mean loss over the batch and its gradients, accumulated over micro-batches in fixed order."""
    params = state.params.requires_grad_(True)
    total = None
    loss_sum = 0.0
    n = len(batch.ia)
    for s in range(0, n, micro_batch):
        sl = slice(s, s + micro_batch)
        loss = loss_fn(sl).sum() / n
        grads = backward(loss, params)
        loss_sum += float(loss.detach())
        if total is None:
            total = grads
        else:
            for k in total:
                total[k] = total[k] + grads[k]
    params.requires_grad_(False)
    if not math.isfinite(loss_sum):
        raise DivergedLoss(f"loss became non-finite at step {state.step}")
    return loss_sum, total


def pretrain(
    state: TrainState,
    X: np.ndarray,
    sampler: PairSampler,
    config: TrainingConfig,
    steps: Optional[int] = None,
    cache: Optional[DtwTargetCache] = None,
    callback: Optional[Callable[[TrainState, float], None]] = None,
) -> TrainState:
    """Fit P_s to softmaxed DTW paths by Adam on the mean squared difference.

    Stops after ``steps`` (default ``config.pretrain_steps``) or when the
    mean loss over the last ``plateau_window`` steps improved by less than
    ``plateau_tol`` relative to the window before it.
    """
    steps = config.pretrain_steps if steps is None else steps
    cache = cache or DtwTargetCache(X)
    dtype = state.params.dtype
    Xt = torch.as_tensor(np.asarray(X), dtype=dtype)
    losses: List[float] = []
    win = config.plateau_window
    for _ in range(steps):
        batch = sampler.sample_batch()
        targets = torch.as_tensor(cache.targets(batch.ia, batch.ib), dtype=dtype)

        def loss_fn(sl):
            a, b = Xt[batch.ia[sl]], Xt[batch.ib[sl]]
            _, ps, _ = forward_pair(a, b, state.params)
            return pretrain_loss(ps, targets[sl])

        loss, grads = _grad_step(state, batch, loss_fn, config.micro_batch)
        adam_step(state, grads, config.pretrain_learning_rate, *config.betas, config.eps)
        losses.append(loss)
        state.history.append({"stage": "pretrain", "step": state.step, "loss": loss})
        if callback is not None:
            callback(state, loss)
        if win and len(losses) >= 2 * win and len(losses) % win == 0:
            prev, last = np.mean(losses[-2 * win : -win]), np.mean(losses[-win:])
            if prev - last < config.plateau_tol * prev:
                log.info("pre-training plateaued at step %d (loss %.4g)", state.step, last)
                break
    return state


def _validation_metric(params: UNetParams, train: Tuple[np.ndarray, List[str]], val: Tuple[np.ndarray, List[str]], config: TrainingConfig) -> float:
    metric = WarpNetMetric(params)
    if config.task == "classify":
        return classification_report(val[0], val[1], train[0], train[1], metric, k=config.knn_k).metrics["accuracy"]
    return verification_report(val[0], val[1], metric, n_refs=config.n_refs).metrics["eer"]


def train_contrastive(
    state: TrainState,
    train: Tuple[np.ndarray, List[str]],
    val: Optional[Tuple[np.ndarray, List[str]]],
    config: TrainingConfig,
    sampler: Optional[PairSampler] = None,
    callback: Optional[Callable[[dict], None]] = None,
) -> TrainState:
    """Minimize the batch-mean symmetric contrastive loss; keep the best-validation parameters.

    Validation is k-NN accuracy (higher is better) for ``task='classify'``
    and pooled EER (lower is better) for ``task='verify'``; ties keep the
    later epoch. Each epoch is ``config.steps_per_epoch`` batches.
    """
    X, labels = train
    if sampler is None:
        matchable = (lambda lab: not lab.endswith(":f")) if config.task == "verify" else None
        sampler = PairSampler(labels, config.batch_size, config.match_ratio, config.seed, matchable)
    dtype = state.params.dtype
    Xt = torch.as_tensor(np.asarray(X), dtype=dtype)
    higher_better = config.task == "classify"
    best_params = state.params.clone()
    epoch_losses = []
    for _ in range(config.max_epochs):
        losses = []
        for _ in range(config.steps_per_epoch):
            batch = sampler.sample_batch()
            z = torch.as_tensor(batch.z, dtype=dtype)

            def loss_fn(sl):
                a, b = Xt[batch.ia[sl]], Xt[batch.ib[sl]]
                _, ps, pt = forward_pair(a, b, state.params)
                return training_loss(a, b, ps, pt, z[sl], config.margin)

            loss, grads = _grad_step(state, batch, loss_fn, config.micro_batch)
            adam_step(state, grads, config.learning_rate, *config.betas, config.eps)
            losses.append(loss)
        state.epoch += 1
        epoch_losses.append(float(np.mean(losses)))
        record = {"stage": "train", "epoch": state.epoch, "step": state.step, "loss": epoch_losses[-1]}
        if val is not None and len(val[0]):
            score = _validation_metric(state.params, train, val, config)
            record["val_metric"] = score
            # ties go to the later epoch: validation sets saturate quickly, and the
            # longer-trained model is never worse on the selection metric
            better = state.best_metric is None or (score >= state.best_metric if higher_better else score <= state.best_metric)
            if better:
                state.best_metric = score
                best_params = state.params.clone()
        else:
            best_params = state.params.clone()
        state.history.append(record)
        log.info("epoch %d: loss %.4g val %s", state.epoch, record["loss"], record.get("val_metric"))
        if callback is not None:
            callback(record)
    if len(epoch_losses) >= 2 and epoch_losses[-1] >= epoch_losses[0]:
        log.warning("contrastive loss did not decrease (%.4g -> %.4g); consider DTW-guided pre-training",
                    epoch_losses[0], epoch_losses[-1])
    state.params = best_params
    return state
