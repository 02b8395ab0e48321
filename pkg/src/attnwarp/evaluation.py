"""k-NN classification, verification EER, and histogram/report export."""

from __future__ import annotations

import configparser
import csv
import io
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .core import EmptyScoreList, EmptyTrainingSet, InvalidConfig, NoReferences, ParseError

Metric = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class DistanceTable:
    values: np.ndarray
    query_ids: List[int]
    reference_ids: List[int]
    metadata: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.values.shape != (len(self.query_ids), len(self.reference_ids)):
            raise InvalidConfig("distance table shape does not match its id lists")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise InvalidConfig("distances must be finite and nonnegative")


def distance_table(
    queries: np.ndarray,
    references: np.ndarray,
    metric: Metric,
    query_ids: Optional[Sequence[int]] = None,
    reference_ids: Optional[Sequence[int]] = None,
    metadata: Optional[Dict[str, str]] = None,
) -> DistanceTable:
    """All query x reference distances, computed row-major in one flat batch."""
    queries, references = np.asarray(queries), np.asarray(references)
    nq, nr = len(queries), len(references)
    A = np.repeat(queries, nr, axis=0)
    B = np.tile(references, (nq, 1, 1))
    d = np.asarray(metric(A, B), dtype=np.float64).reshape(nq, nr) if nq and nr else np.zeros((nq, nr))
    # tiny negative values can only come from round-off
    d = np.maximum(d, 0.0)
    return DistanceTable(
        d,
        list(query_ids) if query_ids is not None else list(range(nq)),
        list(reference_ids) if reference_ids is not None else list(range(nr)),
        dict(metadata or {}),
    )


def knn_vote(distances: Sequence[float], labels: Sequence[str], k: int) -> str:
    """Majority label among the k nearest; ties go to the smallest mean distance, then label order."""
    distances = np.asarray(distances, dtype=np.float64)
    if len(distances) == 0:
        raise EmptyTrainingSet("no training items to vote")
    if not 1 <= k <= len(distances):
        raise InvalidConfig(f"k must lie in [1, {len(distances)}], got {k}")
    nearest = np.argsort(distances, kind="stable")[:k]
    votes: Dict[str, List[float]] = defaultdict(list)
    for i in nearest:
        votes[labels[i]].append(distances[i])
    top = max(len(v) for v in votes.values())
    tied = [lab for lab, v in votes.items() if len(v) == top]
    return min(tied, key=lambda lab: (float(np.mean(votes[lab])), lab))


def knn_classify(query: np.ndarray, train_X: np.ndarray, train_labels: Sequence[str], metric: Metric, k: int = 3) -> str:
    if len(train_X) == 0:
        raise EmptyTrainingSet("training set is empty")
    query = np.asarray(query)
    d = metric(np.repeat(query[None], len(train_X), axis=0), np.asarray(train_X))
    return knn_vote(d, train_labels, k)


@dataclass
class Histogram:
    edges: np.ndarray
    matching: np.ndarray
    nonmatching: np.ndarray
    matching_counts: np.ndarray
    nonmatching_counts: np.ndarray

    @property
    def overlap(self) -> float:
        return float(np.minimum(self.matching, self.nonmatching).sum())

    def to_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_left", "bin_right", "matching_density", "nonmatching_density"])
            for i in range(len(self.matching)):
                w.writerow([repr(float(self.edges[i])), repr(float(self.edges[i + 1])),
                            repr(float(self.matching[i])), repr(float(self.nonmatching[i]))])


def export_histograms(matching: Sequence[float], nonmatching: Sequence[float], bins: int = 20) -> Histogram:
    """Shared-edge histograms of both groups, each normalized to sum to one."""
    m = np.asarray(matching, dtype=np.float64)
    n = np.asarray(nonmatching, dtype=np.float64)
    if m.size == 0 or n.size == 0:
        raise EmptyScoreList("both distance groups must be non-empty")
    if bins < 1:
        raise InvalidConfig("bins must be >= 1")
    lo, hi = min(m.min(), n.min()), max(m.max(), n.max())
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    mc, _ = np.histogram(m, edges)
    nc, _ = np.histogram(n, edges)
    return Histogram(edges, mc / m.size, nc / n.size, mc, nc)


def compute_eer(genuine: Sequence[float], forgery: Sequence[float]) -> Tuple[float, float]:
    """Equal error rate for distance scores (accept when score <= threshold).

    Thresholds sweep the pooled sorted scores (plus one point below the
    minimum, where FRR = 1 and FAR = 0). Between the last threshold with
    FAR < FRR and the first with FAR >= FRR both rates are interpolated
    linearly and the crossing point is returned with its threshold.
    """
    g = np.asarray(genuine, dtype=np.float64)
    f = np.asarray(forgery, dtype=np.float64)
    if g.size == 0 or f.size == 0:
        raise EmptyScoreList("genuine and forgery score lists must be non-empty")
    scores = np.unique(np.concatenate([g, f]))
    thresholds = np.concatenate([[scores[0] - 1.0], scores])
    gs, fs = np.sort(g), np.sort(f)
    frr = 1.0 - np.searchsorted(gs, thresholds, side="right") / g.size
    far = np.searchsorted(fs, thresholds, side="right") / f.size
    diff = far - frr
    k = int(np.argmax(diff >= 0))  # diff[-1] = 1 so a crossing always exists
    if diff[k] == 0 or k == 0:
        return float(frr[k]), float(thresholds[k])
    alpha = -diff[k - 1] / (diff[k] - diff[k - 1])
    eer = frr[k - 1] + alpha * (frr[k] - frr[k - 1])
    thr = thresholds[k - 1] + alpha * (thresholds[k] - thresholds[k - 1])
    return float(eer), float(thr)


def subject_distance(test: np.ndarray, references: Sequence[np.ndarray], metric: Metric) -> float:
    """Mean distance from a probe to the claimed subject's reference samples."""
    if len(references) == 0:
        raise NoReferences("at least one reference is required")
    refs = np.asarray(references)
    d = metric(np.repeat(np.asarray(test)[None], len(refs), axis=0), refs)
    return float(np.mean(d))


@dataclass
class EvalReport:
    task: str
    metrics: Dict[str, float] = field(default_factory=dict)
    confusion: Dict[str, int] = field(default_factory=dict)
    histogram: Optional[Histogram] = None
    info: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for key in ("accuracy", "eer"):
            if key in self.metrics and not 0.0 <= self.metrics[key] <= 1.0:
                raise InvalidConfig(f"{key} must lie in [0, 1]")

    def to_text(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp["report"] = {"task": self.task, **{k: str(v) for k, v in sorted(self.info.items())}}
        cp["metrics"] = {k: repr(float(v)) for k, v in sorted(self.metrics.items())}
        cp["confusion"] = {k: str(int(v)) for k, v in sorted(self.confusion.items())}
        if self.histogram is not None:
            h = self.histogram
            cp["histogram"] = {
                "bins": str(len(h.matching)),
                "matching_pairs": str(int(h.matching_counts.sum())),
                "nonmatching_pairs": str(int(h.nonmatching_counts.sum())),
                "overlap": repr(h.overlap),
            }
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def write(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def read_report(path_or_text: Union[str, Path]) -> dict:
    """Parse a report file back into plain dicts (``metrics`` as floats, ``confusion`` as ints)."""
    text = str(path_or_text)
    if not text.lstrip().startswith("["):
        text = Path(path_or_text).read_text(encoding="utf-8")
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ParseError(0, str(exc))
    out = {"report": dict(cp["report"]) if cp.has_section("report") else {}}
    out["metrics"] = {k: float(v) for k, v in cp["metrics"].items()} if cp.has_section("metrics") else {}
    out["confusion"] = {k: int(v) for k, v in cp["confusion"].items()} if cp.has_section("confusion") else {}
    if cp.has_section("histogram"):
        h = cp["histogram"]
        out["histogram"] = {
            "bins": int(h["bins"]),
            "matching_pairs": int(h["matching_pairs"]),
            "nonmatching_pairs": int(h["nonmatching_pairs"]),
            "overlap": float(h["overlap"]),
        }
    return out


def classification_report(
    test_X: np.ndarray,
    test_labels: Sequence[str],
    train_X: np.ndarray,
    train_labels: Sequence[str],
    metric: Metric,
    k: int = 3,
    bins: int = 20,
    table: Optional[DistanceTable] = None,
) -> EvalReport:
    """k-NN accuracy, ordered confusion counts ``true->predicted`` and test/train distance histograms."""
    if len(train_X) == 0:
        raise EmptyTrainingSet("training set is empty")
    if table is None:
        table = distance_table(test_X, train_X, metric)
    correct = 0
    confusion: Counter = Counter()
    for q, true in enumerate(test_labels):
        pred = knn_vote(table.values[q], train_labels, k)
        if pred == true:
            correct += 1
        else:
            confusion[f"{true}->{pred}"] += 1
    same = np.array([[t == r for r in train_labels] for t in test_labels], dtype=bool)
    hist = export_histograms(table.values[same], table.values[~same], bins) if same.any() and (~same).any() else None
    n = len(test_labels)
    return EvalReport(
        "classify",
        {"accuracy": correct / n if n else 0.0, "n_test": float(n), "k": float(k)},
        dict(confusion),
        hist,
    )


def split_label(label: str) -> Tuple[str, str]:
    """``'s003:g'`` -> ``('s003', 'g')``; labels without a kind are genuine."""
    subject, _, kind = label.partition(":")
    return subject, (kind or "g")


def verification_scores(
    X: np.ndarray, labels: Sequence[str], metric: Metric, n_refs: int = 5
) -> Tuple[np.ndarray, np.ndarray]:
    """Pooled probe scores for every subject present in ``labels``.

    Per subject the first ``n_refs`` genuine samples are references; each
    remaining genuine sample and every forgery is scored by its mean
    distance to those references.
    """
    if n_refs < 1:
        raise NoReferences("n_refs must be >= 1")
    by_subject: Dict[str, Dict[str, List[int]]] = defaultdict(lambda: {"g": [], "f": []})
    for i, lab in enumerate(labels):
        subj, kind = split_label(lab)
        by_subject[subj]["f" if kind == "f" else "g"].append(i)
    A, B, owner, kinds = [], [], [], []
    probe = 0
    for subj in sorted(by_subject):
        gen, forg = by_subject[subj]["g"], by_subject[subj]["f"]
        refs = gen[:n_refs]
        if len(refs) == 0:
            raise NoReferences(f"subject {subj} has no genuine references")
        for i, kind in [(i, "g") for i in gen[n_refs:]] + [(i, "f") for i in forg]:
            for r in refs:
                A.append(X[i])
                B.append(X[r])
                owner.append(probe)
            kinds.append(kind)
            probe += 1
    if probe == 0:
        raise EmptyScoreList("no probes: every subject needs more than n_refs genuine samples or some forgeries")
    d = np.asarray(metric(np.stack(A), np.stack(B)), dtype=np.float64)
    owner = np.asarray(owner)
    scores = np.bincount(owner, weights=d) / np.bincount(owner)
    kinds = np.asarray(kinds)
    return scores[kinds == "g"], scores[kinds == "f"]


def verification_report(
    X: np.ndarray, labels: Sequence[str], metric: Metric, n_refs: int = 5, bins: int = 20
) -> EvalReport:
    genuine, forgery = verification_scores(X, labels, metric, n_refs)
    eer, thr = compute_eer(genuine, forgery)
    return EvalReport(
        "verify",
        {"eer": eer, "threshold": thr, "n_genuine": float(len(genuine)), "n_forgery": float(len(forgery)),
         "n_refs": float(n_refs)},
        {},
        export_histograms(genuine, forgery, bins),
    )
