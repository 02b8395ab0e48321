import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnwarp.core import EmptyScoreList, EmptyTrainingSet, InvalidConfig, NoReferences
from attnwarp.dtw import dtw_metric
from attnwarp.evaluation import (
    EvalReport,
    classification_report,
    compute_eer,
    distance_table,
    export_histograms,
    knn_classify,
    knn_vote,
    read_report,
    split_label,
    subject_distance,
    verification_report,
    verification_scores,
)

from oracles import eer_sweep


def euclid(A, B):
    return ((np.asarray(A) - np.asarray(B)) ** 2).sum(axis=(1, 2))


def test_knn_nearest_self():
    X = np.array([[[0.0]], [[5.0]], [[9.0]]])
    assert knn_classify(X[1], X, ["a", "b", "c"], euclid, k=1) == "b"


def test_knn_majority():
    assert knn_vote([0.1, 0.2, 0.3, 5.0], ["x", "y", "x", "y"], 3) == "x"


def test_knn_three_way_tie_uses_mean_distance():
    assert knn_vote([0.3, 0.1, 0.2, 9.0], ["x", "y", "z", "x"], 3) == "y"


def test_knn_two_way_tie_uses_mean_distance():
    assert knn_vote([0.1, 0.5, 0.2, 0.3], ["p", "q", "q", "p"], 4) == "p"


def test_knn_errors():
    with pytest.raises(EmptyTrainingSet):
        knn_vote([], [], 1)
    with pytest.raises(InvalidConfig):
        knn_vote([1.0, 2.0], ["a", "b"], 3)


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.integers(0, 1000), min_size=3, max_size=12, unique=True),
    st.integers(1, 3),
    st.integers(0, 2**31 - 1),
)
def test_knn_invariant_under_monotone_transform(dists, k, seed):
    labels = list(np.random.default_rng(seed).choice(["a", "b", "c"], size=len(dists)))
    d = np.array(dists) / 10.0
    assert knn_vote(d, labels, k) == knn_vote(np.exp(d / 10) + 3 * d, labels, k)


def test_accuracy_extremes():
    X = np.concatenate([np.zeros((3, 4, 1)), np.full((3, 4, 1), 10.0)])
    y = ["a"] * 3 + ["b"] * 3
    r = classification_report(X, y, X, y, dtw_metric, k=1)
    assert r.metrics["accuracy"] == 1.0 and r.confusion == {}
    r = classification_report(X, y[::-1], X, y, dtw_metric, k=1)
    assert r.metrics["accuracy"] == 0.0
    assert r.confusion == {"b->a": 3, "a->b": 3}


def test_distance_table_layout():
    Q = np.arange(3.0).reshape(3, 1, 1)
    R = np.arange(2.0).reshape(2, 1, 1) * 10
    t = distance_table(Q, R, euclid)
    assert t.values.shape == (3, 2)
    assert t.values[2, 1] == (2 - 10) ** 2


def test_subject_distance():
    refs = [np.array([[1.0]]), np.array([[2.0]]), np.array([[3.0]])]
    probe = np.array([[0.0]])
    absdist = lambda A, B: np.abs(A - B).sum(axis=(1, 2))
    assert subject_distance(probe, refs[:1], absdist) == 1.0
    assert subject_distance(probe, refs, absdist) == 2.0
    with pytest.raises(NoReferences):
        subject_distance(probe, [], absdist)


def test_eer_examples():
    assert compute_eer([1, 2], [3, 4])[0] == 0.0
    assert compute_eer([1, 2], [1, 2])[0] == 0.5
    # every threshold in (2, 3) rejects one genuine and accepts one forgery
    assert eer_sweep([1, 3], [2, 4]) == 0.5
    assert compute_eer([1, 3], [2, 4])[0] == 0.5


def test_eer_empty():
    with pytest.raises(EmptyScoreList):
        compute_eer([], [1.0])


@pytest.mark.parametrize("seed", range(10))
def test_eer_agrees_with_sweep_on_continuous_scores(seed):
    rng = np.random.default_rng(seed)
    g = rng.normal(0, 1, size=200)
    f = rng.normal(1.5, 1, size=300)
    eer, thr = compute_eer(g, f)
    assert abs(eer - eer_sweep(g, f)) <= 0.01
    assert g.min() - 1 <= thr <= f.max()


def test_histogram_overlap():
    h = export_histograms([0.0, 0.1, 0.2], [5.0, 5.1], bins=10)
    assert h.overlap == 0.0
    assert h.matching.sum() == pytest.approx(1) and h.nonmatching.sum() == pytest.approx(1)
    h = export_histograms([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], bins=5)
    assert h.overlap == pytest.approx(1.0)


def test_histogram_csv(tmp_path):
    h = export_histograms([0.0, 1.0], [1.0, 2.0], bins=4)
    p = tmp_path / "h.csv"
    h.to_csv(p)
    lines = p.read_text().splitlines()
    assert lines[0] == "bin_left,bin_right,matching_density,nonmatching_density"
    assert len(lines) == 5
    assert float(lines[1].split(",")[0]) == 0.0 and float(lines[-1].split(",")[1]) == 2.0


def test_report_round_trip(tmp_path):
    h = export_histograms([0.1, 0.2], [0.3, 0.9], bins=3)
    rep = EvalReport("classify", {"accuracy": 0.8125, "k": 3.0}, {"a->b": 2}, h, {"model": "x.ckpt"})
    p = tmp_path / "r.ini"
    rep.write(p)
    back = read_report(p)
    assert back["metrics"] == {"accuracy": 0.8125, "k": 3.0}
    assert back["confusion"] == {"a->b": 2}
    assert back["report"] == {"task": "classify", "model": "x.ckpt"}
    assert back["histogram"]["bins"] == 3 and back["histogram"]["overlap"] == h.overlap
    with pytest.raises(InvalidConfig):
        EvalReport("classify", {"accuracy": 1.5})


def test_split_label():
    assert split_label("s003:g") == ("s003", "g")
    assert split_label("s003:f") == ("s003", "f")
    assert split_label("s003") == ("s003", "g")


def test_verification_scores_protocol():
    # subject s0: genuine at 0, 0, 1 and a forgery at 10; refs are the first two genuine
    X = np.array([0.0, 0.0, 1.0, 10.0, 5.0, 5.0, 5.0]).reshape(-1, 1, 1)
    labels = ["s0:g", "s0:g", "s0:g", "s0:f", "s1:g", "s1:g", "s1:f"]
    g, f = verification_scores(X, labels, euclid, n_refs=2)
    assert list(g) == [1.0]
    assert list(f) == [100.0, 0.0]
    rep = verification_report(X, labels, euclid, n_refs=2, bins=4)
    assert rep.task == "verify" and 0 <= rep.metrics["eer"] <= 1


def test_verification_identical_scores_give_half():
    X = np.zeros((6, 2, 1))
    labels = ["s0:g"] * 3 + ["s0:f"] * 3
    assert verification_report(X, labels, euclid, n_refs=1).metrics["eer"] == 0.5


def test_verification_without_probes():
    with pytest.raises(EmptyScoreList):
        verification_scores(np.zeros((2, 2, 1)), ["s0:g", "s0:g"], euclid, n_refs=5)
