import numpy as np
import pytest

from attnwarp.core import (
    InvalidConfig,
    LabeledSeries,
    NonFiniteInput,
    NotNormalized,
    Pair,
    ShapeMismatch,
    TimeSeries,
    TrainingConfig,
    WarpingMatrix,
    validate_pair,
)


def test_validate_pair_compatible():
    assert validate_pair(np.zeros((50, 2)), np.ones((50, 2)))


def test_validate_pair_width_mismatch():
    with pytest.raises(ShapeMismatch) as exc:
        validate_pair(np.zeros((50, 2)), np.zeros((40, 2)))
    assert "50" in str(exc.value) and "40" in str(exc.value)


def test_validate_pair_nan():
    b = np.zeros((5, 2))
    b[3, 1] = np.nan
    with pytest.raises(NonFiniteInput):
        validate_pair(np.zeros((5, 2)), b)


def test_validate_pair_symmetric():
    a, b = np.zeros((6, 3)), np.zeros((6, 2))
    for x, y in ((a, b), (b, a)):
        with pytest.raises(ShapeMismatch):
            validate_pair(x, y)


def test_time_series_is_frozen():
    ts = TimeSeries(np.arange(4.0))
    assert (ts.W, ts.K) == (4, 1)
    with pytest.raises(ValueError):
        ts.values[0] = 9.0
    assert ts == TimeSeries([[0.0], [1.0], [2.0], [3.0]])
    assert hash(ts) == hash(TimeSeries(np.arange(4.0)))


def test_time_series_rejects_nan():
    with pytest.raises(NonFiniteInput):
        TimeSeries([0.0, np.inf])


def test_labeled_series_needs_label():
    with pytest.raises(InvalidConfig):
        LabeledSeries(TimeSeries([1.0, 2.0]), "")


def test_pair_label_domain():
    Pair(np.zeros(3), np.zeros(3), 1)
    with pytest.raises(InvalidConfig):
        Pair(np.zeros(3), np.zeros(3), 2)


def test_warping_matrix_normalization():
    WarpingMatrix(np.full((3, 3), 1 / 3), normalized=True)
    WarpingMatrix(np.eye(2), normalized=True)
    with pytest.raises(NotNormalized):
        WarpingMatrix(np.ones((2, 2)), normalized=True)
    with pytest.raises(NotNormalized):
        WarpingMatrix(np.array([[1.5, -0.5], [0.5, 0.5]]), normalized=True)
    assert WarpingMatrix(np.ones((2, 2))).W == 2


@pytest.mark.parametrize(
    "kwargs",
    [
        {"margin": 0},
        {"learning_rate": -1},
        {"batch_size": 0},
        {"max_epochs": -1},
        {"match_ratio": (1, 0)},
        {"task": "rank"},
        {"dtype": "float16"},
    ],
)
def test_training_config_rejects(kwargs):
    with pytest.raises(InvalidConfig):
        TrainingConfig(**kwargs)


def test_training_config_defaults():
    cfg = TrainingConfig()
    assert (cfg.margin, cfg.learning_rate, cfg.batch_size, cfg.max_epochs) == (1.0, 1e-4, 512, 20)
    assert cfg.betas == (0.9, 0.999) and cfg.eps == 1e-8
