import math

import numpy as np
import pytest
from uqbar.strings import normalize

from pong.exceptions import ConfigurationError, ShapeError
from pong.metrics import MetricReport, format_table, target_indices


def test_perfect_predictions():
    report = MetricReport.from_probabilities(np.eye(4)[[0, 1]], [0, 1])
    assert report.accuracy == 1.0
    assert report.ce == 0.0
    assert report.tvd == pytest.approx(0.0, abs=1e-12)
    assert report.brier == pytest.approx(0.0, abs=1e-12)


def test_uniform_predictions_over_eight_answers():
    report = MetricReport.from_logits(np.zeros((5, 8)), [3, 3, 5, 7, 1])
    assert report.accuracy == 0.0
    assert report.ce == pytest.approx(math.log(8))
    assert report.tvd == pytest.approx(7 / 8)
    assert report.brier == pytest.approx(0.875)


def test_targets_may_be_one_hot():
    logits = np.random.default_rng(0).normal(size=(6, 4))
    targets = [0, 3, 2, 2, 1, 0]
    by_index = MetricReport.from_logits(logits, targets)
    by_rows = MetricReport.from_logits(logits, np.eye(4)[targets])
    assert by_index == by_rows


def test_logits_and_probabilities_agree():
    logits = np.random.default_rng(1).normal(size=(6, 8))
    probabilities = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    first = MetricReport.from_logits(logits, [1] * 6)
    second = MetricReport.from_probabilities(probabilities, [1] * 6)
    assert first.ce == pytest.approx(second.ce)
    assert first.tvd == pytest.approx(second.tvd)
    assert first.brier == pytest.approx(second.brier)
    assert first.correct == second.correct


def test_merge_is_a_weighted_mean():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(10, 8))
    targets = rng.integers(0, 8, size=10)
    whole = MetricReport.from_logits(logits, targets)
    merged = MetricReport.merge(
        [
            MetricReport.from_logits(logits[:3], targets[:3]),
            MetricReport.from_logits(logits[3:], targets[3:]),
        ]
    )
    assert merged.count == 10 and merged.correct == whole.correct
    assert merged.ce == pytest.approx(whole.ce)
    assert merged.tvd == pytest.approx(whole.tvd)
    with pytest.raises(ConfigurationError):
        MetricReport.merge([])


def test_breakdown():
    probabilities = np.eye(4)[[0, 1, 2]]
    labels = [
        ["constant:type"],
        ["constant:type", "progression:size"],
        ["progression:size"],
    ]
    report = MetricReport.from_probabilities(probabilities, [0, 2, 2], labels)
    assert report.breakdown["constant:type"].count == 2
    assert report.breakdown["constant:type"].accuracy == 0.5
    assert report.breakdown["progression:size"].accuracy == 0.5
    assert report.breakdown_table() == normalize(
        """
        rule:attribute    count  accuracy
        ----------------  -----  --------
        constant:type         2    0.5000
        progression:size      2    0.5000
        """
    )


def test_table():
    report = MetricReport.from_probabilities(np.eye(4)[[0, 1]], [0, 1])
    assert report.table() == normalize(
        """
        metric      mean   total
        --------  ------  ------
        accuracy  1.0000     2/2
        ce        0.0000  0.0000
        tvd       0.0000  0.0000
        brier     0.0000  0.0000
        """
    )


def test_csv():
    report = MetricReport.from_logits(np.zeros((2, 4)), [0, 1], [["constant:type"]] * 2)
    lines = report.to_csv().splitlines()
    assert lines[0] == "metric,value"
    assert lines[1] == "count,2"
    assert lines[2] == "accuracy,0.5"
    assert lines[-1] == "accuracy[constant:type],0.5"


@pytest.mark.parametrize(
    "scores, targets, error",
    [
        (np.zeros(4), [0], ShapeError),
        (np.zeros((0, 4)), [], ConfigurationError),
        (np.zeros((2, 4)), [0], ShapeError),
        (np.zeros((2, 4)), [0, 4], ConfigurationError),
    ],
)
def test_invalid_inputs(scores, targets, error):
    with pytest.raises(error):
        MetricReport.from_logits(scores, targets)


def test_target_indices():
    assert target_indices([[0, 1], [1, 0]], 2).tolist() == [1, 0]


def test_format_table_alignment():
    assert format_table([["a", "b"], ["long", "1"]]) == "a     b\n----  -\nlong  1"
