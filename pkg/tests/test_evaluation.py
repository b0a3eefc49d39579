import math

import numpy as np
import pytest

from multisat.evaluation import (
    AllRunsDiverged,
    EvaluationError,
    RunResult,
    aggregate_runs,
    confusion_accumulate,
    format_mean_std,
    iou,
    lr_sweep,
    mean_iou,
    new_confusion,
    overall_accuracy,
    per_class_delta,
    per_class_iou,
    read_delta_file,
    result_table,
    steps_to_peak,
    write_delta_file,
)


def test_perfect_prediction():
    truth = np.array([[0, 1], [2, 2]])
    cm = confusion_accumulate(new_confusion(3), truth, truth)
    assert per_class_iou(cm) == [1.0, 1.0, 1.0]
    assert overall_accuracy(cm) == 1.0


def test_hand_computed_iou():
    truth = np.array([0, 0, 1, 1, 255])
    pred = np.array([0, 1, 1, 1, 0])
    cm = confusion_accumulate(new_confusion(2), pred, truth)
    assert cm.sum() == 4
    assert iou(cm, 0) == 0.5 and iou(cm, 1) == 2 / 3
    assert mean_iou(cm) == pytest.approx((0.5 + 2 / 3) / 2)
    assert overall_accuracy(cm) == 0.75


def test_absent_class_is_undefined():
    truth = np.array([0, 0])
    cm = confusion_accumulate(new_confusion(3), truth, truth)
    assert per_class_iou(cm) == [1.0, None, None]
    assert mean_iou(cm) == 1.0


def test_confusion_matches_loop():
    rng = np.random.default_rng(0)
    truth = rng.integers(0, 4, 500)
    truth[::7] = 255
    pred = rng.integers(0, 4, 500)
    cm = confusion_accumulate(new_confusion(4), pred, truth)
    ref = np.zeros((4, 4), int)
    for t, p in zip(truth, pred):
        if t != 255:
            ref[t, p] += 1
    assert np.array_equal(cm, ref)


def test_confusion_errors():
    with pytest.raises(EvaluationError):
        confusion_accumulate(new_confusion(2), np.zeros(3), np.zeros(4))
    with pytest.raises(EvaluationError):
        confusion_accumulate(new_confusion(2), np.array([5]), np.array([0]))
    with pytest.raises(EvaluationError):
        overall_accuracy(new_confusion(2))


def test_aggregate():
    assert aggregate_runs([0.5]) == (0.5, None)
    m, s = aggregate_runs([1.0, 2.0, 3.0])
    assert m == 2.0 and s == 1.0
    with pytest.raises(EvaluationError):
        aggregate_runs([])
    assert format_mean_std(0.5123, 0.01) == "51.23 ± 1.00"


def test_result_table():
    rs = [RunResult("d", "random", 0.01, i, "mean_iou", v) for i, v in enumerate([0.4, 0.5, 0.6])]
    rs.append(RunResult("d", "random", 1.0, 0, "mean_iou", 0.7))
    table = result_table(rs, {"random": 0.01}, "mean_iou")
    lines = table.splitlines()
    assert lines[0] == "checkpoint\tlr\t1% split\t100% split"
    assert lines[1] == "random\t0.01\t50.00 ± 10.00\t70.00"


def test_lr_sweep_ties_and_divergence():
    scores = {0.1: float("nan"), 0.01: 0.6, 0.001: 0.6, 0.0001: 0.2}
    best, got = lr_sweep(lambda lr: scores[lr])
    assert best == 0.001 and math.isnan(got[0.1])

    def boom(lr):
        raise RuntimeError("diverged")

    with pytest.raises(AllRunsDiverged):
        lr_sweep(boom)


def test_steps_to_peak():
    assert steps_to_peak([(0, 0.1), (10, 0.5), (20, 0.5), (30, 0.4)]) == 10
    with pytest.raises(EvaluationError):
        steps_to_peak([])


def test_per_class_delta_and_file(tmp_path):
    a = {0: [0.5, None, 0.9], 1: [0.7, 0.2, 0.9]}
    b = {0: [0.4, 0.3, 0.8], 1: [0.5, 0.1, 1.0]}
    d = per_class_delta(a, b)
    assert d[0] == pytest.approx(0.15) and d[1] == pytest.approx(0.1) and d[2] == pytest.approx(0.0)
    write_delta_file(d, ["x", "y", "z"], tmp_path / "delta.tsv")
    assert read_delta_file(tmp_path / "delta.tsv") == d
    with pytest.raises(EvaluationError):
        per_class_delta({0: [0.1]}, {1: [0.1]})
