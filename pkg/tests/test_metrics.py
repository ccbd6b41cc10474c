import numpy as np
import pytest

from diorvit.metrics import (MetricError, accuracy, confusion_matrix, evaluate, macro_f1,
                             quadratic_weighted_kappa, report_csv)


def test_confusion_matrix_diagonal():
    np.testing.assert_array_equal(confusion_matrix([1, 2], [1, 2], 2), np.eye(2))


def test_confusion_matrix_empty():
    assert confusion_matrix([], [], 3).sum() == 0


def test_confusion_matrix_out_of_range():
    with pytest.raises(MetricError):
        confusion_matrix([1, 5], [1, 1], 4)


def test_accuracy():
    assert accuracy(np.eye(3)) == 1.0
    assert accuracy(confusion_matrix([1, 2, 3, 4], [1, 2, 3, 3], 4)) == 0.75
    with pytest.raises(MetricError):
        accuracy(np.zeros((2, 2)))


def test_macro_f1():
    assert macro_f1(np.eye(4) * 3) == 1.0
    assert abs(macro_f1(confusion_matrix([1, 1, 2, 2], [1, 2, 2, 2], 2)) - 0.733333) < 1e-6


def test_macro_f1_absent_class_counts_zero():
    assert macro_f1(confusion_matrix([1, 2], [1, 2], 3)) == pytest.approx(2 / 3)


def test_kappa_examples():
    assert quadratic_weighted_kappa(np.eye(4)) == 1.0
    assert abs(quadratic_weighted_kappa(confusion_matrix([1, 2, 3, 4], [1, 2, 3, 3], 4)) - 0.875) < 1e-6


def test_kappa_constant_prediction_is_zero():
    cm = confusion_matrix([1, 2, 3, 4] * 5, [2] * 20, 4)
    assert abs(quadratic_weighted_kappa(cm)) < 1e-12


def test_kappa_undefined():
    with pytest.raises(MetricError):
        quadratic_weighted_kappa(confusion_matrix([2, 2], [2, 2], 3))


def kappa_oracle(cm):
    n = len(cm)
    total = sum(cm[i][j] for i in range(n) for j in range(n))
    rows = [sum(cm[i][j] for j in range(n)) for i in range(n)]
    cols = [sum(cm[i][j] for i in range(n)) for j in range(n)]
    num = den = 0.0
    for i in range(n):
        for j in range(n):
            w = (i - j) ** 2 / (n - 1) ** 2
            num += w * cm[i][j] / total
            den += w * rows[i] * cols[j] / total ** 2
    return 1 - num / den


def test_kappa_matches_double_sum(rng):
    for _ in range(100):
        n = int(rng.integers(2, 7))
        cm = rng.integers(0, 20, size=(n, n))
        cm[0, -1] += 1
        assert abs(quadratic_weighted_kappa(cm) - kappa_oracle(cm.tolist())) < 1e-10


def test_report_csv():
    text = report_csv(evaluate([1, 2, 3, 4], [1, 2, 3, 3], 4))
    lines = text.splitlines()
    assert lines[:2] == ["acc,f1,kappa", "0.750000,0.666667,0.875000"]
    assert lines[3] == "pred1,pred2,pred3,pred4"
    assert lines[-1] == "0,0,1,0"
