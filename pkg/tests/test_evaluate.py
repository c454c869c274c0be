from __future__ import annotations

import numpy as np
import pytest
from conftest import label_only_dataset

from fedmim.data import partition_from_manifest
from fedmim.errors import ContractViolation
from fedmim.evaluate import (
    accuracy,
    confusion_matrix,
    evaluate_params,
    f1_per_class,
    heterogeneity_report,
    predict_logits,
)
from fedmim.model import init_finetune_params


def _brute_force(preds, labels, k):
    cm = np.zeros((k, k), dtype=np.int64)
    for p, y in zip(preds, labels):
        cm[y, p] += 1
    f1 = []
    for j in range(k):
        tp = cm[j, j]
        fp = cm[:, j].sum() - tp
        fn = cm[j, :].sum() - tp
        f1.append(1.0 if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
    return cm, np.trace(cm) / len(labels), np.array(f1)


def test_hand_case_f1_two_thirds():
    report = f1_per_class([1, 1, 0], [1, 0, 0], 2)
    np.testing.assert_allclose(report.per_class, [2 / 3, 2 / 3])
    assert report.macro == pytest.approx(2 / 3)
    assert accuracy([1, 1, 0], [1, 0, 0]) == pytest.approx(2 / 3)


def test_metrics_match_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        k = int(rng.integers(2, 6))
        n = int(rng.integers(1, 40))
        preds = rng.integers(0, k, n)
        labels = rng.integers(0, k, n)
        cm, acc, f1 = _brute_force(preds, labels, k)
        assert np.array_equal(confusion_matrix(preds, labels, k), cm)
        assert accuracy(preds, labels) == acc
        assert np.array_equal(f1_per_class(preds, labels, k).per_class, f1)


def test_absent_class_is_flagged():
    report = f1_per_class([0, 1], [0, 1], 3)
    assert report.absent.tolist() == [False, False, True]
    assert report.per_class[2] == 1.0


def test_metrics_reject_bad_input():
    with pytest.raises(ContractViolation):
        accuracy([], [])
    with pytest.raises(ContractViolation):
        accuracy([0, 1], [0])


def test_heterogeneity_report():
    ds = label_only_dataset([0, 0, 0, 1], 2)
    part = partition_from_manifest(2, np.array([0, 0, 1, 1]), np.arange(4), ds)
    report = heterogeneity_report(part, ds)
    assert list(report.counts.columns) == ["client_id", "class_id", "count"]
    assert report.counts["count"].tolist() == [2, 0, 1, 1]
    # classe 0: 2/3 no cliente 0; classe 1: tudo no cliente 1
    assert report.skew == pytest.approx((2 / 3 + 1.0) / 2)


def test_evaluate_params_with_zero_classifier(tiny_data, geometry, dims):
    params = init_finetune_params(geometry, dims, seed=0, dtype=np.float64)
    logits = predict_logits(params, tiny_data.test.images, geometry, dims, batch_size=4)
    assert logits.shape == (len(tiny_data.test), 2)
    res = evaluate_params(params, tiny_data.test, geometry, dims)
    # logits zerados → argmax 0 para tudo e loss = log 2
    assert res.accuracy == pytest.approx(np.mean(tiny_data.test.labels == 0))
    assert res.loss == pytest.approx(np.log(2.0))
    assert res.num_samples == len(tiny_data.test)
