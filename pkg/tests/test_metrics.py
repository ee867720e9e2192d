"""Tests for AUROC, average precision and the evaluation table."""

import math
import os
import tempfile

import numpy as np
import pandas as pd
import pytest

from src.clip_ada.datasets import index_folder, load_mask
from src.clip_ada.metrics import (
    MEAN_ROW,
    METRIC_COLUMNS,
    auroc,
    average_precision,
    evaluate,
    format_table,
    write_report,
)
from src.clip_ada.types import DatasetError, DatasetIndex, Label, MissingScoreError, NoPositivesError, ScoreMap
from src.clip_ada.types import SingleClassError
from tests.helpers import make_folder_tree


def pairwise_auroc(scores, labels):
    """Fraction of (positive, negative) pairs ranked correctly, ties counting half."""
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (len(pos) * len(neg))


def swept_average_precision(scores, labels):
    """Σ (R_k - R_{k-1}) · P_k over distinct thresholds, highest first."""
    total = labels.sum()
    ap, prev_recall = 0.0, 0.0
    for threshold in np.unique(scores)[::-1]:
        predicted = scores >= threshold
        tp = (predicted & (labels == 1)).sum()
        recall = tp / total
        ap += (recall - prev_recall) * tp / predicted.sum()
        prev_recall = recall
    return ap


def test_metrics_match_reference_on_random_instances():
    """Random instances with heavy ties against brute-force references."""
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 60))
        labels = rng.integers(0, 2, n)
        labels[0], labels[1] = 0, 1
        scores = rng.integers(0, 6, n) / 5.0
        assert auroc(scores, labels) == pytest.approx(pairwise_auroc(scores, labels), abs=1e-10)
        assert average_precision(scores, labels) == pytest.approx(
            swept_average_precision(scores, labels), abs=1e-10
        )


def test_closed_forms():
    assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auroc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
    assert auroc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5
    assert average_precision([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert average_precision([0.5] * 4, [0, 1, 0, 0]) == pytest.approx(0.25)


@pytest.mark.parametrize("n", [2, 5, 10])
def test_average_precision_single_positive_ranked_last(n):
    """One positive below every negative is found at rank n with precision 1/n."""
    scores = np.linspace(1.0, 0.0, n)
    labels = [0] * (n - 1) + [1]
    assert average_precision(scores, labels) == pytest.approx(1.0 / n)


def test_score_symmetry():
    """Negating scores mirrors AUROC around one half."""
    rng = np.random.default_rng(1)
    scores = rng.random(40)
    labels = np.arange(40) % 2
    assert auroc(-scores, labels) == pytest.approx(1.0 - auroc(scores, labels), abs=1e-12)


def test_rank_and_permutation_invariance():
    rng = np.random.default_rng(2)
    scores = rng.random(50)
    labels = (rng.random(50) > 0.6).astype(int)
    labels[:2] = [0, 1]
    perm = rng.permutation(50)
    transformed = np.exp(3 * scores) + 1
    for metric in (auroc, average_precision):
        base = metric(scores, labels)
        assert metric(transformed, labels) == pytest.approx(base, abs=1e-12)
        assert metric(scores[perm], labels[perm]) == pytest.approx(base, abs=1e-12)


def test_metric_errors():
    with pytest.raises(SingleClassError):
        auroc([0.1, 0.2], [1, 1])
    with pytest.raises(SingleClassError):
        auroc([], [])
    with pytest.raises(NoPositivesError):
        average_precision([0.1, 0.2], [0, 0])
    with pytest.raises(ValueError):
        auroc([0.1, 0.2], [0, 2])
    with pytest.raises(ValueError):
        auroc([0.1], [0, 1])


@pytest.fixture
def dataset_root():
    with tempfile.TemporaryDirectory() as tmpdir:
        make_folder_tree(tmpdir, categories=("bottle", "cable"), n_good=2, n_bad=2)
        yield tmpdir


def perfect_outputs(index: DatasetIndex, size: int = 16):
    outputs = {}
    for record in index.test_records():
        heat = load_mask(record.mask_path, size).astype(np.float64)
        outputs[record.path] = ScoreMap(anomaly_map=heat, image_score=float(heat.max()))
    return outputs


def test_evaluate_perfect_maps(dataset_root):
    """Ground-truth maps score 100% everywhere."""
    index = index_folder(dataset_root)
    table = evaluate(perfect_outputs(index), index)
    assert list(table.columns) == METRIC_COLUMNS
    assert list(table.index) == ["bottle", "cable", MEAN_ROW]
    assert table.index.name == "category"
    assert np.allclose(table.to_numpy(), 1.0)


def test_evaluate_constant_maps(dataset_root):
    index = index_folder(dataset_root)
    outputs = {
        r.path: ScoreMap(anomaly_map=np.full((16, 16), 0.3), image_score=0.3)
        for r in index.test_records()
    }
    table = evaluate(outputs, index)
    assert table.loc["bottle", "I-AUC"] == pytest.approx(0.5)
    assert table.loc["bottle", "P-AUC"] == pytest.approx(0.5)
    # two 4x4 defects among four 16x16 maps
    assert table.loc["bottle", "P-mAP"] == pytest.approx(32 / 1024)


def test_evaluate_with_explicit_masks(dataset_root):
    index = index_folder(dataset_root)
    outputs = perfect_outputs(index)
    masks = {path: (result.anomaly_map > 0).astype(np.uint8) for path, result in outputs.items()}
    table = evaluate(outputs, index, masks=masks)
    assert np.allclose(table.to_numpy(), 1.0)


def test_evaluate_missing_score(dataset_root):
    index = index_folder(dataset_root)
    outputs = perfect_outputs(index)
    outputs.pop(index.test_records()[0].path)
    with pytest.raises(MissingScoreError):
        evaluate(outputs, index)


def test_evaluate_single_class_category(caplog):
    """A category without anomalies reports NaN and stays out of the mean."""
    with tempfile.TemporaryDirectory() as tmpdir:
        make_folder_tree(tmpdir, categories=("bottle",))
        make_folder_tree(tmpdir, categories=("cable",), n_bad=0)
        index = index_folder(tmpdir)
        table = evaluate(perfect_outputs(index), index)
        assert table.loc["cable"].isna().all()
        assert table.loc[MEAN_ROW, "I-AUC"] == pytest.approx(table.loc["bottle", "I-AUC"])
        assert "undefined for category cable" in caplog.text


def test_evaluate_empty_test_split():
    index = DatasetIndex(records=[], categories=["bottle"])
    with pytest.raises(DatasetError):
        evaluate({}, index)


def test_format_and_write_report(dataset_root):
    index = index_folder(dataset_root)
    table = evaluate(perfect_outputs(index), index)
    table.loc["cable", "P-mAP"] = math.nan
    assert "100.0" in format_table(table)
    assert "-" in format_table(table)

    with tempfile.TemporaryDirectory() as tmpdir:
        paths = write_report(table, tmpdir)
        assert all(os.path.exists(p) for p in paths.values())
        read = pd.read_csv(paths["csv"], index_col="category")
        assert list(read.columns) == METRIC_COLUMNS
        assert np.isnan(read.loc["cable", "P-mAP"])
        assert read.loc["bottle", "I-AUC"] == pytest.approx(1.0)


def test_labels_follow_records(dataset_root):
    index = index_folder(dataset_root)
    assert sum(r.label is Label.ANOMALOUS for r in index.test_records()) == 4
