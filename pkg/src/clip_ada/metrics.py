"""Threshold-free evaluation: image AUROC, pixel AUROC and pixel average precision."""

import logging
import os
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from sklearn.metrics import average_precision_score, roc_auc_score

from .datasets import load_mask
from .types import (
    DatasetError,
    DatasetIndex,
    Label,
    MissingScoreError,
    NoPositivesError,
    ScoreMap,
    SingleClassError,
    Split,
)
from .utils import create_directory_if_not_exists

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["I-AUC", "P-AUC", "P-mAP"]
MEAN_ROW = "mean"
REPORT_CSV = "metrics.csv"
REPORT_TXT = "metrics.txt"


def _as_arrays(scores: Sequence[float], labels: Sequence[int]):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(np.int64)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores for {labels.size} labels")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("Labels must be binary")
    return scores, labels


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under the ROC curve; tied scores count half."""
    scores, labels = _as_arrays(scores, labels)
    if labels.size == 0 or labels.min() == labels.max():
        raise SingleClassError("AUROC needs both normal and anomalous samples")
    return float(roc_auc_score(labels, scores))


def average_precision(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Σ (R_k - R_{k-1}) · P_k over descending score thresholds."""
    scores, labels = _as_arrays(scores, labels)
    if not labels.any():
        raise NoPositivesError("Average precision needs at least one positive")
    return float(average_precision_score(labels, scores))


def _safe(metric, scores, labels, what: str, category: str) -> float:
    try:
        return metric(scores, labels)
    except (SingleClassError, NoPositivesError) as e:
        logger.warning(f"{what} undefined for category {category}: {e}")
        return float("nan")


def evaluate(
    outputs: Mapping[str, ScoreMap],
    index: DatasetIndex,
    masks: Optional[Mapping[str, np.ndarray]] = None,
) -> pd.DataFrame:
    """
    Per-category I-AUC / P-AUC / P-mAP plus an unweighted mean row.

    ``outputs`` is keyed by record path. Pixels are pooled per category. Ground
    truth masks are read from disk at the score map's size unless given.
    """
    by_category = index.by_category(Split.TEST)
    if not any(by_category.values()):
        raise DatasetError("Test split is empty")

    rows: Dict[str, Dict[str, float]] = {}
    for category in index.categories:
        records = by_category.get(category, [])
        if not records:
            continue
        image_scores: List[float] = []
        image_labels: List[int] = []
        pixel_scores: List[np.ndarray] = []
        pixel_labels: List[np.ndarray] = []
        for record in records:
            if record.path not in outputs:
                raise MissingScoreError(f"No score for test image {record.path}")
            result = outputs[record.path]
            image_scores.append(result.image_score)
            image_labels.append(int(record.label is Label.ANOMALOUS))
            if masks is not None and record.path in masks:
                mask = np.asarray(masks[record.path])
            else:
                mask = load_mask(record.mask_path, result.anomaly_map.shape[0])
            if mask.shape != result.anomaly_map.shape:
                raise ValueError(
                    f"Mask {mask.shape} and score map {result.anomaly_map.shape} differ for {record.path}"
                )
            pixel_scores.append(result.anomaly_map.ravel())
            pixel_labels.append((mask.ravel() > 0).astype(np.int64))

        pixels = np.concatenate(pixel_scores)
        truth = np.concatenate(pixel_labels)
        rows[category] = {
            "I-AUC": _safe(auroc, image_scores, image_labels, "I-AUC", category),
            "P-AUC": _safe(auroc, pixels, truth, "P-AUC", category),
            "P-mAP": _safe(average_precision, pixels, truth, "P-mAP", category),
        }
        logger.debug(f"{category}: {rows[category]}")

    table = pd.DataFrame.from_dict(rows, orient="index", columns=METRIC_COLUMNS)
    table.index.name = "category"
    table.loc[MEAN_ROW] = table[METRIC_COLUMNS].mean(axis=0, skipna=True)
    return table


def format_table(table: pd.DataFrame) -> str:
    """Aligned text rendering in percent, one decimal."""
    return (table * 100).to_string(float_format=lambda v: f"{v:.1f}", na_rep="-")


def write_report(table: pd.DataFrame, out_dir: str) -> Dict[str, str]:
    """Write ``metrics.csv`` and ``metrics.txt``; return their paths."""
    create_directory_if_not_exists(out_dir)
    paths = {"csv": os.path.join(out_dir, REPORT_CSV), "txt": os.path.join(out_dir, REPORT_TXT)}
    table.to_csv(paths["csv"], float_format="%.6f")
    with open(paths["txt"], "w", encoding="utf-8") as f:
        f.write(format_table(table) + "\n")
    logger.info(f"Metrics written to {paths['csv']}")
    return paths
