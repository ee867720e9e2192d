"""Anomaly score maps, image scores and heatmap overlays."""

import logging
import os
from typing import Dict, List, Sequence, Union

import matplotlib
import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F  # noqa: N812
from PIL import Image
from scipy import ndimage
from torch.utils.data import DataLoader
from tqdm import tqdm

from .alignment import AnomalyAligner, final_map
from .config import DEFAULT_K_TOP, DEFAULT_SIGMA, GAUSSIAN_TRUNCATE, InferenceConfig
from .datasets import TestImageDataset, load_image
from .types import DatasetError, DatasetRecord, ScoreMap, ShapeMismatchError, SimilarityMap
from .utils import create_directory_if_not_exists, to_channels_first

logger = logging.getLogger(__name__)

SCORES_FILENAME = "scores.csv"


def gaussian_smooth(values: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian blur with reflective padding, kernel truncated at 4σ; σ = 0 is the identity."""
    if sigma < 0:
        raise ValueError(f"Sigma must be non-negative, got {sigma}")
    values = np.asarray(values, dtype=np.float64)
    if sigma == 0:
        return values.copy()
    return ndimage.gaussian_filter(values, sigma=sigma, mode="reflect", truncate=GAUSSIAN_TRUNCATE)


def postprocess(
    similarity: Union[SimilarityMap, torch.Tensor],
    height: int,
    width: int,
    sigma: float = DEFAULT_SIGMA,
) -> np.ndarray:
    """
    Turn one patch-grid map into an (H, W) anomaly map in [0, 1].

    The map is upsampled bilinearly, blurred, then clipped.
    """
    values = similarity.values if isinstance(similarity, SimilarityMap) else similarity
    values = values.detach().to(torch.float64)
    if values.dim() == 3:
        if values.shape[0] != 1:
            raise ShapeMismatchError(f"postprocess takes a single map, got batch of {values.shape[0]}")
        values = values[0]
    if values.dim() != 2:
        raise ShapeMismatchError(f"Expected an (s, s) map, got {tuple(values.shape)}")

    upsampled = F.interpolate(
        values[None, None], size=(height, width), mode="bilinear", align_corners=False
    )[0, 0].cpu().numpy()
    return np.clip(gaussian_smooth(upsampled, sigma), 0.0, 1.0)


def image_score(anomaly_map: np.ndarray, k_top: int = DEFAULT_K_TOP) -> float:
    """Mean of the ``k_top`` largest values; the global mean once k_top covers the map."""
    if k_top < 1:
        raise ValueError(f"k_top must be at least 1, got {k_top}")
    flat = np.asarray(anomaly_map, dtype=np.float64).ravel()
    if k_top >= flat.size:
        return float(flat.mean())
    top = np.partition(flat, flat.size - k_top)[flat.size - k_top:]
    return float(top.mean())


@torch.no_grad()
def score_batch(model: AnomalyAligner, images: torch.Tensor, config: InferenceConfig) -> List[ScoreMap]:
    """Score a (B, 3, H, W) batch with the final map of the refinement stack."""
    if images.dim() == 3:
        images = images.unsqueeze(0)
    model.eval()
    height, width = images.shape[-2:]
    maps = final_map(model(images))
    results = []
    for b in range(images.shape[0]):
        anomaly_map = postprocess(maps.values[b], height, width, config.sigma)
        results.append(ScoreMap(anomaly_map=anomaly_map, image_score=image_score(anomaly_map, config.k_top)))
    return results


def score_index(
    model: AnomalyAligner,
    records: Sequence[DatasetRecord],
    config: InferenceConfig,
    image_size: int,
    batch_size: int = 16,
) -> Dict[str, ScoreMap]:
    """Score test records; results are keyed by record path."""
    if not records:
        raise DatasetError("Test split is empty")
    loader = DataLoader(TestImageDataset(records, image_size), batch_size=batch_size, shuffle=False)
    outputs: Dict[str, ScoreMap] = {}
    for batch in tqdm(loader, desc="Scoring", unit="batch"):
        for i, result in zip(batch["index"].tolist(), score_batch(model, batch["image"], config)):
            outputs[records[i].path] = result
    return outputs


def render_overlay(image: np.ndarray, heat: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend a jet-coloured [0, 1] heatmap over an (H, W, 3) image; returns uint8."""
    if image.shape[:2] != heat.shape:
        raise ShapeMismatchError(f"Heatmap {heat.shape} does not match image {image.shape[:2]}")
    colored = matplotlib.colormaps["jet"](np.clip(heat, 0.0, 1.0))[..., :3]
    blended = (1 - alpha) * np.clip(image, 0.0, 1.0) + alpha * colored
    return (blended * 255).round().astype(np.uint8)


def predict_images(
    model: AnomalyAligner,
    paths: Sequence[str],
    config: InferenceConfig,
    image_size: int,
    out_dir: str,
    write_overlays: bool = True,
) -> pd.DataFrame:
    """Score image files, write ``scores.csv`` and one overlay PNG per image."""
    create_directory_if_not_exists(out_dir)
    rows = []
    for i, path in enumerate(tqdm(paths, desc="Predicting", unit="img")):
        image = load_image(path, image_size)
        result = score_batch(model, to_channels_first(image), config)[0]
        row = {"path": str(path), "score": result.image_score}
        if write_overlays:
            stem = f"{i:04d}_{os.path.splitext(os.path.basename(path))[0]}"
            overlay_path = os.path.join(out_dir, f"{stem}_overlay.png")
            Image.fromarray(render_overlay(image, result.anomaly_map)).save(overlay_path)
            row["overlay"] = overlay_path
        rows.append(row)

    frame = pd.DataFrame(rows, columns=["path", "score", "overlay"] if write_overlays else ["path", "score"])
    frame.to_csv(os.path.join(out_dir, SCORES_FILENAME), index=False)
    logger.info(f"Scored {len(frame)} images -> {os.path.join(out_dir, SCORES_FILENAME)}")
    return frame
