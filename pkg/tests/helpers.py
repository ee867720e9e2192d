"""Fixture builders shared by the test modules."""

import os
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from PIL import Image

from src.clip_ada.config import ExperimentConfig, apply_overrides, preset
from src.clip_ada.types import BackendDescriptor

# 16x16 images -> 4x4 patch grid, C = D = 8
TINY_DIMS = BackendDescriptor(patch_size=4, feature_stage=2, raw_dim=8, shared_dim=8, text_token_dim=8)


def write_png(path: str, array: np.ndarray) -> str:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    Image.fromarray(array).save(path)
    return path


def normal_image(rng: np.random.Generator, size: int) -> np.ndarray:
    base = np.full((size, size, 3), 90, dtype=np.float64)
    return np.clip(base + rng.normal(0, 4, base.shape), 0, 255).astype(np.uint8)


def defect(image: np.ndarray, size: int) -> Tuple[np.ndarray, np.ndarray]:
    mask = np.zeros((size, size), dtype=np.uint8)
    q = size // 4
    mask[q:2 * q, q:2 * q] = 255
    out = image.copy()
    out[mask > 0] = 240
    return out, mask


def make_folder_tree(
    root: str,
    categories: Sequence[str] = ("bottle", "cable"),
    n_train: int = 3,
    n_good: int = 1,
    n_bad: int = 2,
    size: int = 32,
    seed: int = 0,
) -> Dict[str, Dict[str, List[str]]]:
    """MVTec-style tree; returns the written paths per category."""
    rng = np.random.default_rng(seed)
    written: Dict[str, Dict[str, List[str]]] = {}
    for category in categories:
        paths = {"train": [], "good": [], "bad": [], "masks": []}
        for i in range(n_train):
            paths["train"].append(write_png(
                os.path.join(root, category, "train", "good", f"{i:03d}.png"), normal_image(rng, size)
            ))
        for i in range(n_good):
            paths["good"].append(write_png(
                os.path.join(root, category, "test", "good", f"{i:03d}.png"), normal_image(rng, size)
            ))
        for i in range(n_bad):
            image, mask = defect(normal_image(rng, size), size)
            paths["bad"].append(write_png(
                os.path.join(root, category, "test", "crack", f"{i:03d}.png"), image
            ))
            paths["masks"].append(write_png(
                os.path.join(root, category, "ground_truth", "crack", f"{i:03d}_mask.png"), mask
            ))
        written[category] = paths
    return written


def make_visa_tree(root: str, size: int = 32, seed: int = 0) -> pd.DataFrame:
    """VisA-style tree with split_csv/1cls.csv; returns the csv frame."""
    rng = np.random.default_rng(seed)
    rows = []
    for category in ("candle", "pcb1"):
        for i in range(2):
            rel = f"{category}/Data/Images/Normal/{i:03d}.JPG"
            write_png(os.path.join(root, rel), normal_image(rng, size))
            rows.append({"object": category, "split": "train", "label": "normal", "image": rel, "mask": ""})
        rel = f"{category}/Data/Images/Normal/100.JPG"
        write_png(os.path.join(root, rel), normal_image(rng, size))
        rows.append({"object": category, "split": "test", "label": "normal", "image": rel, "mask": ""})

        image, mask = defect(normal_image(rng, size), size)
        rel = f"{category}/Data/Images/Anomaly/000.JPG"
        mask_rel = f"{category}/Data/Masks/Anomaly/000.png"
        write_png(os.path.join(root, rel), image)
        write_png(os.path.join(root, mask_rel), mask)
        rows.append({"object": category, "split": "test", "label": "anomaly", "image": rel, "mask": mask_rel})

    frame = pd.DataFrame(rows, columns=["object", "split", "label", "image", "mask"])
    os.makedirs(os.path.join(root, "split_csv"), exist_ok=True)
    frame.to_csv(os.path.join(root, "split_csv", "1cls.csv"), index=False)
    return frame


def toy_config(overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """Small, fast configuration on the toy backend."""
    base = {
        "backend.spec": "toy:0",
        "dataset.name": "folder",
        "dataset.image_size": 16,
        "prompt.length": 2,
        "model.n_refine": 1,
        "train.epochs": 4,
        "train.lr": 1e-2,
        "train.lr_milestones": [2],
        "train.batch_size": 2,
        "inference.k_top": 8,
        "inference.sigma": 1.0,
    }
    base.update(overrides or {})
    return apply_overrides(preset("mvtec"), base)
