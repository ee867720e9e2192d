"""
clip-ada

Unified industrial anomaly detection on a frozen CLIP backbone.

Key Features:
- Learnable prompt vectors spliced into a text template
- Patch/text similarity maps trained against synthetic Perlin-noise anomalies
- Coarse-to-fine refinement stages that re-encode the image under the previous map
- Pixel heatmaps with top-K image scores
- I-AUC / P-AUC / P-mAP evaluation on MVTec-AD, VisA and folder datasets
- Seeded training with exact checkpoint resume
"""

__version__ = "1.0.0"

from .types import (
    ClipAdaError,
    DatasetIndex,
    DatasetRecord,
    ScoreMap,
    SimilarityMap,
    SyntheticSample,
    TrainingStatistics,
)
from .config import ExperimentConfig, load_config, preset
from .trainer import Checkpoint, Trainer, resume, train
from .main import cli, main

__all__ = [
    "ClipAdaError",
    "DatasetIndex",
    "DatasetRecord",
    "ScoreMap",
    "SimilarityMap",
    "SyntheticSample",
    "TrainingStatistics",
    "ExperimentConfig",
    "load_config",
    "preset",
    "Checkpoint",
    "Trainer",
    "resume",
    "train",
    "cli",
    "main",
]
