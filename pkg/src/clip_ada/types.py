"""Type definitions for the anomaly detection framework."""

from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch


class Split(Enum):
    """Dataset split of a record."""
    TRAIN = "train"
    TEST = "test"


class Label(Enum):
    """Ground-truth label of a record."""
    NORMAL = "normal"
    ANOMALOUS = "anomalous"


class PromptMode(Enum):
    """How the text branch is built."""
    LEARNABLE = "learnable"
    FIXED = "fixed"


# Errors


class ClipAdaError(Exception):
    """Base class for all errors raised by the package."""


class ConfigError(ClipAdaError):
    """Invalid or unreadable configuration."""


class DatasetError(ClipAdaError):
    """Dataset could not be indexed or loaded."""


class LayoutError(DatasetError):
    """Dataset root does not follow the expected directory layout."""


class MissingMaskError(DatasetError):
    """An anomalous test image has no ground-truth mask."""


class ShapeMismatchError(ClipAdaError, ValueError):
    """Tensor shapes or dimensions are inconsistent."""


class ContextOverflowError(ClipAdaError, ValueError):
    """Prompt assembly is longer than the text encoder context."""


class TokenizationError(ClipAdaError, ValueError):
    """Text could not be tokenized."""


class SingleClassError(ClipAdaError, ValueError):
    """AUROC requested on labels with a single class."""


class NoPositivesError(ClipAdaError, ValueError):
    """Average precision requested without positive labels."""


class MissingScoreError(ClipAdaError, KeyError):
    """A test record has no score in the run outputs."""


class TrainingDivergedError(ClipAdaError, RuntimeError):
    """Loss became NaN or infinite."""


class IncompatibleCheckpointError(ClipAdaError):
    """Checkpoint does not match the configuration it is resumed with."""


# Backbone


@dataclass(frozen=True)
class BackendDescriptor:
    """Dimensions of an encoder pair."""
    patch_size: int = 16
    feature_stage: int = 7
    raw_dim: int = 768
    shared_dim: int = 512
    text_token_dim: int = 512

    def grid_side(self, height: int, width: int) -> int:
        """Side of the (square) patch grid for an input size."""
        if height % self.patch_size or width % self.patch_size:
            raise ShapeMismatchError(
                f"Image size {height}x{width} is not divisible by patch size {self.patch_size}"
            )
        if height != width:
            raise ShapeMismatchError(f"Image must be square, got {height}x{width}")
        return height // self.patch_size


@dataclass
class PatchFeatureMap:
    """Per-patch features, shape (B, N_p, dim)."""
    features: torch.Tensor
    grid_side: int
    stage_index: int

    @property
    def num_patches(self) -> int:
        return self.features.shape[-2]

    @property
    def dim(self) -> int:
        return self.features.shape[-1]


# Prompting


@dataclass
class PromptTemplate:
    """Tokenized and embedded text template."""
    text: str
    token_ids: List[int]
    embedded: torch.Tensor  # (K, L, D)
    eot_index: int

    @property
    def length(self) -> int:
        return len(self.token_ids)


@dataclass
class PromptAssembly:
    """Template embeddings with learnable vectors spliced in."""
    sequence: torch.Tensor  # (K, L + S, D)
    learnable_slots: Tuple[int, ...]
    eot_index: int

    @property
    def length(self) -> int:
        return self.sequence.shape[1]


# Alignment


@dataclass
class SimilarityMap:
    """Sigmoid-normalized text/patch alignment grid, shape (B, s_p, s_p)."""
    logits: torch.Tensor
    values: torch.Tensor

    @classmethod
    def from_logits(cls, logits: torch.Tensor) -> "SimilarityMap":
        return cls(logits=logits, values=torch.sigmoid(logits))

    @classmethod
    def from_probabilities(cls, values: torch.Tensor) -> "SimilarityMap":
        return cls(logits=torch.logit(values), values=values)

    @property
    def grid_side(self) -> int:
        return self.values.shape[-1]


# Synthesis


@dataclass
class SyntheticSample:
    """Perturbed normal image with its pixel and patch ground truth."""
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    mask_full: np.ndarray  # (H, W) uint8 in {0, 1}
    mask_patch: np.ndarray  # (s_p, s_p) uint8 in {0, 1}
    is_anomalous: bool


# Datasets


@dataclass(frozen=True)
class DatasetRecord:
    """One image of a dataset."""
    path: str
    category: str
    split: Split
    label: Label
    mask_path: Optional[str] = None
    defect_type: str = "good"


@dataclass
class DatasetIndex:
    """Unified multi-category index of a dataset."""
    records: List[DatasetRecord]
    categories: List[str]
    name: str = "custom"

    def train_records(self) -> List[DatasetRecord]:
        return [r for r in self.records if r.split is Split.TRAIN]

    def test_records(self) -> List[DatasetRecord]:
        return [r for r in self.records if r.split is Split.TEST]

    def by_category(self, split: Split) -> Dict[str, List[DatasetRecord]]:
        grouped: Dict[str, List[DatasetRecord]] = {c: [] for c in self.categories}
        for record in self.records:
            if record.split is split:
                grouped.setdefault(record.category, []).append(record)
        return grouped


# Inference


@dataclass
class ScoreMap:
    """Full-resolution anomaly map and image-level score."""
    anomaly_map: np.ndarray  # (H, W) in [0, 1]
    image_score: float


# Training


@dataclass
class TrainingStatistics:
    """Statistics about a training run."""
    epochs_completed: int = 0
    steps_completed: int = 0
    initial_loss: Optional[float] = None
    final_loss: Optional[float] = None
    history: List[Dict[str, float]] = field(default_factory=list)
    start_time: Optional[datetime] = None
    end_time: Optional[datetime] = None

    @property
    def duration_seconds(self) -> float:
        """Training duration in seconds."""
        if self.start_time and self.end_time:
            return (self.end_time - self.start_time).total_seconds()
        return 0.0
