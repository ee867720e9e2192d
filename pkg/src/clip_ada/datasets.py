"""Dataset indexing (MVTec-AD, VisA, generic folders) and torch datasets."""

import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch
from PIL import Image
from torch.utils.data import Dataset

from .config import DatasetConfig
from .synthesis import AnomalySynthesizer, sample_rng
from .types import DatasetError, DatasetIndex, DatasetRecord, Label, LayoutError, MissingMaskError, Split
from .utils import format_number, to_channels_first

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".JPG")
MVTEC_CATEGORY_COUNT = 15
VISA_CATEGORY_COUNT = 12
VISA_SPLIT_CSV = Path("split_csv") / "1cls.csv"


def _list_images(directory: Path) -> List[Path]:
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix in IMAGE_EXTENSIONS)


def _find_mask(ground_truth: Path, defect: str, stem: str) -> Optional[Path]:
    for name in (f"{stem}_mask", stem):
        for ext in IMAGE_EXTENSIONS:
            candidate = ground_truth / defect / f"{name}{ext}"
            if candidate.is_file():
                return candidate
    return None


def index_folder(root: Union[str, Path], name: str = "folder") -> DatasetIndex:
    """
    Index a ``<category>/{train/good, test/<defect>, ground_truth/<defect>}`` tree.

    Masks are paired with test images by filename stem (``<stem>_mask`` or ``<stem>``).
    """
    root = Path(root)
    if not root.is_dir():
        raise LayoutError(f"Dataset root does not exist: {root}")

    category_dirs = sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    if not category_dirs:
        raise LayoutError(f"No category directories under {root}")

    records: List[DatasetRecord] = []
    for category_dir in category_dirs:
        category = category_dir.name
        train_good = category_dir / "train" / "good"
        test_dir = category_dir / "test"
        if not train_good.is_dir() or not test_dir.is_dir():
            raise LayoutError(f"Category {category} lacks train/good or test directories")

        for path in _list_images(train_good):
            records.append(DatasetRecord(str(path), category, Split.TRAIN, Label.NORMAL))

        for defect_dir in sorted(p for p in test_dir.iterdir() if p.is_dir()):
            defect = defect_dir.name
            for path in _list_images(defect_dir):
                if defect == "good":
                    records.append(DatasetRecord(str(path), category, Split.TEST, Label.NORMAL))
                    continue
                mask = _find_mask(category_dir / "ground_truth", defect, path.stem)
                if mask is None:
                    raise MissingMaskError(f"No ground-truth mask for anomalous image {path}")
                records.append(DatasetRecord(
                    str(path), category, Split.TEST, Label.ANOMALOUS, str(mask), defect
                ))

    index = DatasetIndex(records=records, categories=[p.name for p in category_dirs], name=name)
    logger.info(
        f"Indexed {name}: {len(index.categories)} categories, "
        f"{format_number(len(index.train_records()))} train / "
        f"{format_number(len(index.test_records()))} test images"
    )
    return index


def index_mvtec(root: Union[str, Path]) -> DatasetIndex:
    """Index an MVTec-AD root."""
    index = index_folder(root, name="mvtec")
    if len(index.categories) != MVTEC_CATEGORY_COUNT:
        logger.warning(
            f"MVTec root has {len(index.categories)} categories, expected {MVTEC_CATEGORY_COUNT}"
        )
    return index


def index_visa(root: Union[str, Path]) -> DatasetIndex:
    """Index a VisA root through its ``split_csv/1cls.csv`` file."""
    root = Path(root)
    csv_path = root / VISA_SPLIT_CSV
    if not csv_path.is_file():
        raise LayoutError(f"VisA split file not found: {csv_path}")

    frame = pd.read_csv(csv_path, dtype=str, keep_default_na=False)
    required = {"object", "split", "label", "image", "mask"}
    missing = required - set(frame.columns)
    if missing:
        raise LayoutError(f"VisA split file lacks columns: {', '.join(sorted(missing))}")

    records: List[DatasetRecord] = []
    dropped = 0
    for row in frame.itertuples(index=False):
        split_name = row.split.strip().lower()
        if split_name not in ("train", "test"):
            raise LayoutError(f"Unknown split {row.split!r} in {csv_path}")
        split = Split(split_name)
        anomalous = row.label.strip().lower() == "anomaly"
        image_path = root / row.image
        if split is Split.TRAIN and anomalous:
            dropped += 1
            continue
        if anomalous:
            if not row.mask.strip():
                raise MissingMaskError(f"No ground-truth mask for anomalous image {image_path}")
            records.append(DatasetRecord(
                str(image_path), row.object, split, Label.ANOMALOUS, str(root / row.mask), "anomaly"
            ))
        else:
            records.append(DatasetRecord(str(image_path), row.object, split, Label.NORMAL))

    if dropped:
        logger.warning(f"Dropped {dropped} anomalous records from the VisA train split")
    categories = sorted({r.category for r in records})
    if not categories:
        raise LayoutError(f"No records in {csv_path}")
    records.sort(key=lambda r: (r.category, r.split.value, r.path))
    index = DatasetIndex(records=records, categories=categories, name="visa")
    if len(categories) != VISA_CATEGORY_COUNT:
        logger.warning(f"VisA root has {len(categories)} categories, expected {VISA_CATEGORY_COUNT}")
    logger.info(
        f"Indexed visa: {len(categories)} categories, "
        f"{format_number(len(index.train_records()))} train / "
        f"{format_number(len(index.test_records()))} test images"
    )
    return index


def subsample(index: DatasetIndex, fraction: float, seed: int) -> DatasetIndex:
    """Seeded per-category subsample of the train split; the test split is untouched."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"Fraction must lie in (0, 1], got {fraction}")
    if fraction == 1.0:
        return DatasetIndex(records=list(index.records), categories=list(index.categories), name=index.name)

    rng = np.random.default_rng(seed)
    keep = set()
    for category, records in sorted(index.by_category(Split.TRAIN).items()):
        if not records:
            continue
        n = len(records)
        k = max(1, int(math.floor(n * fraction + 0.5)))
        chosen = rng.choice(n, size=k, replace=False)
        keep.update(records[i].path for i in chosen)

    kept = [r for r in index.records if r.split is Split.TEST or r.path in keep]
    logger.info(f"Subsampled train split to {len(keep)} images ({fraction:.0%})")
    return DatasetIndex(records=kept, categories=list(index.categories), name=index.name)


def load_index(config: DatasetConfig) -> DatasetIndex:
    """Index the configured dataset and apply train-fraction subsampling."""
    if not config.root:
        raise DatasetError("No dataset root configured (dataset.root / --dataset-root)")
    indexers = {"mvtec": index_mvtec, "visa": index_visa, "folder": index_folder}
    index = indexers[config.name](config.root)
    if config.fraction < 1.0:
        index = subsample(index, config.fraction, config.seed)
    return index


def load_image(path: Union[str, Path], size: int) -> np.ndarray:
    """RGB image resized bilinearly to (size, size, 3), float32 in [0, 1]."""
    try:
        with Image.open(path) as img:
            resized = img.convert("RGB").resize((size, size), Image.BILINEAR)
            return np.asarray(resized, dtype=np.float32) / 255.0
    except (OSError, ValueError) as e:
        raise DatasetError(f"Could not read image {path}: {e}") from e


def load_mask(path: Optional[Union[str, Path]], size: int) -> np.ndarray:
    """Binary mask resized with nearest neighbour to (size, size); zeros without a path."""
    if path is None:
        return np.zeros((size, size), dtype=np.uint8)
    try:
        with Image.open(path) as img:
            resized = img.convert("L").resize((size, size), Image.NEAREST)
            return (np.asarray(resized) > 0).astype(np.uint8)
    except (OSError, ValueError) as e:
        raise DatasetError(f"Could not read mask {path}: {e}") from e


class SyntheticTrainDataset(Dataset):
    """Normal images turned into synthetic training samples, reseeded per (epoch, index)."""

    def __init__(
        self,
        sources: Sequence[Union[str, np.ndarray]],
        synthesizer: AnomalySynthesizer,
        image_size: int,
        seed: int = 0,
    ):
        if len(sources) == 0:
            raise DatasetError("Training split is empty")
        self.sources = list(sources)
        self.synthesizer = synthesizer
        self.image_size = image_size
        self.seed = seed
        self.epoch = 0

    @classmethod
    def from_index(
        cls, index: DatasetIndex, synthesizer: AnomalySynthesizer, image_size: int, seed: int = 0
    ) -> "SyntheticTrainDataset":
        return cls([r.path for r in index.train_records()], synthesizer, image_size, seed)

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.sources)

    def _source(self, i: int) -> np.ndarray:
        source = self.sources[i]
        if isinstance(source, np.ndarray):
            return source
        return load_image(source, self.image_size)

    def __getitem__(self, i: int) -> Dict[str, torch.Tensor]:
        sample = self.synthesizer(self._source(i), sample_rng(self.seed, self.epoch, i))
        return {
            "image": to_channels_first(sample.image),
            "mask_patch": torch.from_numpy(sample.mask_patch.astype(np.float32)),
            "mask_full": torch.from_numpy(sample.mask_full.astype(np.float32)),
            "label": torch.tensor(int(sample.is_anomalous)),
        }


class TestImageDataset(Dataset):
    """Test records with their resized ground-truth masks."""

    def __init__(self, records: Sequence[DatasetRecord], image_size: int):
        self.records = list(records)
        self.image_size = image_size

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i: int) -> Dict[str, torch.Tensor]:
        record = self.records[i]
        image = load_image(record.path, self.image_size)
        mask = load_mask(record.mask_path, self.image_size)
        return {
            "image": to_channels_first(image),
            "mask": torch.from_numpy(mask.astype(np.float32)),
            "label": torch.tensor(int(record.label is Label.ANOMALOUS)),
            "index": torch.tensor(i),
        }
