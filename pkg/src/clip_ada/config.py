"""Configuration and constants for training, evaluation and prediction."""

import copy
import os
import re
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .types import ConfigError, PromptMode

# Backbone
DEFAULT_BACKEND = "pretrained:ViT-B-16/openai"
DEFAULT_FEATURE_STAGE = 7
DEFAULT_IMAGE_SIZE = 224
CACHE_ENV_VAR = "CLIP_ADA_CACHE"

# Prompting
DEFAULT_TEMPLATE = "A photo of a damaged object with defects for anomaly detection"
DEFAULT_TEMPLATE_PREFIX = "A photo of a"
DEFAULT_PROMPT_LENGTH = 4
DEFAULT_PROMPT_INIT_STD = 0.02

# Refinement and objective
DEFAULT_N_REFINE = 1
DEFAULT_LAMBDA_REFINE = 1.0
LOGIT_CLAMP = 50.0

# Inference
DEFAULT_K_TOP = 500
DEFAULT_SIGMA = 4.0
GAUSSIAN_TRUNCATE = 4.0

# Training
DEFAULT_LR_DECAY = 0.2
DEFAULT_WEIGHT_DECAY = 1e-4

# Output
DEFAULT_OUTPUT_DIR = "runs/"
CHECKPOINT_FILENAME = "checkpoint.pt"
HISTORY_FILENAME = "train_history.csv"

BACKEND_SPEC_PATTERN = re.compile(r"^(toy:\d+|pretrained:[^/\s]+(/[^\s]+)?)$")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class BackendConfig(_Section):
    """Encoder pair selection."""
    spec: str = DEFAULT_BACKEND
    feature_stage: int = Field(DEFAULT_FEATURE_STAGE, ge=1)
    tune_text_encoder: bool = False
    tune_image_encoder: bool = False
    cache_dir: Optional[str] = None

    @field_validator("spec")
    @classmethod
    def _check_spec(cls, value: str) -> str:
        if not BACKEND_SPEC_PATTERN.match(value):
            raise ValueError(
                f"backend must be 'toy:<seed>' or 'pretrained:<model>/<weights>', got {value!r}"
            )
        return value


class DatasetConfig(_Section):
    """Dataset location and subsampling."""
    name: str = "mvtec"
    root: Optional[str] = None
    fraction: float = Field(1.0, gt=0.0, le=1.0)
    seed: int = 0
    image_size: int = Field(DEFAULT_IMAGE_SIZE, ge=1)

    @field_validator("name")
    @classmethod
    def _check_name(cls, value: str) -> str:
        if value not in ("mvtec", "visa", "folder"):
            raise ValueError(f"unknown dataset layout {value!r}")
        return value


class PromptConfig(_Section):
    """Text template and learnable prompt bank."""
    template: str = DEFAULT_TEMPLATE
    insert_position: Optional[int] = Field(None, ge=0)
    length: int = Field(DEFAULT_PROMPT_LENGTH, ge=1)
    mode: PromptMode = PromptMode.LEARNABLE
    init_std: float = Field(DEFAULT_PROMPT_INIT_STD, gt=0.0)
    seed: int = 0


class ModelConfig(_Section):
    """Refinement stack."""
    n_refine: int = Field(DEFAULT_N_REFINE, ge=0)
    detach_attention: bool = False


class SynthesisConfig(_Section):
    """Perlin-noise anomaly synthesis."""
    perlin_scale_range: Tuple[int, int] = (1, 6)
    perlin_octaves: int = Field(1, ge=1)
    binarize_threshold: float = 0.5
    opacity_range: Tuple[float, float] = (0.15, 1.0)
    texture_source: str = "self"
    anomaly_probability: float = Field(0.5, ge=0.0, le=1.0)
    patch_threshold: float = Field(0.3, gt=0.0, le=1.0)
    rotate_noise: bool = True
    max_mask_attempts: int = Field(10, ge=1)
    seed: int = 0

    @field_validator("opacity_range")
    @classmethod
    def _check_opacity(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        low, high = value
        if not 0.0 < low <= high <= 1.0:
            raise ValueError(f"opacity range must satisfy 0 < low <= high <= 1, got {value}")
        return value

    @field_validator("perlin_scale_range")
    @classmethod
    def _check_scale(cls, value: Tuple[int, int]) -> Tuple[int, int]:
        low, high = value
        if not 0 <= low <= high:
            raise ValueError(f"perlin scale range must satisfy 0 <= low <= high, got {value}")
        return value


class TrainConfig(_Section):
    """Optimization schedule."""
    epochs: int = Field(800, ge=1)
    lr: float = Field(2e-4, gt=0.0)
    lr_milestones: List[int] = [400, 700]
    lr_decay: float = Field(DEFAULT_LR_DECAY, gt=0.0)
    batch_size: int = Field(16, ge=1)
    lambda_refine: float = Field(DEFAULT_LAMBDA_REFINE, ge=0.0)
    optimizer: str = "adamw"
    weight_decay: float = Field(DEFAULT_WEIGHT_DECAY, ge=0.0)
    seed: int = 0
    num_workers: int = Field(0, ge=0)
    log_every: int = Field(10, ge=1)
    checkpoint_every: int = Field(1, ge=1)

    @field_validator("optimizer")
    @classmethod
    def _check_optimizer(cls, value: str) -> str:
        if value.lower() != "adamw":
            raise ValueError(f"only the 'adamw' optimizer is supported, got {value!r}")
        return value.lower()

    @model_validator(mode="after")
    def _check_milestones(self) -> "TrainConfig":
        milestones = self.lr_milestones
        if any(b <= a for a, b in zip(milestones, milestones[1:])):
            raise ValueError(f"lr milestones must be strictly increasing, got {milestones}")
        if milestones and (milestones[0] < 1 or milestones[-1] >= self.epochs):
            raise ValueError(
                f"lr milestones must lie in [1, epochs={self.epochs}), got {milestones}"
            )
        return self


class InferenceConfig(_Section):
    """Score map post-processing."""
    k_top: int = Field(DEFAULT_K_TOP, ge=1)
    sigma: float = Field(DEFAULT_SIGMA, ge=0.0)


class ExperimentConfig(_Section):
    """Complete configuration of a run."""
    backend: BackendConfig = BackendConfig()
    dataset: DatasetConfig = DatasetConfig()
    prompt: PromptConfig = PromptConfig()
    model: ModelConfig = ModelConfig()
    synthesis: SynthesisConfig = SynthesisConfig()
    train: TrainConfig = TrainConfig()
    inference: InferenceConfig = InferenceConfig()
    output_dir: str = DEFAULT_OUTPUT_DIR
    log_level: str = "INFO"


PRESETS: Dict[str, Dict[str, Any]] = {
    "mvtec": {
        "dataset": {"name": "mvtec"},
        "train": {
            "epochs": 800,
            "lr": 2e-4,
            "lr_milestones": [400, 700],
            "lr_decay": 0.2,
            "batch_size": 16,
        },
    },
    "visa": {
        "dataset": {"name": "visa"},
        "train": {
            "epochs": 500,
            "lr": 4e-4,
            "lr_milestones": [250],
            "lr_decay": 0.2,
            "batch_size": 64,
        },
    },
}


def _deep_merge(base: Dict[str, Any], update: Mapping[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _build(data: Mapping[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e


def preset_name(source: Union[str, Path]) -> Optional[str]:
    """Return the preset a source string refers to, if any."""
    name = Path(str(source)).stem.lower()
    return name if name in PRESETS else None


def preset(name: str) -> ExperimentConfig:
    """Build a built-in preset configuration."""
    key = name.lower()
    if key not in PRESETS:
        raise ConfigError(f"Unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}")
    return _build(PRESETS[key])


def _expand_dotted(overrides: Mapping[str, Any]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = nested
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return nested


def _merge_schedule(base: Mapping[str, Any], update: Mapping[str, Any]) -> Dict[str, Any]:
    """Deep-merge ``update``; new epochs without new milestones drop the milestones cut off."""
    data = _deep_merge(dict(base), update)
    train = update.get("train") or {}
    epochs = train.get("epochs") if isinstance(train, Mapping) else None
    if isinstance(epochs, int) and train.get("lr_milestones") is None:
        milestones = data.get("train", {}).get("lr_milestones", TrainConfig().lr_milestones)
        data.setdefault("train", {})["lr_milestones"] = [m for m in milestones if m < epochs]
    return data


def apply_overrides(config: ExperimentConfig, overrides: Mapping[str, Any]) -> ExperimentConfig:
    """
    Apply dotted-key overrides (``train.epochs``) and re-validate.

    Shortening ``train.epochs`` without new milestones drops the milestones it cuts off.
    """
    return _build(_merge_schedule(config.model_dump(mode="json"), _expand_dotted(overrides)))


def load_config(
    source: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> ExperimentConfig:
    """
    Load configuration from a YAML file or a preset name.

    A YAML file may name a ``preset`` key whose values it then overrides.
    Without a source the ``mvtec`` preset is used.
    """
    if source is None:
        data: Dict[str, Any] = PRESETS["mvtec"]
    elif Path(str(source)).is_file():
        try:
            with open(source, "r", encoding="utf-8") as f:
                loaded = yaml.safe_load(f) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"Could not read config file {source}: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"Config file {source} must contain a mapping")
        base_name = loaded.pop("preset", None)
        base = PRESETS[base_name] if base_name in PRESETS else {}
        if base_name is not None and base_name not in PRESETS:
            raise ConfigError(f"Unknown preset {base_name!r} in {source}")
        data = _merge_schedule(base, loaded)
    elif preset_name(source):
        data = PRESETS[preset_name(source)]
    else:
        raise ConfigError(f"Config {source} is neither a file nor a known preset")

    config = _build(data)
    env_cache = get_cache_dir_from_env()
    if env_cache and config.backend.cache_dir is None:
        config = apply_overrides(config, {"backend.cache_dir": env_cache})
    if overrides:
        config = apply_overrides(config, overrides)
    return config


def get_cache_dir_from_env() -> Optional[str]:
    """Weight cache location from the environment."""
    value = os.getenv(CACHE_ENV_VAR, "").strip()
    return value or None


def dump_config(config: ExperimentConfig) -> str:
    """Render a configuration as YAML."""
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False)


def lr_at_epoch(train: TrainConfig, epoch: int) -> float:
    """Step-decayed learning rate in effect during ``epoch`` (0-indexed)."""
    passed = sum(1 for m in train.lr_milestones if epoch >= m)
    return train.lr * train.lr_decay ** passed
