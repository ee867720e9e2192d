"""
Frozen vision-language encoders behind one interface.

Two implementations are provided:
- PretrainedClipBackend wraps an open_clip model and taps the output of an
  intermediate transformer block of the image tower.
- ToyBackend is a seeded two-layer encoder pair with the same interface, small
  enough to train the whole pipeline on a CPU in seconds.
"""

import logging
import re
import zlib
from abc import ABC, abstractmethod
from typing import Iterator, List, Optional, Tuple

import torch
from torch import nn

from .config import BackendConfig
from .types import (
    BackendDescriptor,
    ConfigError,
    ContextOverflowError,
    PatchFeatureMap,
    PromptAssembly,
    ShapeMismatchError,
    TokenizationError,
)

logger = logging.getLogger(__name__)

TOY_DESCRIPTOR = BackendDescriptor(
    patch_size=16,
    feature_stage=2,
    raw_dim=32,
    shared_dim=16,
    text_token_dim=16,
)


class ClipBackend(nn.Module, ABC):
    """Image/text encoder pair whose weights are frozen unless explicitly unfrozen."""

    def __init__(self, descriptor: BackendDescriptor, context_length: int, spec: str):
        super().__init__()
        self.descriptor = descriptor
        self.context_length = context_length
        self.spec = spec

    # Interface

    @abstractmethod
    def tokenize(self, text: str) -> List[int]:
        """Token ids including start and end markers, without padding."""

    @abstractmethod
    def embed_tokens(self, token_ids: List[int]) -> torch.Tensor:
        """Token embedding lookup, shape (L, D)."""

    @abstractmethod
    def _encode_patches(self, images: torch.Tensor) -> torch.Tensor:
        """Stage features without class token, shape (B, N_p, D_img)."""

    @abstractmethod
    def _encode_sequence(self, sequence: torch.Tensor, eot_index: int) -> torch.Tensor:
        """Text tower on embedded sequences (K, n, D), shape (K, C)."""

    @abstractmethod
    def image_encoder_parameters(self) -> Iterator[nn.Parameter]:
        ...

    @abstractmethod
    def text_encoder_parameters(self) -> Iterator[nn.Parameter]:
        ...

    # Shared behaviour

    def encode_image(self, images: torch.Tensor) -> PatchFeatureMap:
        """Encode (B, 3, H, W) or (3, H, W) images in [0, 1] into raw patch features."""
        if images.dim() == 3:
            images = images.unsqueeze(0)
        if images.dim() != 4 or images.shape[1] != 3:
            raise ShapeMismatchError(f"Expected images of shape (B, 3, H, W), got {tuple(images.shape)}")
        height, width = images.shape[-2:]
        grid_side = self.descriptor.grid_side(height, width)
        features = self._encode_patches(images)
        return PatchFeatureMap(
            features=features,
            grid_side=grid_side,
            stage_index=self.descriptor.feature_stage,
        )

    def encode_text(self, assembly: PromptAssembly) -> torch.Tensor:
        """Text embedding V of shape (K, C); differentiable w.r.t. the assembly."""
        if assembly.length > self.context_length:
            raise ContextOverflowError(
                f"Prompt of {assembly.length} tokens exceeds context length {self.context_length}"
            )
        if assembly.sequence.shape[-1] != self.descriptor.text_token_dim:
            raise ShapeMismatchError(
                f"Token dimension {assembly.sequence.shape[-1]} does not match "
                f"text_token_dim {self.descriptor.text_token_dim}"
            )
        return self._encode_sequence(assembly.sequence, assembly.eot_index)

    def set_trainable(self, text: bool = False, image: bool = False) -> None:
        """Freeze or unfreeze each encoder."""
        for param in self.text_encoder_parameters():
            param.requires_grad_(text)
        for param in self.image_encoder_parameters():
            param.requires_grad_(image)
        if text or image:
            logger.warning(f"Backbone unfrozen (text={text}, image={image})")

    @property
    def image_trainable(self) -> bool:
        return any(p.requires_grad for p in self.image_encoder_parameters())

    @property
    def text_trainable(self) -> bool:
        return any(p.requires_grad for p in self.text_encoder_parameters())

    def train(self, mode: bool = True) -> "ClipBackend":
        # Encoders always run deterministically.
        return super().train(False)


class ToyTokenizer:
    """Deterministic word-hashing tokenizer."""

    SOT = 1
    EOT = 2
    _FIRST_WORD_ID = 3

    def __init__(self, vocab_size: int):
        self.vocab_size = vocab_size

    def __call__(self, text: str) -> List[int]:
        if not text.isascii():
            raise TokenizationError(f"Toy tokenizer only encodes ASCII text: {text!r}")
        words = re.findall(r"[a-z0-9]+", text.lower())
        if not words:
            raise TokenizationError(f"No tokens in text: {text!r}")
        span = self.vocab_size - self._FIRST_WORD_ID
        ids = [self._FIRST_WORD_ID + zlib.crc32(w.encode("ascii")) % span for w in words]
        return [self.SOT] + ids + [self.EOT]


class ToyBackend(ClipBackend):
    """Seeded two-layer encoder pair; translation invariant over patches."""

    depth = 2

    def __init__(
        self,
        seed: int = 0,
        dims: BackendDescriptor = TOY_DESCRIPTOR,
        vocab_size: int = 512,
        context_length: int = 77,
        text_hidden: int = 32,
    ):
        super().__init__(dims, context_length, spec=f"toy:{seed}")
        if not 1 <= dims.feature_stage <= self.depth:
            raise ConfigError(
                f"Toy encoder has {self.depth} stages, feature_stage={dims.feature_stage}"
            )
        self.seed = seed
        self.tokenizer = ToyTokenizer(vocab_size)
        generator = torch.Generator().manual_seed(seed)

        def init(*shape: int, std: float) -> nn.Parameter:
            return nn.Parameter(torch.randn(*shape, generator=generator) * std)

        patch_dim = 3 * dims.patch_size ** 2
        d, c = dims.text_token_dim, dims.shared_dim

        self.token_embedding = init(vocab_size, d, std=0.1)
        self.text_positional = init(context_length, d, std=0.01)
        self.text_w1 = init(d, text_hidden, std=d ** -0.5)
        self.text_b1 = init(text_hidden, std=0.1)
        self.text_w2 = init(text_hidden, c, std=text_hidden ** -0.5)
        self.text_b2 = init(c, std=0.1)

        self.image_w1 = init(patch_dim, dims.raw_dim, std=patch_dim ** -0.5)
        self.image_b1 = init(dims.raw_dim, std=0.1)
        self.image_w2 = init(dims.raw_dim, dims.raw_dim, std=dims.raw_dim ** -0.5)
        self.image_b2 = init(dims.raw_dim, std=0.1)

        self.set_trainable(False, False)

    def tokenize(self, text: str) -> List[int]:
        return self.tokenizer(text)

    def embed_tokens(self, token_ids: List[int]) -> torch.Tensor:
        return self.token_embedding[torch.as_tensor(token_ids, dtype=torch.long)]

    def _patchify(self, images: torch.Tensor) -> torch.Tensor:
        s = self.descriptor.patch_size
        patches = nn.functional.unfold(images, kernel_size=s, stride=s)  # (B, 3*s*s, N_p)
        return patches.transpose(1, 2)

    def _encode_patches(self, images: torch.Tensor) -> torch.Tensor:
        x = torch.tanh(self._patchify(images) @ self.image_w1 + self.image_b1)
        if self.descriptor.feature_stage >= 2:
            x = torch.tanh(x @ self.image_w2 + self.image_b2)
        return x

    def _encode_sequence(self, sequence: torch.Tensor, eot_index: int) -> torch.Tensor:
        x = sequence + self.text_positional[: sequence.shape[1]]
        hidden = torch.tanh(x @ self.text_w1 + self.text_b1)
        return hidden.mean(dim=1) @ self.text_w2 + self.text_b2

    def image_encoder_parameters(self) -> Iterator[nn.Parameter]:
        return iter([self.image_w1, self.image_b1, self.image_w2, self.image_b2])

    def text_encoder_parameters(self) -> Iterator[nn.Parameter]:
        return iter([
            self.token_embedding, self.text_positional,
            self.text_w1, self.text_b1, self.text_w2, self.text_b2,
        ])


class PretrainedClipBackend(ClipBackend):
    """open_clip ViT with features tapped after an intermediate block."""

    def __init__(
        self,
        model_name: str = "ViT-B-16",
        pretrained: str = "openai",
        feature_stage: int = 7,
        cache_dir: Optional[str] = None,
    ):
        import open_clip
        from open_clip.constants import OPENAI_DATASET_MEAN, OPENAI_DATASET_STD

        logger.info(f"Loading pretrained CLIP {model_name}/{pretrained}")
        model, _, _ = open_clip.create_model_and_transforms(
            model_name, pretrained=pretrained, cache_dir=cache_dir
        )
        visual = model.visual
        depth = len(visual.transformer.resblocks)
        if not 1 <= feature_stage <= depth:
            raise ConfigError(f"feature_stage {feature_stage} outside encoder depth {depth}")

        patch = visual.patch_size
        descriptor = BackendDescriptor(
            patch_size=patch[0] if isinstance(patch, tuple) else int(patch),
            feature_stage=feature_stage,
            raw_dim=visual.transformer.width,
            shared_dim=self._text_output_dim(model),
            text_token_dim=model.token_embedding.embedding_dim,
        )
        super().__init__(
            descriptor,
            context_length=model.context_length,
            spec=f"pretrained:{model_name}/{pretrained}",
        )
        self.model = model
        self.tokenizer = open_clip.get_tokenizer(model_name)
        self.register_buffer("pixel_mean", torch.tensor(OPENAI_DATASET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("pixel_std", torch.tensor(OPENAI_DATASET_STD).view(1, 3, 1, 1))
        self.set_trainable(False, False)

    @staticmethod
    def _text_output_dim(model: nn.Module) -> int:
        projection = model.text_projection
        if isinstance(projection, nn.Linear):
            return projection.out_features
        return projection.shape[1]

    def tokenize(self, text: str) -> List[int]:
        if not text.strip():
            raise TokenizationError("Empty template text")
        try:
            ids = self.tokenizer([text])[0]
        except Exception as e:
            raise TokenizationError(f"Could not tokenize {text!r}: {e}") from e
        length = int((ids != 0).sum())
        return ids[:length].tolist()

    def embed_tokens(self, token_ids: List[int]) -> torch.Tensor:
        ids = torch.as_tensor(token_ids, dtype=torch.long, device=self.pixel_mean.device)
        return self.model.token_embedding(ids)

    @staticmethod
    def _run_blocks(transformer: nn.Module, x: torch.Tensor, blocks, attn_mask=None) -> torch.Tensor:
        batch_first = getattr(transformer, "batch_first", False)
        if not batch_first:
            x = x.permute(1, 0, 2)
        for block in blocks:
            x = block(x, attn_mask=attn_mask)
        if not batch_first:
            x = x.permute(1, 0, 2)
        return x

    def _encode_patches(self, images: torch.Tensor) -> torch.Tensor:
        visual = self.model.visual
        x = (images - self.pixel_mean) / self.pixel_std
        x = visual.conv1(x)
        x = x.reshape(x.shape[0], x.shape[1], -1).permute(0, 2, 1)
        cls = visual.class_embedding.to(x.dtype) + torch.zeros(
            x.shape[0], 1, x.shape[-1], dtype=x.dtype, device=x.device
        )
        x = torch.cat([cls, x], dim=1)
        if x.shape[1] != visual.positional_embedding.shape[0]:
            raise ShapeMismatchError(
                f"{x.shape[1] - 1} patches do not match the positional embedding of the encoder"
            )
        x = x + visual.positional_embedding.to(x.dtype)
        x = visual.ln_pre(x)
        blocks = visual.transformer.resblocks[: self.descriptor.feature_stage]
        x = self._run_blocks(visual.transformer, x, blocks)
        return x[:, 1:, :]

    def _encode_sequence(self, sequence: torch.Tensor, eot_index: int) -> torch.Tensor:
        model = self.model
        n = sequence.shape[1]
        x = sequence + model.positional_embedding[:n].to(sequence.dtype)
        attn_mask = model.attn_mask[:n, :n] if model.attn_mask is not None else None
        x = self._run_blocks(model.transformer, x, model.transformer.resblocks, attn_mask)
        x = model.ln_final(x)
        x = x[:, eot_index, :]
        projection = model.text_projection
        if isinstance(projection, nn.Linear):
            return projection(x)
        return x @ projection

    def image_encoder_parameters(self) -> Iterator[nn.Parameter]:
        return self.model.visual.parameters()

    def text_encoder_parameters(self) -> Iterator[nn.Parameter]:
        visual_ids = {id(p) for p in self.model.visual.parameters()}
        return (p for p in self.model.parameters() if id(p) not in visual_ids)


def make_toy_backend(seed: int = 0, dims: BackendDescriptor = TOY_DESCRIPTOR) -> ToyBackend:
    """Fixed-seed toy encoder pair."""
    return ToyBackend(seed=seed, dims=dims)


def parse_backend_spec(spec: str) -> Tuple[str, str]:
    """Split ``toy:0`` / ``pretrained:ViT-B-16/openai`` into kind and argument."""
    kind, _, argument = spec.partition(":")
    if kind not in ("toy", "pretrained") or not argument:
        raise ConfigError(f"Invalid backend spec {spec!r}")
    return kind, argument


def load_backend(config: BackendConfig, toy_dims: BackendDescriptor = TOY_DESCRIPTOR) -> ClipBackend:
    """Build the backend a configuration selects."""
    kind, argument = parse_backend_spec(config.spec)
    if kind == "toy":
        backend: ClipBackend = make_toy_backend(int(argument), toy_dims)
    else:
        model_name, _, weights = argument.partition("/")
        backend = PretrainedClipBackend(
            model_name=model_name,
            pretrained=weights or "openai",
            feature_stage=config.feature_stage,
            cache_dir=config.cache_dir,
        )
    backend.set_trainable(config.tune_text_encoder, config.tune_image_encoder)
    logger.info(f"Backend {backend.spec} ready: {backend.descriptor}")
    return backend


def describe_backend(config: BackendConfig, toy_dims: BackendDescriptor = TOY_DESCRIPTOR) -> BackendDescriptor:
    """Descriptor of the configured backend, read from the model config without loading weights."""
    kind, argument = parse_backend_spec(config.spec)
    if kind == "toy":
        return toy_dims

    import open_clip

    model_name = argument.partition("/")[0]
    model_cfg = open_clip.get_model_config(model_name)
    if model_cfg is None:
        raise ConfigError(f"Unknown open_clip model {model_name!r}")
    vision, text = model_cfg["vision_cfg"], model_cfg["text_cfg"]
    return BackendDescriptor(
        patch_size=int(vision["patch_size"]),
        feature_stage=config.feature_stage,
        raw_dim=int(vision["width"]),
        shared_dim=int(model_cfg["embed_dim"]),
        text_token_dim=int(text["width"]),
    )
