"""Text/patch similarity maps, alignment loss and the coarse-to-fine refinement stack."""

import logging
import math
from typing import List, Optional, Tuple

import torch
import torch.nn.functional as F  # noqa: N812
from torch import nn

from .backbone import ClipBackend
from .config import LOGIT_CLAMP, ExperimentConfig
from .prompting import LearnablePromptBank, PromptLearner, assemble, build_prompt_learner
from .types import BackendDescriptor, PatchFeatureMap, PromptTemplate, ShapeMismatchError, SimilarityMap

logger = logging.getLogger(__name__)

MapStack = Tuple[SimilarityMap, List[SimilarityMap]]


class ProjectionLayer(nn.Linear):
    """Affine map from raw encoder features (D_img) to the shared space (C)."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        stage_id: int,
        generator: Optional[torch.Generator] = None,
    ):
        super().__init__(in_features, out_features)
        self.stage_id = stage_id
        if generator is not None:
            bound = 1.0 / math.sqrt(in_features)
            with torch.no_grad():
                self.weight.copy_(torch.rand(self.weight.shape, generator=generator) * 2 * bound - bound)
                self.bias.copy_(torch.rand(self.bias.shape, generator=generator) * 2 * bound - bound)

    def extra_repr(self) -> str:
        return f"{super().extra_repr()}, stage_id={self.stage_id}"


class RefinementStack(nn.Module):
    """Projections Ψ_1..Ψ_N of the refinement stages; no weights are shared."""

    def __init__(self, projections: List[ProjectionLayer], detach_attention: bool = False):
        super().__init__()
        self.projections = nn.ModuleList(projections)
        self.detach_attention = detach_attention

    @property
    def depth(self) -> int:
        return len(self.projections)


def project(raw: PatchFeatureMap, proj: ProjectionLayer) -> PatchFeatureMap:
    """F = Ψ(F_clip)."""
    if raw.dim != proj.in_features:
        raise ShapeMismatchError(
            f"Feature dimension {raw.dim} does not match projection input {proj.in_features}"
        )
    return PatchFeatureMap(
        features=proj(raw.features),
        grid_side=raw.grid_side,
        stage_index=raw.stage_index,
    )


def similarity_map(features: PatchFeatureMap, text_embedding: torch.Tensor) -> SimilarityMap:
    """M = sigmoid(F · V^T), reshaped to (B, s_p, s_p)."""
    feats = features.features
    if feats.dim() == 2:
        feats = feats.unsqueeze(0)
    if text_embedding.dim() == 1:
        text_embedding = text_embedding.unsqueeze(0)
    if feats.shape[-1] != text_embedding.shape[-1]:
        raise ShapeMismatchError(
            f"Patch dimension {feats.shape[-1]} does not match text dimension {text_embedding.shape[-1]}"
        )
    if text_embedding.shape[0] != 1:
        raise ShapeMismatchError(f"Unified setting expects K=1, got K={text_embedding.shape[0]}")
    num_patches = feats.shape[1]
    side = math.isqrt(num_patches)
    if side * side != num_patches:
        raise ShapeMismatchError(f"{num_patches} patches do not form a square grid")

    logits = (feats @ text_embedding.t())[..., 0]
    return SimilarityMap.from_logits(logits.reshape(feats.shape[0], side, side))


def alignment_loss(similarity: SimilarityMap, target: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy between a map and its binary patch mask."""
    logits = similarity.logits
    if target.dim() == logits.dim() - 1:
        target = target.unsqueeze(0).expand_as(logits)
    if target.shape != logits.shape:
        raise ShapeMismatchError(
            f"Map shape {tuple(logits.shape)} does not match target shape {tuple(target.shape)}"
        )
    target = target.to(dtype=logits.dtype, device=logits.device)
    if not torch.all((target == 0) | (target == 1)):
        raise ValueError("Alignment target must be binary")
    return F.binary_cross_entropy_with_logits(
        logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP), target, reduction="mean"
    )


def upsample_map(values: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Bilinear resize of (B, s, s) maps to (B, 1, H, W)."""
    return F.interpolate(values.unsqueeze(1), size=(height, width), mode="bilinear", align_corners=False)


def refine_once(
    image: torch.Tensor,
    previous: SimilarityMap,
    backend: ClipBackend,
    proj: ProjectionLayer,
    text_embedding: torch.Tensor,
    detach_attention: bool = False,
) -> SimilarityMap:
    """Re-encode the image modulated by the previous map: I_e = up(M_prev) ⊙ I."""
    if image.dim() == 3:
        image = image.unsqueeze(0)
    attention = previous.values.detach() if detach_attention else previous.values
    height, width = image.shape[-2:]
    enhanced = upsample_map(attention, height, width).to(image.dtype) * image
    raw = backend.encode_image(enhanced)
    return similarity_map(project(raw, proj), text_embedding)


def forward_full(
    image: torch.Tensor,
    template: PromptTemplate,
    bank: LearnablePromptBank,
    stack: RefinementStack,
    *,
    backend: ClipBackend,
    coarse_projection: ProjectionLayer,
) -> MapStack:
    """Coarse map M_0 through Ψ_0 followed by one refined map per stage of the stack."""
    if image.dim() == 3:
        image = image.unsqueeze(0)
    text_embedding = backend.encode_text(assemble(template, bank))

    with torch.set_grad_enabled(torch.is_grad_enabled() and (backend.image_trainable or image.requires_grad)):
        raw = backend.encode_image(image)
    coarse = similarity_map(project(raw, coarse_projection), text_embedding)

    refined: List[SimilarityMap] = []
    previous = coarse
    for proj in stack.projections:
        previous = refine_once(
            image, previous, backend, proj, text_embedding,
            detach_attention=stack.detach_attention,
        )
        refined.append(previous)
    return coarse, refined


def final_map(maps: MapStack) -> SimilarityMap:
    """Map used for scoring: the last refined map, or M_0 without refinement."""
    coarse, refined = maps
    return refined[-1] if refined else coarse


class AnomalyAligner(nn.Module):
    """Frozen backend + prompt learner + projections Ψ_0..Ψ_N."""

    def __init__(
        self,
        backend: ClipBackend,
        prompt: PromptLearner,
        coarse_projection: ProjectionLayer,
        stack: RefinementStack,
    ):
        super().__init__()
        self.backend = backend
        self.prompt = prompt
        self.coarse_projection = coarse_projection
        self.stack = stack

    @property
    def n_refine(self) -> int:
        return self.stack.depth

    def projections(self) -> List[ProjectionLayer]:
        return [self.coarse_projection, *self.stack.projections]

    def trainable_parameters(self) -> List[nn.Parameter]:
        """Prompt vectors, projections and any unfrozen backbone weights."""
        params = [p for p in self.prompt.bank.parameters() if p.numel() > 0]
        for proj in self.projections():
            params.extend(proj.parameters())
        params.extend(p for p in self.backend.parameters() if p.requires_grad)
        return params

    def text_embedding(self) -> torch.Tensor:
        return self.prompt(self.backend)

    def forward(self, images: torch.Tensor) -> MapStack:
        return forward_full(
            images,
            self.prompt.template,
            self.prompt.bank,
            self.stack,
            backend=self.backend,
            coarse_projection=self.coarse_projection,
        )


def trainable_parameter_budget(
    descriptor: BackendDescriptor, prompt_length: int, n_refine: int, num_classes: int = 1
) -> int:
    """S·K·D + (N+1)·(D_img·C + C)."""
    per_projection = descriptor.raw_dim * descriptor.shared_dim + descriptor.shared_dim
    return prompt_length * num_classes * descriptor.text_token_dim + (n_refine + 1) * per_projection


def build_aligner(config: ExperimentConfig, backend: ClipBackend, seed: Optional[int] = None) -> AnomalyAligner:
    """Assemble the full model for a configuration."""
    seed = config.train.seed if seed is None else seed
    generator = torch.Generator().manual_seed(seed)
    descriptor = backend.descriptor
    prompt = build_prompt_learner(config.prompt, backend)
    coarse = ProjectionLayer(descriptor.raw_dim, descriptor.shared_dim, 0, generator)
    stages = [
        ProjectionLayer(descriptor.raw_dim, descriptor.shared_dim, i, generator)
        for i in range(1, config.model.n_refine + 1)
    ]
    stack = RefinementStack(stages, detach_attention=config.model.detach_attention)
    model = AnomalyAligner(backend, prompt, coarse, stack)
    logger.info(f"Model built with N={stack.depth} refinement stages")
    return model
