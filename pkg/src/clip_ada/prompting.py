"""Text branch: template embeddings with learnable prompt vectors spliced in."""

import logging
from typing import Optional

import torch
from torch import nn

from .backbone import ClipBackend
from .config import DEFAULT_PROMPT_INIT_STD, DEFAULT_TEMPLATE_PREFIX, PromptConfig
from .types import PromptAssembly, PromptMode, PromptTemplate, ShapeMismatchError

logger = logging.getLogger(__name__)


class LearnablePromptBank(nn.Module):
    """S learnable vectors of shape (K, D) inserted after template slot ``insert_position``."""

    def __init__(self, vectors: torch.Tensor, insert_position: int = 0):
        super().__init__()
        if vectors.dim() != 3:
            raise ShapeMismatchError(f"Prompt vectors must be (S, K, D), got {tuple(vectors.shape)}")
        if insert_position < 0:
            raise ValueError(f"Insert position must be non-negative, got {insert_position}")
        self.vectors = nn.Parameter(vectors)
        self.insert_position = insert_position

    @classmethod
    def empty(cls, num_classes: int, dim: int, insert_position: int = 0) -> "LearnablePromptBank":
        """Bank without learnable slots (fixed-prompt mode)."""
        return cls(torch.zeros(0, num_classes, dim), insert_position)

    @property
    def length(self) -> int:
        return self.vectors.shape[0]

    def extra_repr(self) -> str:
        s, k, d = self.vectors.shape
        return f"S={s}, K={k}, D={d}, insert_position={self.insert_position}"


def build_template(text: str, backend: ClipBackend, num_classes: int = 1) -> PromptTemplate:
    """Tokenize and embed a template; embeddings carry no gradient."""
    if not text or not text.strip():
        raise ValueError("Template text must not be empty")
    token_ids = backend.tokenize(text)
    with torch.no_grad():
        embedded = backend.embed_tokens(token_ids).detach().clone()
    embedded = embedded.unsqueeze(0).expand(num_classes, -1, -1).contiguous()
    logger.debug(f"Template {text!r} -> {len(token_ids)} tokens")
    return PromptTemplate(
        text=text,
        token_ids=list(token_ids),
        embedded=embedded,
        eot_index=len(token_ids) - 1,
    )


def default_insert_position(backend: ClipBackend, prefix: str = DEFAULT_TEMPLATE_PREFIX) -> int:
    """Index of the last token of ``prefix``, so prompts stand where the class word was."""
    return len(backend.tokenize(prefix)) - 2


def init_prompt_bank(
    prompt_length: int,
    num_classes: int,
    dim: int,
    seed: int,
    std: float = DEFAULT_PROMPT_INIT_STD,
    insert_position: int = 0,
) -> LearnablePromptBank:
    """Draw prompt vectors i.i.d. from N(0, std^2) with a fixed seed."""
    if prompt_length < 1:
        raise ValueError(f"Prompt length must be at least 1, got {prompt_length}")
    generator = torch.Generator().manual_seed(seed)
    vectors = torch.randn(prompt_length, num_classes, dim, generator=generator) * std
    return LearnablePromptBank(vectors, insert_position)


def assemble(template: PromptTemplate, bank: LearnablePromptBank) -> PromptAssembly:
    """[t'_0..t'_x, P_0..P_{S-1}, t'_{x+1}..t'_{L-1}]; x = L appends."""
    x = bank.insert_position
    length = template.length
    if x > length:
        raise ValueError(f"Insert position {x} out of range for template of length {length}")

    prompts = bank.vectors.permute(1, 0, 2)  # (K, S, D)
    embedded = template.embedded.to(dtype=prompts.dtype, device=prompts.device)
    if embedded.shape[0] != prompts.shape[0] or embedded.shape[2] != prompts.shape[2]:
        raise ShapeMismatchError(
            f"Template {tuple(embedded.shape)} and prompts {tuple(prompts.shape)} disagree"
        )

    split = min(x + 1, length)
    sequence = torch.cat([embedded[:, :split], prompts, embedded[:, split:]], dim=1)
    s = bank.length
    eot_index = template.eot_index + s if template.eot_index >= split else template.eot_index
    return PromptAssembly(
        sequence=sequence,
        learnable_slots=tuple(range(split, split + s)),
        eot_index=eot_index,
    )


class PromptLearner(nn.Module):
    """Holds the template embeddings and the prompt bank; produces the text embedding V."""

    def __init__(self, template: PromptTemplate, bank: LearnablePromptBank):
        super().__init__()
        self.text = template.text
        self.token_ids = list(template.token_ids)
        self.eot_index = template.eot_index
        self.register_buffer("template_embedded", template.embedded.clone())
        self.bank = bank

    @property
    def template(self) -> PromptTemplate:
        return PromptTemplate(
            text=self.text,
            token_ids=self.token_ids,
            embedded=self.template_embedded,
            eot_index=self.eot_index,
        )

    def assemble(self) -> PromptAssembly:
        return assemble(self.template, self.bank)

    def forward(self, backend: ClipBackend) -> torch.Tensor:
        return backend.encode_text(self.assemble())


def build_prompt_learner(
    config: PromptConfig,
    backend: ClipBackend,
    num_classes: int = 1,
    insert_position: Optional[int] = None,
) -> PromptLearner:
    """Prompt learner for a configuration and backend."""
    template = build_template(config.template, backend, num_classes)
    if insert_position is None:
        insert_position = config.insert_position
    if insert_position is None:
        insert_position = default_insert_position(backend)
    dim = backend.descriptor.text_token_dim
    if config.mode is PromptMode.FIXED:
        bank = LearnablePromptBank.empty(num_classes, dim, insert_position)
    else:
        bank = init_prompt_bank(
            config.length, num_classes, dim, config.seed,
            std=config.init_std, insert_position=insert_position,
        )
    logger.info(
        f"Prompt: {template.length} template tokens, {bank.length} learnable, x={insert_position}"
    )
    return PromptLearner(template, bank)
