"""
Training loop for the prompt bank and projection layers.

Only the prompt vectors and projections Ψ_0..Ψ_N receive gradients (plus any
encoder explicitly unfrozen in the backend config). Data order is seeded per
epoch and each sample is synthesized from a (seed, epoch, index) generator, so
a checkpoint holding parameters, optimizer and scheduler state is enough to
continue a run exactly.
"""

import copy
import logging
import os
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd
import torch
from torch import nn
from torch.optim import AdamW, Optimizer
from torch.optim.lr_scheduler import MultiStepLR
from torch.utils.data import DataLoader
from tqdm import tqdm

from .alignment import AnomalyAligner, MapStack, alignment_loss, build_aligner
from .backbone import ClipBackend
from .config import CHECKPOINT_FILENAME, HISTORY_FILENAME, ExperimentConfig, TrainConfig
from .datasets import SyntheticTrainDataset
from .types import ClipAdaError, IncompatibleCheckpointError, TrainingDivergedError, TrainingStatistics
from .utils import create_directory_if_not_exists, format_duration, parameter_digest, set_seed

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


def total_loss(maps: MapStack, target: torch.Tensor, lambda_refine: float = 1.0) -> torch.Tensor:
    """L_align(M_0) + λ·Σ_t L_align(M_t)."""
    coarse, refined = maps
    loss = alignment_loss(coarse, target)
    if refined:
        loss = loss + lambda_refine * sum(alignment_loss(m, target) for m in refined)
    return loss


def build_optimizer(model: AnomalyAligner, config: TrainConfig) -> Optimizer:
    """AdamW; weight decay on projections and unfrozen encoder weights, none on prompt vectors."""
    prompt_params = [p for p in model.prompt.bank.parameters() if p.numel() > 0]
    decayed = [p for proj in model.projections() for p in proj.parameters()]
    decayed.extend(p for p in model.backend.parameters() if p.requires_grad)
    groups = [{"params": decayed, "weight_decay": config.weight_decay}]
    if prompt_params:
        groups.append({"params": prompt_params, "weight_decay": 0.0})
    return AdamW(groups, lr=config.lr)


def build_scheduler(optimizer: Optimizer, config: TrainConfig) -> MultiStepLR:
    """Step decay by ``lr_decay`` at each milestone epoch; stepped once per epoch."""
    return MultiStepLR(optimizer, milestones=list(config.lr_milestones), gamma=config.lr_decay)


def trainable_state(model: nn.Module) -> Dict[str, torch.Tensor]:
    """Copies of every parameter that receives gradients, by qualified name."""
    return {
        name: param.detach().cpu().clone()
        for name, param in model.named_parameters()
        if param.requires_grad
    }


def load_trainable_state(model: nn.Module, state: Dict[str, torch.Tensor]) -> None:
    expected = {name: p for name, p in model.named_parameters() if p.requires_grad}
    if set(expected) != set(state):
        missing = sorted(set(expected) - set(state))
        unexpected = sorted(set(state) - set(expected))
        raise IncompatibleCheckpointError(
            f"Checkpoint parameters do not match the model (missing={missing}, unexpected={unexpected})"
        )
    with torch.no_grad():
        for name, param in expected.items():
            if param.shape != state[name].shape:
                raise IncompatibleCheckpointError(
                    f"Parameter {name}: checkpoint shape {tuple(state[name].shape)}, "
                    f"model shape {tuple(param.shape)}"
                )
            param.copy_(state[name])


@dataclass
class Checkpoint:
    """Everything needed to rebuild a model and to continue its training run."""
    config: ExperimentConfig
    epoch: int
    step: int
    model_state: Dict[str, torch.Tensor]
    optimizer_state: Optional[Dict[str, Any]] = None
    scheduler_state: Optional[Dict[str, Any]] = None
    history: List[Dict[str, float]] = field(default_factory=list)
    backend_digest: Optional[str] = None
    format_version: int = CHECKPOINT_FORMAT_VERSION

    def save(self, path: str) -> str:
        create_directory_if_not_exists(os.path.dirname(path))
        payload = {
            "format_version": self.format_version,
            "config": self.config.model_dump(mode="json"),
            "epoch": self.epoch,
            "step": self.step,
            "model_state": self.model_state,
            "optimizer_state": self.optimizer_state,
            "scheduler_state": self.scheduler_state,
            "history": self.history,
            "backend_digest": self.backend_digest,
        }
        torch.save(payload, path)
        logger.info(f"Checkpoint saved: {path} (epoch {self.epoch})")
        return path

    @classmethod
    def load(cls, path: str) -> "Checkpoint":
        if not os.path.isfile(path):
            raise FileNotFoundError(f"Checkpoint not found: {path}")
        payload = torch.load(path, map_location="cpu", weights_only=False)
        version = payload.get("format_version")
        if version != CHECKPOINT_FORMAT_VERSION:
            raise IncompatibleCheckpointError(
                f"Checkpoint format {version} is not supported (expected {CHECKPOINT_FORMAT_VERSION})"
            )
        return cls(
            config=ExperimentConfig.model_validate(payload["config"]),
            epoch=payload["epoch"],
            step=payload["step"],
            model_state=payload["model_state"],
            optimizer_state=payload.get("optimizer_state"),
            scheduler_state=payload.get("scheduler_state"),
            history=list(payload.get("history", [])),
            backend_digest=payload.get("backend_digest"),
        )

    @property
    def n_refine(self) -> int:
        return self.config.model.n_refine


def _check_compatible(checkpoint: Checkpoint, config: ExperimentConfig, backend: ClipBackend) -> None:
    saved = checkpoint.config
    mismatches = []
    if saved.model.n_refine != config.model.n_refine:
        mismatches.append(f"n_refine {saved.model.n_refine} != {config.model.n_refine}")
    if saved.prompt.length != config.prompt.length or saved.prompt.mode != config.prompt.mode:
        mismatches.append("prompt bank shape")
    if saved.prompt.template != config.prompt.template:
        mismatches.append("prompt template")
    if saved.backend.spec != backend.spec:
        mismatches.append(f"backend {saved.backend.spec} != {backend.spec}")
    if mismatches:
        raise IncompatibleCheckpointError(f"Checkpoint incompatible: {'; '.join(mismatches)}")


def load_model(checkpoint: Checkpoint, backend: ClipBackend) -> AnomalyAligner:
    """Rebuild the trained model on a backend."""
    _check_compatible(checkpoint, checkpoint.config, backend)
    model = build_aligner(checkpoint.config, backend)
    load_trainable_state(model, checkpoint.model_state)
    model.eval()
    return model


class Trainer:
    """Runs epochs over a synthetic training stream and keeps run statistics."""

    def __init__(
        self,
        config: ExperimentConfig,
        dataset: SyntheticTrainDataset,
        backend: ClipBackend,
        out_dir: Optional[str] = None,
    ):
        self.config = config
        self.dataset = dataset
        self.backend = backend
        self.out_dir = out_dir
        self.stats = TrainingStatistics()

        set_seed(config.train.seed)
        self.model = build_aligner(config, backend)
        self.optimizer = build_optimizer(self.model, config.train)
        self.scheduler = build_scheduler(self.optimizer, config.train)
        self.epoch = 0
        self.step = 0
        self.history: List[Dict[str, float]] = []

    def restore(self, checkpoint: Checkpoint) -> None:
        """Load parameters, optimizer and scheduler state from a checkpoint."""
        _check_compatible(checkpoint, self.config, self.backend)
        load_trainable_state(self.model, checkpoint.model_state)
        if checkpoint.optimizer_state is not None:
            self.optimizer.load_state_dict(checkpoint.optimizer_state)
        if checkpoint.scheduler_state is not None:
            self.scheduler.load_state_dict(checkpoint.scheduler_state)
        self.epoch = checkpoint.epoch
        self.step = checkpoint.step
        self.history = list(checkpoint.history)
        logger.info(f"Resumed from epoch {self.epoch} (step {self.step})")

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            config=self.config,
            epoch=self.epoch,
            step=self.step,
            model_state=trainable_state(self.model),
            optimizer_state=self.optimizer.state_dict(),
            scheduler_state=self.scheduler.state_dict(),
            history=list(self.history),
            backend_digest=parameter_digest(self.backend),
        )

    def _loader(self, epoch: int) -> DataLoader:
        self.dataset.set_epoch(epoch)
        generator = torch.Generator().manual_seed(self.config.train.seed + epoch)
        return DataLoader(
            self.dataset,
            batch_size=self.config.train.batch_size,
            shuffle=True,
            generator=generator,
            num_workers=self.config.train.num_workers,
        )

    def _train_epoch(self, epoch: int) -> float:
        self.model.train()
        lam = self.config.train.lambda_refine
        losses = []
        for batch in self._loader(epoch):
            maps = self.model(batch["image"])
            loss = total_loss(maps, batch["mask_patch"], lam)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"Non-finite loss at epoch {epoch}, step {self.step}")

            self.optimizer.zero_grad(set_to_none=True)
            loss.backward()
            self.optimizer.step()

            value = float(loss.detach())
            losses.append(value)
            lr = self.optimizer.param_groups[0]["lr"]
            self.history.append({"epoch": epoch, "step": self.step, "loss": value, "lr": lr})
            if self.stats.initial_loss is None:
                self.stats.initial_loss = value
            self.stats.final_loss = value
            self.stats.steps_completed += 1
            if self.step % self.config.train.log_every == 0:
                logger.debug(f"epoch {epoch} step {self.step}: loss {value:.5f} lr {lr:.2e}")
            self.step += 1

        self.scheduler.step()
        return sum(losses) / max(len(losses), 1)

    def fit(self, until_epoch: Optional[int] = None) -> Checkpoint:
        """
        Train up to ``until_epoch`` (default: the configured epoch count).

        With an ``out_dir`` the run is saved every ``train.checkpoint_every``
        epochs. An interrupt or a diverged loss saves the last completed epoch
        before the exception propagates, so ``--resume`` can pick it up.
        """
        target = self.config.train.epochs if until_epoch is None else min(until_epoch, self.config.train.epochs)
        self.stats.start_time = datetime.now()
        if self.epoch >= target:
            logger.info(f"Nothing to do: already at epoch {self.epoch} of {target}")
            self.stats.end_time = datetime.now()
            return self.checkpoint()

        frozen = not (self.backend.text_trainable or self.backend.image_trainable)
        digest_before = parameter_digest(self.backend) if frozen else None
        every = self.config.train.checkpoint_every
        last_complete: Optional[Checkpoint] = None
        saved_epoch = self.epoch

        progress = tqdm(range(self.epoch, target), desc="Training", unit="epoch", initial=self.epoch,
                        total=target)
        try:
            for epoch in progress:
                mean_loss = self._train_epoch(epoch)
                self.epoch = epoch + 1
                self.stats.epochs_completed += 1
                progress.set_postfix(loss=f"{mean_loss:.4f}", lr=f"{self.optimizer.param_groups[0]['lr']:.1e}")
                logger.info(f"Epoch {self.epoch}/{target}: mean loss {mean_loss:.5f}")
                if not self.out_dir or self.epoch >= target:
                    continue
                # optimizer state tensors are updated in place by later steps
                last_complete = copy.deepcopy(self.checkpoint())
                if self.epoch % every == 0:
                    self.write_artifacts(last_complete)
                    saved_epoch = self.epoch
        except (KeyboardInterrupt, TrainingDivergedError):
            if last_complete is not None and last_complete.epoch > saved_epoch:
                logger.warning(f"Training stopped; saving epoch {last_complete.epoch} for --resume")
                self.write_artifacts(last_complete)
            raise

        if frozen and parameter_digest(self.backend) != digest_before:
            raise ClipAdaError("Frozen backbone parameters changed during training")

        self.stats.end_time = datetime.now()
        self.stats.history = list(self.history)
        logger.info(
            f"Training finished: {self.stats.steps_completed} steps in "
            f"{format_duration(self.stats.duration_seconds)}"
        )
        checkpoint = self.checkpoint()
        if self.out_dir:
            self.write_artifacts(checkpoint)
        return checkpoint

    def write_artifacts(self, checkpoint: Checkpoint) -> Dict[str, str]:
        """Checkpoint and its per-step history CSV under ``out_dir``."""
        create_directory_if_not_exists(self.out_dir)
        paths = {
            "checkpoint": checkpoint.save(os.path.join(self.out_dir, CHECKPOINT_FILENAME)),
            "history": os.path.join(self.out_dir, HISTORY_FILENAME),
        }
        pd.DataFrame(checkpoint.history, columns=["epoch", "step", "loss", "lr"]).to_csv(
            paths["history"], index=False
        )
        return paths


def train(
    config: ExperimentConfig,
    dataset: SyntheticTrainDataset,
    backend: ClipBackend,
    until_epoch: Optional[int] = None,
    out_dir: Optional[str] = None,
) -> Checkpoint:
    """Train from scratch."""
    return Trainer(config, dataset, backend, out_dir).fit(until_epoch)


def resume(
    checkpoint: Checkpoint,
    dataset: SyntheticTrainDataset,
    backend: ClipBackend,
    config: Optional[ExperimentConfig] = None,
    until_epoch: Optional[int] = None,
    out_dir: Optional[str] = None,
) -> Checkpoint:
    """Continue a run from its checkpoint; a finished run is returned unchanged."""
    config = checkpoint.config if config is None else config
    trainer = Trainer(config, dataset, backend, out_dir)
    trainer.restore(checkpoint)
    if trainer.epoch >= config.train.epochs:
        logger.info("Checkpoint already at its final epoch")
        return checkpoint
    return trainer.fit(until_epoch)


def loss_curve(history: Sequence[Dict[str, float]]) -> pd.DataFrame:
    """Mean loss and learning rate per epoch from a step history."""
    frame = pd.DataFrame(list(history), columns=["epoch", "step", "loss", "lr"])
    return frame.groupby("epoch").agg(loss=("loss", "mean"), lr=("lr", "first")).reset_index()
