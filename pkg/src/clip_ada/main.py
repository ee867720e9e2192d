"""Main CLI entry point for clip-ada."""

import functools
import logging
import os
import sys
import traceback
from typing import Any, Callable, Dict, Optional, Tuple

import click

from .alignment import trainable_parameter_budget
from .backbone import describe_backend, load_backend
from .config import CACHE_ENV_VAR, ExperimentConfig, apply_overrides, dump_config, load_config
from .datasets import SyntheticTrainDataset, load_image, load_index
from .inference import predict_images, score_index
from .metrics import evaluate, format_table, write_report
from .synthesis import AnomalySynthesizer, sample_rng, save_preview
from .trainer import Checkpoint, Trainer, load_model, loss_curve
from .types import ConfigError, DatasetError, MissingScoreError, TrainingStatistics
from .utils import create_directory_if_not_exists, format_duration, format_number, setup_logging

logger = logging.getLogger(__name__)

EXIT_CONFIG_ERROR = 2
EXIT_DATA_ERROR = 3
EXIT_RUNTIME_ERROR = 4
EXIT_INTERRUPTED = 130

CONFIG_SNAPSHOT = "config.yaml"
PREVIEW_DIR = "synth_preview"


def guarded(func: Callable) -> Callable:
    """Map failures onto the exit-code contract."""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except KeyboardInterrupt:
            logger.info("Process interrupted by user")
            sys.exit(EXIT_INTERRUPTED)
        except ConfigError as e:
            click.echo(f"Configuration error: {e}", err=True)
            sys.exit(EXIT_CONFIG_ERROR)
        except (DatasetError, MissingScoreError, FileNotFoundError) as e:
            click.echo(f"Data error: {e}", err=True)
            sys.exit(EXIT_DATA_ERROR)
        except Exception as e:  # noqa: BLE001
            logger.error(f"Fatal error: {e}")
            if logging.getLogger().isEnabledFor(logging.DEBUG):
                traceback.print_exc()
            sys.exit(EXIT_RUNTIME_ERROR)
    return wrapper


def experiment_options(func: Callable) -> Callable:
    """Options shared by every subcommand that resolves a configuration."""
    options = [
        click.option("--config", "config_source", help="YAML file or preset name (mvtec, visa)"),
        click.option("--backend", help="Backend spec, e.g. toy:0 or pretrained:ViT-B-16/openai"),
        click.option("--dataset-root", type=click.Path(), help="Dataset root directory"),
        click.option("--fraction", type=float, help="Fraction of each category's train split"),
        click.option("--seed", type=int, help="Seed for data order, prompts and synthesis"),
        click.option("--n-refine", type=int, help="Number of refinement stages N"),
        click.option("--out-dir", type=click.Path(), help="Output directory"),
        click.option("--k-top", type=int, help="Top-K pixels averaged into the image score"),
        click.option("--sigma", type=float, help="Gaussian smoothing of score maps (pixels)"),
        click.option("--epochs", type=int, help="Training epochs"),
        click.option(
            "--log-level",
            default="INFO",
            type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"]),
            show_default=True,
            help="Logging level",
        ),
        click.option("--log-file", type=click.Path(), help="Log file path (optional)"),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def collect_overrides(params: Dict[str, Any]) -> Dict[str, Any]:
    """Translate CLI flags into dotted config overrides; unset flags are skipped."""
    seed = params.get("seed")
    return {
        "backend.spec": params.get("backend"),
        "dataset.root": params.get("dataset_root"),
        "dataset.fraction": params.get("fraction"),
        "dataset.seed": seed,
        "prompt.seed": seed,
        "synthesis.seed": seed,
        "train.seed": seed,
        "model.n_refine": params.get("n_refine"),
        "output_dir": params.get("out_dir"),
        "inference.k_top": params.get("k_top"),
        "inference.sigma": params.get("sigma"),
        "train.epochs": params.get("epochs"),
    }


def resolve_config(params: Dict[str, Any], base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    setup_logging(params.get("log_level", "INFO"), params.get("log_file"))
    overrides = collect_overrides(params)
    if base is not None:
        return apply_overrides(base, overrides)
    return load_config(params.get("config_source"), overrides)


@click.group()
def cli() -> None:
    """
    clip-ada - unified anomaly detection with learnable prompts on a frozen CLIP.

    Train on normal images with synthetic anomalies, evaluate I-AUC / P-AUC / P-mAP
    per category, and score new images with heatmap overlays.
    """


@cli.command()
@experiment_options
@click.option("--resume", "resume_path", type=click.Path(), help="Continue from a checkpoint")
@guarded
def train(resume_path: Optional[str], **params: Any) -> None:
    """Train the prompt bank and projection layers."""
    config = resolve_config(params)
    print_banner()
    print_config(config)

    backend = load_backend(config.backend)
    index = load_index(config.dataset)
    synthesizer = AnomalySynthesizer(config.synthesis, backend.descriptor.patch_size)
    dataset = SyntheticTrainDataset.from_index(
        index, synthesizer, config.dataset.image_size, seed=config.synthesis.seed
    )

    out_dir = config.output_dir
    create_directory_if_not_exists(out_dir)
    with open(os.path.join(out_dir, CONFIG_SNAPSHOT), "w", encoding="utf-8") as f:
        f.write(dump_config(config))

    trainer = Trainer(config, dataset, backend, out_dir)
    if resume_path:
        trainer.restore(Checkpoint.load(resume_path))
    trainer.fit()
    print_train_summary(trainer.stats, out_dir)


@cli.command(name="eval")
@experiment_options
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(), help="Trained checkpoint")
@guarded
def eval_command(checkpoint_path: str, **params: Any) -> None:
    """Evaluate a checkpoint on the test split; writes metrics.csv and metrics.txt."""
    checkpoint = Checkpoint.load(checkpoint_path)
    config = resolve_config(params, base=checkpoint.config)
    backend = load_backend(config.backend)
    model = load_model(checkpoint, backend)
    index = load_index(config.dataset)

    outputs = score_index(model, index.test_records(), config.inference, config.dataset.image_size)
    table = evaluate(outputs, index)
    paths = write_report(table, config.output_dir)
    click.echo("\n" + format_table(table))
    click.echo(f"\nMetrics written to {paths['csv']}")


@cli.command()
@experiment_options
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(), help="Trained checkpoint")
@click.argument("images", nargs=-1, required=True)
@guarded
def predict(checkpoint_path: str, images: Tuple[str, ...], **params: Any) -> None:
    """Score IMAGES; writes scores.csv and one heatmap overlay per image."""
    checkpoint = Checkpoint.load(checkpoint_path)
    config = resolve_config(params, base=checkpoint.config)
    backend = load_backend(config.backend)
    model = load_model(checkpoint, backend)
    frame = predict_images(model, list(images), config.inference, config.dataset.image_size, config.output_dir)
    for row in frame.itertuples(index=False):
        click.echo(f"{row.score:.6f}  {row.path}")


@cli.command(name="synth-preview")
@experiment_options
@click.option("--count", default=8, type=int, show_default=True, help="Number of samples to write")
@click.option("--force-anomalous", is_flag=True, help="Perturb every sample")
@guarded
def synth_preview(count: int, force_anomalous: bool, **params: Any) -> None:
    """Write image / mask / overlay triplets of synthesized training samples."""
    config = resolve_config(params)
    if count < 0:
        raise ConfigError(f"--count must be non-negative, got {count}")
    synthesis = config.synthesis
    if force_anomalous:
        synthesis = synthesis.model_copy(update={"anomaly_probability": 1.0})

    out_dir = os.path.join(config.output_dir, PREVIEW_DIR)
    if count == 0:
        click.echo("Nothing to write (count=0)")
        return

    sources = [r.path for r in load_index(config.dataset).train_records()]
    if not sources:
        raise DatasetError("Training split is empty")
    patch_size = describe_backend(config.backend).patch_size
    synthesizer = AnomalySynthesizer(synthesis, patch_size)
    written = 0
    for i in range(count):
        image = load_image(sources[i % len(sources)], config.dataset.image_size)
        sample = synthesizer(image, sample_rng(synthesis.seed, 0, i))
        save_preview(sample, out_dir, f"{i:04d}")
        written += 1
    click.echo(f"Wrote {written} sample triplets to {out_dir}")


@cli.command(name="inspect-config")
@experiment_options
@guarded
def inspect_config(**params: Any) -> None:
    """Print the resolved configuration and the trainable-parameter budget."""
    config = resolve_config(params)
    descriptor = describe_backend(config.backend)
    prompt_length = config.prompt.length if config.prompt.mode.value == "learnable" else 0
    budget = trainable_parameter_budget(descriptor, prompt_length, config.model.n_refine)
    click.echo(dump_config(config))
    click.echo(f"# backend dims: {descriptor}")
    click.echo(f"# trainable parameters: {format_number(budget)}")


def print_banner() -> None:
    """Print application banner."""
    banner = """
╔══════════════════════════════════════════════════════════════╗
║                          CLIP-ADA                            ║
║                                                              ║
║  Unified anomaly detection with learnable prompts on CLIP    ║
║  Synthetic-anomaly training, refinement, pixel heatmaps      ║
╚══════════════════════════════════════════════════════════════╝
    """
    click.echo(banner)


def print_config(config: ExperimentConfig) -> None:
    """Print current configuration."""
    click.echo("\nConfiguration:")
    click.echo(f"  Backend: {config.backend.spec} (stage {config.backend.feature_stage})")
    click.echo(f"  Dataset: {config.dataset.name} at {config.dataset.root} (fraction {config.dataset.fraction})")
    click.echo(f"  Prompt: {config.prompt.mode.value}, S={config.prompt.length}")
    click.echo(f"  Refinement stages: {config.model.n_refine}")
    click.echo(f"  Epochs: {config.train.epochs}, lr {config.train.lr}, milestones {config.train.lr_milestones}")
    click.echo(f"  Batch size: {config.train.batch_size}")
    click.echo(f"  Output directory: {config.output_dir}")
    click.echo(f"  Weight cache: {config.backend.cache_dir or f'default (set {CACHE_ENV_VAR} to change)'}")
    click.echo()


def print_train_summary(statistics: TrainingStatistics, output_dir: str) -> None:
    """Print final summary of a training run."""
    click.echo("\n" + "=" * 70)
    click.echo("TRAINING SUMMARY")
    click.echo("=" * 70)

    click.echo(f"Epochs completed: {format_number(statistics.epochs_completed)}")
    click.echo(f"Steps completed: {format_number(statistics.steps_completed)}")
    if statistics.initial_loss is not None:
        click.echo(f"Initial loss: {statistics.initial_loss:.5f}")
        click.echo(f"Final loss: {statistics.final_loss:.5f}")
    if statistics.history:
        curve = loss_curve(statistics.history)
        best = curve.loc[curve["loss"].idxmin()]
        click.echo(f"Best epoch loss: {best['loss']:.5f} (epoch {int(best['epoch']) + 1})")
    if statistics.start_time and statistics.end_time:
        click.echo(f"Total duration: {format_duration(statistics.duration_seconds)}")

    if os.path.exists(output_dir):
        click.echo(f"\nGenerated files in {output_dir}:")
        for filename in sorted(os.listdir(output_dir)):
            filepath = os.path.join(output_dir, filename)
            if os.path.isfile(filepath):
                size_mb = os.path.getsize(filepath) / (1024 * 1024)
                click.echo(f"  • {filename} ({size_mb:.2f} MB)")

    click.echo("\n" + "=" * 70)
    click.echo("Training completed successfully!")
    click.echo("=" * 70)


def main() -> None:
    cli()


if __name__ == "__main__":
    main()
