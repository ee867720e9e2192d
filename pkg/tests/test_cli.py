"""End-to-end tests of the command-line interface."""

import os
import tempfile

import numpy as np
import pandas as pd
import pytest
import yaml
from click.testing import CliRunner
from PIL import Image

from src.clip_ada.backbone import load_backend
from src.clip_ada.datasets import load_index
from src.clip_ada.inference import score_index
from src.clip_ada.main import cli
from src.clip_ada.metrics import evaluate
from src.clip_ada.trainer import Checkpoint, Trainer, load_model
from tests.helpers import make_folder_tree

RUN_CONFIG = {
    "preset": "mvtec",
    "backend": {"spec": "toy:0"},
    "dataset": {"name": "folder", "image_size": 32},
    "prompt": {"length": 2},
    "model": {"n_refine": 1},
    "train": {"epochs": 2, "lr": 1e-2, "lr_milestones": [], "batch_size": 2},
    "inference": {"k_top": 8, "sigma": 1.0},
}


@pytest.fixture
def workspace():
    """Folder dataset, run config and output directory in one temporary tree."""
    with tempfile.TemporaryDirectory() as tmpdir:
        data = os.path.join(tmpdir, "data")
        written = make_folder_tree(data)
        config_path = os.path.join(tmpdir, "run.yaml")
        with open(config_path, "w") as f:
            yaml.safe_dump(RUN_CONFIG, f)
        yield {
            "root": tmpdir,
            "data": data,
            "config": config_path,
            "out": os.path.join(tmpdir, "out"),
            "written": written,
        }


def run(*args):
    return CliRunner().invoke(cli, list(args))


def train_run(ws, *extra):
    return run("train", "--config", ws["config"], "--dataset-root", ws["data"], "--out-dir", ws["out"], *extra)


def test_train_writes_checkpoint_and_history(workspace):
    result = train_run(workspace)
    assert result.exit_code == 0, result.output
    assert os.path.exists(os.path.join(workspace["out"], "checkpoint.pt"))
    assert os.path.exists(os.path.join(workspace["out"], "config.yaml"))
    history = pd.read_csv(os.path.join(workspace["out"], "train_history.csv"))
    assert len(history) == 2 * 3  # 6 train images, batch 2
    assert "TRAINING SUMMARY" in result.output


def test_train_with_preset_and_short_schedule(workspace):
    """The MVTec preset trains for a shortened run on the toy backend."""
    result = run(
        "train", "--config", "presets/mvtec", "--backend", "toy:0", "--epochs", "2",
        "--dataset-root", workspace["data"], "--out-dir", workspace["out"],
    )
    assert result.exit_code == 0, result.output
    assert Checkpoint.load(os.path.join(workspace["out"], "checkpoint.pt")).epoch == 2


def test_train_resume(workspace):
    assert train_run(workspace).exit_code == 0
    checkpoint = os.path.join(workspace["out"], "checkpoint.pt")
    result = train_run(workspace, "--epochs", "3", "--resume", checkpoint)
    assert result.exit_code == 0, result.output
    assert Checkpoint.load(checkpoint).epoch == 3


def test_train_fraction_snapshot(workspace):
    result = train_run(workspace, "--fraction", "0.5")
    assert result.exit_code == 0, result.output
    with open(os.path.join(workspace["out"], "config.yaml")) as f:
        snapshot = yaml.safe_load(f)
    assert snapshot["dataset"]["fraction"] == 0.5
    history = pd.read_csv(os.path.join(workspace["out"], "train_history.csv"))
    assert len(history) == 2 * 2  # 2 of 3 images per category, batch 2, 2 epochs


def test_interrupted_train_resumes(workspace, monkeypatch):
    """Ctrl-C after the first epoch exits 130 and leaves a checkpoint to continue from."""
    original = Trainer._train_epoch

    def interrupted(self, epoch):
        if epoch == 1:
            raise KeyboardInterrupt()
        return original(self, epoch)

    monkeypatch.setattr(Trainer, "_train_epoch", interrupted)
    result = train_run(workspace)
    assert result.exit_code == 130
    checkpoint = os.path.join(workspace["out"], "checkpoint.pt")
    assert Checkpoint.load(checkpoint).epoch == 1

    monkeypatch.undo()
    result = train_run(workspace, "--resume", checkpoint)
    assert result.exit_code == 0, result.output
    assert Checkpoint.load(checkpoint).epoch == 2
    assert len(pd.read_csv(os.path.join(workspace["out"], "train_history.csv"))) == 6
    assert "Best epoch loss" in result.output


def test_train_missing_root_is_data_error(workspace):
    result = run("train", "--config", workspace["config"], "--dataset-root", "/no/such/root",
                 "--out-dir", workspace["out"])
    assert result.exit_code == 3


def test_train_invalid_fraction_is_config_error(workspace):
    result = train_run(workspace, "--fraction", "1.5")
    assert result.exit_code == 2


def test_unknown_config_is_config_error(workspace):
    result = run("train", "--config", "presets/kolektor", "--dataset-root", workspace["data"])
    assert result.exit_code == 2


def test_eval_matches_direct_evaluation(workspace):
    """The metrics file equals scoring and evaluating through the library."""
    assert train_run(workspace).exit_code == 0
    checkpoint_path = os.path.join(workspace["out"], "checkpoint.pt")
    eval_out = os.path.join(workspace["root"], "eval")
    result = run("eval", "--checkpoint", checkpoint_path, "--out-dir", eval_out)
    assert result.exit_code == 0, result.output
    assert "I-AUC" in result.output

    written = pd.read_csv(os.path.join(eval_out, "metrics.csv"), index_col="category")
    checkpoint = Checkpoint.load(checkpoint_path)
    config = checkpoint.config
    model = load_model(checkpoint, load_backend(config.backend))
    index = load_index(config.dataset)
    direct = evaluate(score_index(model, index.test_records(), config.inference, 32), index)
    assert list(written.index) == list(direct.index)
    assert np.allclose(written.to_numpy(), direct.to_numpy(), atol=1e-6, equal_nan=True)


def test_eval_missing_checkpoint(workspace):
    result = run("eval", "--checkpoint", os.path.join(workspace["root"], "missing.pt"))
    assert result.exit_code == 3


def test_eval_empty_test_split(workspace):
    assert train_run(workspace).exit_code == 0
    empty = os.path.join(workspace["root"], "empty")
    make_folder_tree(empty, categories=("bottle",), n_good=0, n_bad=0)
    os.makedirs(os.path.join(empty, "bottle", "test"), exist_ok=True)
    result = run("eval", "--checkpoint", os.path.join(workspace["out"], "checkpoint.pt"),
                 "--dataset-root", empty, "--out-dir", os.path.join(workspace["root"], "eval"))
    assert result.exit_code == 3


def test_predict_is_deterministic(workspace):
    assert train_run(workspace).exit_code == 0
    checkpoint = os.path.join(workspace["out"], "checkpoint.pt")
    images = workspace["written"]["bottle"]["bad"]
    scores = []
    for name in ("p1", "p2"):
        out = os.path.join(workspace["root"], name)
        result = run("predict", "--checkpoint", checkpoint, "--out-dir", out, *images)
        assert result.exit_code == 0, result.output
        frame = pd.read_csv(os.path.join(out, "scores.csv"))
        assert len(frame) == len(images)
        assert all(os.path.exists(p) for p in frame["overlay"])
        scores.append(frame["score"].to_numpy())
    assert np.array_equal(scores[0], scores[1])


def test_predict_unreadable_image(workspace):
    assert train_run(workspace).exit_code == 0
    result = run("predict", "--checkpoint", os.path.join(workspace["out"], "checkpoint.pt"),
                 "--out-dir", os.path.join(workspace["root"], "p"), os.path.join(workspace["root"], "nope.png"))
    assert result.exit_code == 3


def preview(ws, out, *extra):
    return run("synth-preview", "--config", ws["config"], "--dataset-root", ws["data"],
               "--out-dir", out, "--seed", "5", *extra)


def test_synth_preview_zero_count(workspace):
    result = preview(workspace, workspace["out"], "--count", "0")
    assert result.exit_code == 0, result.output
    assert not os.path.exists(os.path.join(workspace["out"], "synth_preview"))


def test_synth_preview_is_seeded(workspace):
    """Reruns with the same seed write identical triplets with binary masks."""
    dirs = []
    for name in ("a", "b"):
        out = os.path.join(workspace["root"], name)
        result = preview(workspace, out, "--count", "4", "--force-anomalous")
        assert result.exit_code == 0, result.output
        dirs.append(os.path.join(out, "synth_preview"))

    files = sorted(os.listdir(dirs[0]))
    assert len(files) == 12
    assert files == sorted(os.listdir(dirs[1]))
    for name in files:
        a = np.asarray(Image.open(os.path.join(dirs[0], name)))
        b = np.asarray(Image.open(os.path.join(dirs[1], name)))
        assert np.array_equal(a, b)
        if name.endswith("_mask.png"):
            assert set(np.unique(a)) <= {0, 255}
            assert a.any()


def test_inspect_config_reports_budget(workspace):
    """S=4, N=1 on the toy backend: 4*16 + 2*(32*16 + 16)."""
    result = run("inspect-config", "--backend", "toy:0")
    assert result.exit_code == 0, result.output
    assert "# trainable parameters: 1,120" in result.output
    assert "n_refine: 1" in result.output
