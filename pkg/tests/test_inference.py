"""Tests for post-processing, image scores and prediction output."""

import os
import tempfile

import numpy as np
import pandas as pd
import pytest
import torch

from src.clip_ada.alignment import build_aligner
from src.clip_ada.backbone import make_toy_backend
from src.clip_ada.config import InferenceConfig
from src.clip_ada.inference import (
    SCORES_FILENAME,
    gaussian_smooth,
    image_score,
    postprocess,
    predict_images,
    render_overlay,
    score_batch,
)
from src.clip_ada.types import ShapeMismatchError, SimilarityMap
from tests.helpers import TINY_DIMS, normal_image, toy_config, write_png


def bilinear_reference(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize with edge clamping."""

    def axis(n_out, n_in):
        src = np.maximum((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0.0)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    r0, r1, wr = axis(height, grid.shape[0])
    c0, c1, wc = axis(width, grid.shape[1])
    top = grid[r0][:, c0] * (1 - wc) + grid[r0][:, c1] * wc
    bottom = grid[r1][:, c0] * (1 - wc) + grid[r1][:, c1] * wc
    return top * (1 - wr)[:, None] + bottom * wr[:, None]


@pytest.fixture
def model():
    return build_aligner(toy_config(), make_toy_backend(seed=0, dims=TINY_DIMS))


def test_constant_map_is_preserved():
    """Test that upsampling and blurring keep a constant map constant."""
    grid = torch.full((4, 4), 0.37, dtype=torch.float64)
    out = postprocess(grid, 32, 32, sigma=4.0)
    assert out.shape == (32, 32)
    assert np.allclose(out, 0.37, atol=1e-12)


def test_upsampling_matches_bilinear_reference():
    grid = np.random.default_rng(0).random((4, 4))
    out = postprocess(torch.from_numpy(grid), 16, 16, sigma=0.0)
    assert np.allclose(out, bilinear_reference(grid, 16, 16), atol=1e-12)


def test_postprocess_accepts_similarity_map():
    grid = torch.rand(1, 4, 4)
    a = postprocess(SimilarityMap.from_probabilities(grid), 8, 8, sigma=1.0)
    b = postprocess(grid, 8, 8, sigma=1.0)
    assert np.array_equal(a, b)


def test_postprocess_rejects_batches():
    with pytest.raises(ShapeMismatchError):
        postprocess(torch.rand(2, 4, 4), 8, 8)


def test_postprocess_output_range():
    grid = torch.rand(4, 4)
    out = postprocess(grid, 16, 16, sigma=2.0)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_blur_preserves_mean():
    """Reflective padding keeps the total mass of the map."""
    values = np.random.default_rng(1).random((64, 64))
    blurred = gaussian_smooth(values, 4.0)
    assert abs(blurred.mean() - values.mean()) < 1e-6
    assert blurred.std() < values.std()


def test_blur_sigma_zero_is_identity():
    values = np.random.default_rng(2).random((8, 8))
    out = gaussian_smooth(values, 0.0)
    assert np.array_equal(out, values)
    assert out is not values
    with pytest.raises(ValueError):
        gaussian_smooth(values, -1.0)


def test_image_score_top_k():
    """Top-2 mean of [0.9, 0.8, 0.1, 0.1] is 0.85."""
    heat = np.array([[0.9, 0.1], [0.8, 0.1]])
    assert image_score(heat, 2) == pytest.approx(0.85, abs=1e-12)
    assert image_score(heat, 1) == pytest.approx(0.9, abs=1e-12)


def test_image_score_large_k_is_mean():
    heat = np.array([[0.9, 0.1], [0.8, 0.1]])
    assert image_score(heat, 4) == pytest.approx(0.475, abs=1e-12)
    assert image_score(heat, 500) == pytest.approx(0.475, abs=1e-12)
    with pytest.raises(ValueError):
        image_score(heat, 0)


def test_image_score_is_monotone():
    """Raising any pixel never lowers the score."""
    rng = np.random.default_rng(3)
    for _ in range(50):
        heat = rng.random((8, 8))
        raised = heat.copy()
        raised[rng.integers(8), rng.integers(8)] += rng.random()
        assert image_score(raised, 5) >= image_score(heat, 5)


def test_score_batch(model):
    images = torch.rand(3, 3, 16, 16)
    results = score_batch(model, images, InferenceConfig(k_top=8, sigma=1.0))
    assert len(results) == 3
    for result in results:
        assert result.anomaly_map.shape == (16, 16)
        assert 0.0 <= result.image_score <= 1.0
        assert result.image_score == pytest.approx(image_score(result.anomaly_map, 8))


def test_render_overlay():
    image = np.zeros((8, 8, 3), dtype=np.float32)
    overlay = render_overlay(image, np.ones((8, 8)))
    assert overlay.dtype == np.uint8
    assert overlay.shape == (8, 8, 3)
    with pytest.raises(ShapeMismatchError):
        render_overlay(image, np.ones((4, 4)))


def test_predict_images(model):
    """Test the scores file and overlays; repeated runs give the same scores."""
    with tempfile.TemporaryDirectory() as tmpdir:
        rng = np.random.default_rng(0)
        paths = [write_png(os.path.join(tmpdir, "in", f"img{i}.png"), normal_image(rng, 32)) for i in range(2)]
        out = os.path.join(tmpdir, "out")
        frame = predict_images(model, paths, InferenceConfig(k_top=8, sigma=1.0), 16, out)

        written = pd.read_csv(os.path.join(out, SCORES_FILENAME))
        assert list(written.columns) == ["path", "score", "overlay"]
        assert written["path"].tolist() == paths
        assert all(os.path.exists(p) for p in written["overlay"])
        assert os.path.basename(written["overlay"][1]) == "0001_img1_overlay.png"

        again = predict_images(model, paths, InferenceConfig(k_top=8, sigma=1.0), 16, out, write_overlays=False)
        assert np.array_equal(again["score"].to_numpy(), frame["score"].to_numpy())
