"""
Synthetic anomalies for self-supervised training.

Masks come from thresholded Perlin noise; the masked region is blended with a
texture (the image itself after shuffling and colour jitter, uniform noise, or
an external texture folder). All randomness is drawn from the numpy Generator
passed in, so a sample stream is a pure function of (data order, seed).
"""

import logging
import math
import os
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from .config import SynthesisConfig
from .types import ShapeMismatchError, SyntheticSample

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def _next_power_2(num: int) -> int:
    return 1 << (num - 1).bit_length()


def _lerp(x: np.ndarray, y: np.ndarray, w: np.ndarray) -> np.ndarray:
    return (y - x) * w + x


def _fade(t: np.ndarray) -> np.ndarray:
    return ((6 * t - 15) * t + 10) * t * t * t


def rand_perlin_2d(shape: Tuple[int, int], res: Tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Single-octave 2D Perlin noise; ``shape`` must be divisible by ``res``."""
    delta = (res[0] / shape[0], res[1] / shape[1])
    d = (shape[0] // res[0], shape[1] // res[1])
    grid = np.mgrid[0:res[0]:delta[0], 0:res[1]:delta[1]].transpose(1, 2, 0) % 1

    angles = 2 * math.pi * rng.random((res[0] + 1, res[1] + 1))
    gradients = np.stack((np.cos(angles), np.sin(angles)), axis=-1)

    def tile_grads(rows: slice, cols: slice) -> np.ndarray:
        return np.repeat(np.repeat(gradients[rows, cols], d[0], axis=0), d[1], axis=1)

    def dot(grad: np.ndarray, shift: Tuple[int, int]) -> np.ndarray:
        offset = np.stack(
            (grid[:shape[0], :shape[1], 0] + shift[0], grid[:shape[0], :shape[1], 1] + shift[1]),
            axis=-1,
        )
        return (offset * grad[:shape[0], :shape[1]]).sum(axis=-1)

    n00 = dot(tile_grads(slice(0, -1), slice(0, -1)), (0, 0))
    n10 = dot(tile_grads(slice(1, None), slice(0, -1)), (-1, 0))
    n01 = dot(tile_grads(slice(0, -1), slice(1, None)), (0, -1))
    n11 = dot(tile_grads(slice(1, None), slice(1, None)), (-1, -1))
    t = _fade(grid[:shape[0], :shape[1]])
    return math.sqrt(2) * _lerp(_lerp(n00, n10, t[..., 0]), _lerp(n01, n11, t[..., 0]), t[..., 1])


def perlin_noise(height: int, width: int, cfg: SynthesisConfig, rng: np.random.Generator) -> np.ndarray:
    """Perlin noise of size (height, width) with per-axis scales 2^k, k in the configured range."""
    size = _next_power_2(max(height, width))
    low, high = cfg.perlin_scale_range
    scale_x = min(2 ** int(rng.integers(low, high + 1)), size)
    scale_y = min(2 ** int(rng.integers(low, high + 1)), size)

    noise = np.zeros((size, size))
    amplitude_sum = 0.0
    for octave in range(cfg.perlin_octaves):
        amplitude = 0.5 ** octave
        res = (min(scale_x * 2 ** octave, size), min(scale_y * 2 ** octave, size))
        noise += amplitude * rand_perlin_2d((size, size), res, rng)
        amplitude_sum += amplitude
    noise /= amplitude_sum

    if cfg.rotate_noise:
        angle = float(rng.uniform(-90.0, 90.0))
        noise = ndimage.rotate(noise, angle, reshape=False, order=1, mode="reflect")
    return noise[:height, :width]


def _fallback_rectangle(height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    mask = np.zeros((height, width), dtype=np.uint8)
    box_h = int(rng.integers(max(1, height // 8), max(2, height // 4) + 1))
    box_w = int(rng.integers(max(1, width // 8), max(2, width // 4) + 1))
    top = int(rng.integers(0, height - box_h + 1))
    left = int(rng.integers(0, width - box_w + 1))
    mask[top:top + box_h, left:left + box_w] = 1
    return mask


def generate_mask(cfg: SynthesisConfig, rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Non-empty binary mask from thresholded Perlin noise; rectangle fallback after repeated misses."""
    for _ in range(cfg.max_mask_attempts):
        mask = (perlin_noise(height, width, cfg, rng) > cfg.binarize_threshold).astype(np.uint8)
        if mask.any():
            return mask
    logger.debug(f"Perlin mask empty after {cfg.max_mask_attempts} attempts, using rectangle")
    return _fallback_rectangle(height, width, rng)


def blend(source: np.ndarray, texture: np.ndarray, mask: np.ndarray, beta: float) -> np.ndarray:
    """(1 - m)·source + m·(β·texture + (1 - β)·source)."""
    if source.shape != texture.shape:
        raise ShapeMismatchError(f"Source {source.shape} and texture {texture.shape} differ")
    if mask.shape != source.shape[:2]:
        raise ShapeMismatchError(f"Mask {mask.shape} does not match image {source.shape[:2]}")
    if not 0.0 < beta <= 1.0:
        raise ValueError(f"Opacity must lie in (0, 1], got {beta}")
    m = mask.astype(source.dtype)[..., None]
    return (1 - m) * source + m * (beta * texture + (1 - beta) * source)


def patch_mask(mask_full: np.ndarray, patch_size: int, threshold: float) -> np.ndarray:
    """Cell = 1 iff the anomalous fraction of its patch is at least ``threshold``."""
    height, width = mask_full.shape
    if height % patch_size or width % patch_size:
        raise ShapeMismatchError(f"Mask {mask_full.shape} is not divisible by patch size {patch_size}")
    fractions = mask_full.reshape(
        height // patch_size, patch_size, width // patch_size, patch_size
    ).mean(axis=(1, 3))
    return (fractions >= threshold).astype(np.uint8)


def _color_jitter(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    brightness = rng.uniform(0.6, 1.4)
    contrast = rng.uniform(0.6, 1.4)
    mean = image.mean()
    jittered = (image - mean) * contrast + mean * brightness
    jittered = jittered[..., rng.permutation(3)]
    return np.clip(jittered, 0.0, 1.0).astype(np.float32)


class TextureProvider:
    """Produces a texture image the size of a source image."""

    def __init__(self, source: str = "self"):
        self.source = source
        self.files: List[str] = []
        if source not in ("self", "noise"):
            folder = Path(source)
            if not folder.is_dir():
                raise FileNotFoundError(f"Texture folder not found: {source}")
            self.files = sorted(
                str(p) for p in folder.rglob("*") if p.suffix.lower() in IMAGE_EXTENSIONS
            )
            if not self.files:
                raise FileNotFoundError(f"No texture images in {source}")
            logger.info(f"Loaded {len(self.files)} texture images from {source}")

    def __call__(self, image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        height, width = image.shape[:2]
        if self.source == "noise":
            return rng.uniform(0.0, 1.0, size=image.shape).astype(np.float32)
        if self.source == "self":
            texture = image
            if rng.random() < 0.5:
                texture = texture[::-1]
            if rng.random() < 0.5:
                texture = texture[:, ::-1]
            shift = (int(rng.integers(0, height)), int(rng.integers(0, width)))
            texture = np.roll(texture, shift, axis=(0, 1))
            return _color_jitter(np.ascontiguousarray(texture), rng)
        path = self.files[int(rng.integers(0, len(self.files)))]
        with Image.open(path) as img:
            texture = np.asarray(
                img.convert("RGB").resize((width, height), Image.BILINEAR), dtype=np.float32
            ) / 255.0
        return _color_jitter(texture, rng)


class AnomalySynthesizer:
    """Turns normal images into (possibly) anomalous training samples."""

    def __init__(self, cfg: SynthesisConfig, patch_size: int, textures: Optional[TextureProvider] = None):
        self.cfg = cfg
        self.patch_size = patch_size
        self.textures = textures or TextureProvider(cfg.texture_source)

    def __call__(self, source: np.ndarray, rng: np.random.Generator) -> SyntheticSample:
        return self.make_sample(source, rng)

    def make_sample(self, source: np.ndarray, rng: np.random.Generator) -> SyntheticSample:
        """With probability p_a, perturb ``source`` inside a Perlin mask."""
        height, width = source.shape[:2]
        source = source.astype(np.float32)
        if rng.random() >= self.cfg.anomaly_probability:
            empty = np.zeros((height, width), dtype=np.uint8)
            return SyntheticSample(
                image=source,
                mask_full=empty,
                mask_patch=patch_mask(empty, self.patch_size, self.cfg.patch_threshold),
                is_anomalous=False,
            )

        mask = generate_mask(self.cfg, rng, height, width)
        texture = self.textures(source, rng)
        beta = float(rng.uniform(*self.cfg.opacity_range))
        image = blend(source, texture, mask, beta).astype(np.float32)
        return SyntheticSample(
            image=image,
            mask_full=mask,
            mask_patch=patch_mask(mask, self.patch_size, self.cfg.patch_threshold),
            is_anomalous=True,
        )


def make_sample(
    source: np.ndarray,
    cfg: SynthesisConfig,
    rng: np.random.Generator,
    patch_size: int = 16,
) -> SyntheticSample:
    """One-off sample; reuse an AnomalySynthesizer in loops."""
    return AnomalySynthesizer(cfg, patch_size).make_sample(source, rng)


def sample_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for a (seed, epoch, index, ...) key."""
    return np.random.default_rng([seed, *keys])


def save_preview(sample: SyntheticSample, out_dir: str, stem: str) -> List[str]:
    """Write image, mask and overlay PNGs for visual audit."""
    from .inference import render_overlay

    os.makedirs(out_dir, exist_ok=True)
    image_u8 = (np.clip(sample.image, 0.0, 1.0) * 255).round().astype(np.uint8)
    paths = [
        os.path.join(out_dir, f"{stem}_image.png"),
        os.path.join(out_dir, f"{stem}_mask.png"),
        os.path.join(out_dir, f"{stem}_overlay.png"),
    ]
    Image.fromarray(image_u8).save(paths[0])
    Image.fromarray((sample.mask_full * 255).astype(np.uint8)).save(paths[1])
    Image.fromarray(render_overlay(sample.image, sample.mask_full.astype(np.float32))).save(paths[2])
    return paths
