"""Procedural toy image benchmark, used by the demos and the test suite.

In-distribution data are rendered glyphs (one character per class) with
position jitter and pixel noise; out-of-distribution data are either
different glyphs or random textures (checkerboards, stripes, blobs). The
generator needs nothing beyond Pillow's built-in font, so a complete
train/detect cycle runs without downloading anything.
"""

from __future__ import annotations

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .datasets import DatasetManifest, LoadedDataset, ManifestEntry


def _font(size: int):
    try:
        return ImageFont.load_default(size=size)
    except TypeError:  # older Pillow: bitmap font only
        return ImageFont.load_default()


def render_glyph(
    char: str, canvas: int = 28, offset: tuple[int, int] = (0, 0), size: int = 18
) -> np.ndarray:
    """Render one character as a (canvas, canvas) uint8 image."""
    im = Image.new("L", (canvas, canvas), 0)
    draw = ImageDraw.Draw(im)
    font = _font(size)
    left, top, right, bottom = draw.textbbox((0, 0), char, font=font)
    x = (canvas - (right - left)) // 2 - left + offset[0]
    y = (canvas - (bottom - top)) // 2 - top + offset[1]
    draw.text((x, y), char, fill=255, font=font)
    return np.asarray(im, dtype=np.uint8)


def glyph_dataset(
    chars: str = "0123",
    n_per_class: int = 120,
    image_shape: tuple[int, int, int] = (1, 28, 28),
    seed: int = 0,
    splits: tuple[float, float, float] = (0.6, 0.2, 0.2),
    jitter: int = 3,
    noise: float = 0.05,
) -> LoadedDataset:
    """Labeled glyph classes with jitter and noise, split train/val/test."""
    channels, height, width = image_shape
    rng = np.random.default_rng(seed)
    n_total = len(chars) * n_per_class
    images = np.zeros((n_total, channels, height, width), dtype=np.float32)
    entries = []
    boundaries = np.cumsum([int(round(r * n_per_class)) for r in splits[:2]])
    row = 0
    for label, char in enumerate(chars):
        for i in range(n_per_class):
            off = tuple(rng.integers(-jitter, jitter + 1, size=2))
            glyph = render_glyph(char, canvas=height, offset=off).astype(np.float32)
            img = glyph / 255.0 + rng.normal(0.0, noise, size=(height, width))
            images[row, :] = np.clip(img, 0.0, 1.0)[None, :, :]
            split = "train" if i < boundaries[0] else ("val" if i < boundaries[1] else "test")
            entries.append(ManifestEntry(source=row, label=label, split=split))
            row += 1
    manifest = DatasetManifest(
        entries=entries, class_names=list(chars), image_shape=image_shape
    )
    manifest.validate()
    return LoadedDataset(manifest=manifest, images=images)


def _checker(rng, h, w):
    cell = int(rng.integers(2, 6))
    yy, xx = np.mgrid[0:h, 0:w]
    phase = rng.integers(0, 2)
    return (((yy // cell + xx // cell) + phase) % 2).astype(np.float32)


def _stripes(rng, h, w):
    period = float(rng.uniform(3, 8))
    angle = float(rng.uniform(0, np.pi))
    yy, xx = np.mgrid[0:h, 0:w]
    wave = np.sin(2 * np.pi * (np.cos(angle) * xx + np.sin(angle) * yy) / period)
    return ((wave + 1) / 2).astype(np.float32)


def _blob(rng, h, w):
    cy, cx = rng.uniform(h * 0.3, h * 0.7), rng.uniform(w * 0.3, w * 0.7)
    sy, sx = rng.uniform(2, 6), rng.uniform(2, 6)
    yy, xx = np.mgrid[0:h, 0:w]
    return np.exp(-(((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2)).astype(np.float32)


def texture_dataset(
    n: int = 200,
    image_shape: tuple[int, int, int] = (1, 28, 28),
    seed: int = 0,
    noise: float = 0.05,
) -> LoadedDataset:
    """Unlabeled-looking texture images (all label 0, split 'test')."""
    channels, height, width = image_shape
    rng = np.random.default_rng(seed)
    makers = (_checker, _stripes, _blob)
    images = np.zeros((n, channels, height, width), dtype=np.float32)
    entries = []
    for i in range(n):
        tex = makers[i % len(makers)](rng, height, width)
        img = np.clip(tex + rng.normal(0.0, noise, size=(height, width)), 0.0, 1.0)
        images[i, :] = img[None, :, :]
        entries.append(ManifestEntry(source=i, label=0, split="test"))
    manifest = DatasetManifest(
        entries=entries, class_names=["texture"], image_shape=image_shape
    )
    return LoadedDataset(manifest=manifest, images=images)
