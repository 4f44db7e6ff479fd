"""Shared helpers for the test suite: tiny model instances, IDX file
construction, PNG manifest trees, and loss-term evaluation closures."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from protodist.datasets import IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC
from protodist.model import ModelConfig, init_model
from protodist.objectives import cls_loss, kl_loss, orth_loss, rec_loss
from protodist.synthetic import render_glyph


def small_config(**overrides) -> ModelConfig:
    """A K=2, J=2, L=4 instance on 16x16 inputs (fast, general J)."""
    base = dict(
        class_count=2,
        prototypes_per_class=2,
        latent_dim=4,
        image_shape=(1, 16, 16),
        encoder_widths=(4, 4, 8, 8, 8),
        seed=7,
    )
    base.update(overrides)
    return ModelConfig(**base)


def small_model(dtype=torch.float64, **overrides):
    return init_model(small_config(**overrides), dtype=dtype)


def write_idx_pair(
    directory: Path,
    images: np.ndarray,  # (N, H, W) uint8
    labels: np.ndarray,  # (N,) uint8
    image_magic: int = IDX_IMAGE_MAGIC,
    label_magic: int = IDX_LABEL_MAGIC,
    image_count: int | None = None,
    label_count: int | None = None,
    truncate_images: int = 0,
) -> tuple[Path, Path]:
    """Hand-build an IDX image/label file pair, byte by byte."""
    n, h, w = images.shape
    img_path = directory / "images-idx3-ubyte"
    lbl_path = directory / "labels-idx1-ubyte"
    img_blob = struct.pack(
        ">IIII", image_magic, n if image_count is None else image_count, h, w
    ) + images.astype(np.uint8).tobytes()
    if truncate_images:
        img_blob = img_blob[:-truncate_images]
    img_path.write_bytes(img_blob)
    lbl_blob = struct.pack(
        ">II", label_magic, n if label_count is None else label_count
    ) + labels.astype(np.uint8).tobytes()
    lbl_path.write_bytes(lbl_blob)
    return img_path, lbl_path


def write_glyph_png_tree(
    directory: Path,
    chars: str = "012",
    per_class: int = 24,
    fmt: str = "csv",
    seed: int = 0,
) -> Path:
    """Render glyph PNGs on disk plus a manifest file referencing them.

    Splits are assigned round-robin as train/train/train/val/test so each
    class has all three tags.
    """
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []
    cycle = ("train", "train", "train", "val", "test")
    for label, char in enumerate(chars):
        for i in range(per_class):
            off = tuple(rng.integers(-2, 3, size=2))
            arr = render_glyph(char, canvas=28, offset=off)
            name = f"img_{label}_{i}.png"
            Image.fromarray(arr, mode="L").save(directory / name)
            rows.append((name, label, cycle[i % len(cycle)]))
    if fmt == "json":
        import json

        manifest = directory / "manifest.json"
        manifest.write_text(
            json.dumps(
                [{"path": p, "label": l, "split": s} for p, l, s in rows], indent=1
            )
        )
    else:
        manifest = directory / "manifest.csv"
        with open(manifest, "w", newline="") as f:
            f.write("path,label,split\n")
            for p, l, s in rows:
                f.write(f"{p},{l},{s}\n")
    return manifest


TERMS = ("cls", "kl", "rec", "orth")


def loss_term_value(model, term, x, y, eps, metric) -> torch.Tensor:
    """One named loss term from a fresh forward pass with fixed noise."""
    fp = model(x, noise=eps)
    if term == "cls":
        return cls_loss(fp.logits, y)
    if term == "kl":
        return kl_loss(fp.latent, y, model.prototypes, fp.distances.j_star)
    if term == "rec":
        return rec_loss(x, fp.reconstruction, metric)
    if term == "orth":
        return orth_loss(model.prototypes)
    raise ValueError(term)
