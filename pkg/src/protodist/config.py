"""Flat experiment configuration: one JSON object whose keys are
``section.key`` strings (sections: data, model, train, fusion).

The CLI mirrors every key as a ``--section.key value`` override. Values in
override strings are parsed as JSON where possible and fall back to plain
strings, so ``--train.epochs 5`` and ``--data.manifest images.csv`` both
work.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

from .datasets import (
    LoadedDataset,
    assign_splits,
    carve_validation,
    load_idx,
    load_manifest,
)
from .errors import ConfigError, IngestionError
from .model import ModelConfig
from .ood import FusionConfig
from .trainer import TrainConfig

SECTIONS = ("data", "model", "train", "fusion")


def load_config_file(path: Union[str, Path]) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    validate_keys(cfg)
    return cfg


def validate_keys(cfg: dict) -> None:
    for key in cfg:
        section = key.split(".", 1)[0]
        if "." not in key or section not in SECTIONS:
            raise ConfigError(
                f"config key {key!r} is not of the form section.key "
                f"with section in {SECTIONS}"
            )


def apply_overrides(cfg: dict, overrides: dict[str, str]) -> dict:
    """Overlay ``--section.key value`` pairs; values parse as JSON if they can."""
    merged = dict(cfg)
    for key, raw in overrides.items():
        try:
            merged[key] = json.loads(raw)
        except json.JSONDecodeError:
            merged[key] = raw
    validate_keys(merged)
    return merged


def _section(cfg: dict, name: str) -> dict:
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in cfg.items() if k.startswith(prefix)}


def model_config_from(cfg: dict) -> ModelConfig:
    d = _section(cfg, "model")
    base = ModelConfig().to_dict()
    unknown = set(d) - set(base)
    if unknown:
        raise ConfigError(f"unknown model config keys: {sorted('model.' + k for k in unknown)}")
    base.update(d)
    return ModelConfig.from_dict(base)


def train_config_from(cfg: dict) -> TrainConfig:
    d = _section(cfg, "train")
    base = TrainConfig().to_dict()
    unknown = set(d) - set(base)
    if unknown:
        raise ConfigError(f"unknown train config keys: {sorted('train.' + k for k in unknown)}")
    base.update(d)
    return TrainConfig.from_dict(base)


def fusion_config_from(cfg: dict) -> FusionConfig:
    d = _section(cfg, "fusion")
    base = FusionConfig().to_dict()
    unknown = set(d) - set(base)
    if unknown:
        raise ConfigError(f"unknown fusion config keys: {sorted('fusion.' + k for k in unknown)}")
    base.update(d)
    return FusionConfig.from_dict(base)


@dataclass
class DataConfig:
    """Where the training data lives and how it is split."""

    format: str = "idx"  # "idx" | "manifest"
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    manifest: Optional[str] = None
    image_shape: tuple[int, int, int] = (1, 28, 28)
    val_fraction: float = 0.1
    split_ratios: Optional[tuple[float, float, float]] = None
    split_seed: int = 0

    @classmethod
    def from_flat(cls, cfg: dict) -> "DataConfig":
        d = _section(cfg, "data")
        known = {
            "format", "train_images", "train_labels", "test_images",
            "test_labels", "manifest", "image_shape", "val_fraction",
            "split_ratios", "split_seed",
        }
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown data config keys: {sorted('data.' + k for k in unknown)}")
        out = cls()
        for k, v in d.items():
            setattr(out, k, v)
        out.image_shape = tuple(out.image_shape)
        if out.split_ratios is not None:
            out.split_ratios = tuple(out.split_ratios)
        if out.format not in ("idx", "manifest"):
            raise ConfigError("data.format must be 'idx' or 'manifest'")
        return out


def _require_file(path: Optional[str], key: str, base: Path) -> Path:
    if path is None:
        raise ConfigError(f"{key} is required for this data format")
    resolved = base / path
    if not resolved.exists():
        raise IngestionError(f"{key}: file not found: {resolved}")
    return resolved


def load_training_data(data_cfg: DataConfig, base_dir: Union[str, Path] = ".") -> LoadedDataset:
    """Materialize the training dataset with train/val(/test) splits."""
    base = Path(base_dir)
    if data_cfg.format == "idx":
        images = _require_file(data_cfg.train_images, "data.train_images", base)
        labels = _require_file(data_cfg.train_labels, "data.train_labels", base)
        loaded = load_idx(images, labels, split="train")
        manifest = carve_validation(
            loaded.manifest, fraction=data_cfg.val_fraction, seed=data_cfg.split_seed
        )
        return loaded.with_manifest(manifest)
    manifest_path = _require_file(data_cfg.manifest, "data.manifest", base)
    loaded = load_manifest(manifest_path, image_shape=data_cfg.image_shape)
    manifest = loaded.manifest
    if data_cfg.split_ratios is not None:
        manifest = assign_splits(
            manifest, ratios=data_cfg.split_ratios, seed=data_cfg.split_seed
        )
    elif len(manifest.split_indices("val")) == 0:
        manifest = carve_validation(
            manifest, fraction=data_cfg.val_fraction, seed=data_cfg.split_seed
        )
    return loaded.with_manifest(manifest)
