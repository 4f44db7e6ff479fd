import numpy as np
import pytest
import torch

from protodist.model import ModelConfig
from protodist.synthetic import glyph_dataset, texture_dataset
from protodist.trainer import TrainConfig, fit, load_checkpoint


@pytest.fixture(scope="session")
def glyph_data():
    return glyph_dataset(chars="0123", n_per_class=100, seed=0, splits=(0.6, 0.2, 0.2))


@pytest.fixture(scope="session")
def texture_data():
    return texture_dataset(n=80, seed=7)


@pytest.fixture(scope="session")
def toy_model_config():
    return ModelConfig(
        class_count=4,
        latent_dim=16,
        image_shape=(1, 28, 28),
        encoder_widths=(8, 16, 32, 32, 32),
        seed=1,
    )


@pytest.fixture(scope="session")
def trained(glyph_data, toy_model_config, tmp_path_factory):
    """One real training run shared by integration/CLI/acceptance tests.

    Returns (checkpoint object, checkpoint directory path).
    """
    ckpt_dir = tmp_path_factory.mktemp("session_ckpt") / "glyphs"
    train_cfg = TrainConfig(
        epochs=30,
        batch_size=32,
        learning_rate=2e-3,
        metric="perceptual",
        seed=3,
        eval_every=0,
        checkpoint_dir=str(ckpt_dir),
    )
    checkpoint = fit(glyph_data, toy_model_config, train_cfg)
    return checkpoint, ckpt_dir
